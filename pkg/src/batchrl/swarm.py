"""Box-bounded particle swarm maximizer with a fully connected (star) swarm."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Optional

import numpy as np


@dataclass(frozen=True)
class SwarmConfig:
    n_particles: int = 100
    n_iterations: int = 100
    inertia: float = 0.7298
    cognitive: float = 1.49618
    social: float = 1.49618
    velocity_cap: float = 0.5  # fraction of the box width
    init_velocity: float = 0.25  # fraction of the box width
    topology: str = "star"

    def __post_init__(self):
        if self.n_particles < 2:
            raise ValueError("a swarm needs at least two particles")
        if self.n_iterations < 1:
            raise ValueError("n_iterations must be >= 1")
        if min(self.inertia, self.cognitive, self.social, self.velocity_cap, self.init_velocity) < 0:
            raise ValueError("swarm weights must be nonnegative")
        if self.topology != "star":
            raise ValueError(f"unsupported topology {self.topology!r}")


@dataclass
class Particle:
    position: np.ndarray
    velocity: np.ndarray
    best_position: np.ndarray
    best_fitness: float = field(default=-np.inf)


def _as_box(bounds, dim: int) -> tuple[np.ndarray, np.ndarray]:
    lo, hi = bounds
    lo = np.broadcast_to(np.asarray(lo, dtype=float), (dim,)).copy()
    hi = np.broadcast_to(np.asarray(hi, dtype=float), (dim,)).copy()
    if not (np.all(np.isfinite(lo)) and np.all(np.isfinite(hi))):
        raise ValueError("bounds must be finite")
    if np.any(lo > hi):
        raise ValueError("empty box: some lower bound exceeds its upper bound")
    return lo, hi


def clamp_to_box(x, bounds) -> np.ndarray:
    x = np.asarray(x, dtype=float)
    lo, hi = _as_box(bounds, x.shape[-1])
    return np.clip(x, lo, hi)


def _move(pos, vel, pbest, gbest, r1, r2, cfg: SwarmConfig, lo, hi):
    vmax = cfg.velocity_cap * (hi - lo)
    vel = cfg.inertia * vel + cfg.cognitive * r1 * (pbest - pos) + cfg.social * r2 * (gbest - pos)
    vel = np.clip(vel, -vmax, vmax)
    pos = np.clip(pos + vel, lo, hi)
    return pos, vel


def update_particle(
    p: Particle, global_best, config: SwarmConfig, rng: np.random.Generator, bounds
) -> Particle:
    """One velocity/position update; ``r1`` and ``r2`` are drawn from ``rng`` in that order."""
    lo, hi = _as_box(bounds, len(p.position))
    r1, r2 = rng.random((2, len(p.position)))
    pos, vel = _move(p.position, p.velocity, p.best_position, np.asarray(global_best, float), r1, r2, config, lo, hi)
    return Particle(pos, vel, p.best_position.copy(), p.best_fitness)


def _evaluate(fitness, X, vectorized, executor) -> np.ndarray:
    if vectorized:
        values = np.asarray(fitness(X), dtype=float).reshape(-1)
        if values.shape[0] != X.shape[0]:
            raise ValueError("vectorized fitness returned the wrong number of values")
        return values
    rows = list(X)
    if executor is not None:
        return np.fromiter(executor.map(fitness, rows), dtype=float, count=len(rows))
    return np.fromiter((fitness(x) for x in rows), dtype=float, count=len(rows))


def pso_maximize(
    fitness: Callable,
    dim: int,
    bounds,
    config: SwarmConfig = SwarmConfig(),
    seed: int = 0,
    *,
    vectorized: bool = False,
    executor=None,
    init: Optional[np.ndarray] = None,
    callback: Optional[Callable] = None,
) -> tuple[np.ndarray, float]:
    """Maximize ``fitness`` over a box with a global-best particle swarm.

    ``fitness`` maps a position to a float, or a ``(n, dim)`` matrix to ``n``
    floats when ``vectorized`` is set. Without vectorization the per-particle
    calls of one iteration go through ``executor.map`` when an executor is
    given. Each particle draws from its own stream spawned from ``seed``, so
    results do not depend on evaluation order or worker count.

    ``init`` optionally fixes the starting positions of the first particles.
    ``callback(iteration, positions, best_fitness)`` runs after each
    evaluation round.
    """
    if dim < 1:
        raise ValueError("dim must be >= 1")
    lo, hi = _as_box(bounds, dim)
    n = config.n_particles
    width = hi - lo
    rngs = [np.random.default_rng(s) for s in np.random.SeedSequence(seed).spawn(n)]

    pos = np.empty((n, dim))
    vel = np.empty((n, dim))
    for i, rng in enumerate(rngs):
        pos[i] = lo + rng.random(dim) * width
        vel[i] = (2.0 * rng.random(dim) - 1.0) * config.init_velocity * width
    if init is not None:
        init = np.atleast_2d(np.asarray(init, dtype=float))[:n]
        pos[: len(init)] = np.clip(init, lo, hi)

    pbest = pos.copy()
    pbest_f = np.full(n, -np.inf)
    gbest = pos[0].copy()
    gbest_f = -np.inf

    for it in range(config.n_iterations):
        f = _evaluate(fitness, pos, vectorized, executor)
        improved = f > pbest_f
        pbest[improved] = pos[improved]
        pbest_f[improved] = f[improved]
        i = int(np.argmax(pbest_f))
        if pbest_f[i] > gbest_f:
            gbest_f = float(pbest_f[i])
            gbest = pbest[i].copy()
        if callback is not None:
            callback(it, pos.copy(), gbest_f)
        if it == config.n_iterations - 1:
            break
        r = np.stack([rng.random((2, dim)) for rng in rngs])
        pos, vel = _move(pos, vel, pbest, gbest, r[:, 0], r[:, 1], config, lo, hi)

    return gbest, gbest_f

"""Particle swarm optimization policy: receding-horizon planning on a learned model."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from .env import ActionDelta
from .model import HistoryWindow
from .swarm import SwarmConfig, pso_maximize


def gamma_from_q(q: float, T: int) -> float:
    """Discount under which the reward ``T - 1`` steps ahead carries weight ``q``."""
    if not (0.0 <= q <= 1.0):
        raise ValueError("q must lie in [0, 1]")
    if T < 1:
        raise ValueError("T must be >= 1")
    if T == 1:
        return 1.0
    return q ** (1.0 / (T - 1))


@dataclass(frozen=True)
class PsopConfig:
    horizon: int = 50
    q: float = 0.25
    swarm: SwarmConfig = field(default_factory=SwarmConfig)
    warm_start: bool = False

    def __post_init__(self):
        if self.horizon < 1:
            raise ValueError("planning horizon must be >= 1")
        if not (0.0 <= self.q <= 1.0):
            raise ValueError("q must lie in [0, 1]")

    @property
    def gamma(self) -> float:
        return gamma_from_q(self.q, self.horizon)


def plan(model, hist, cfg: PsopConfig = PsopConfig(), seed: int = 0, init: Optional[np.ndarray] = None):
    """Best action sequence found by the swarm and its model-estimated return.

    The sequence is flat, ``(a_t, ..., a_{t+T-1})`` laid out as ``3 T`` values.
    """
    state = model.encode(hist)
    T = cfg.horizon
    gamma = cfg.gamma

    def fitness(X):
        return model.rollout_returns(state, X.reshape(len(X), T, 3), gamma)

    x, value = pso_maximize(fitness, 3 * T, (-1.0, 1.0), cfg.swarm, seed, vectorized=True, init=init)
    return x, value


def act(model, hist, cfg: PsopConfig = PsopConfig(), seed: int = 0) -> ActionDelta:
    x, _ = plan(model, hist, cfg, seed)
    return ActionDelta(*(float(v) for v in x[:3]))


def step_seed(master: int, t: int) -> int:
    """Planning seed for time step ``t`` of a closed-loop run."""
    return int(np.random.SeedSequence([master, t]).generate_state(1)[0])


class PsopPolicy:
    """Closed-loop PSO-P controller: replans from scratch at every query.

    With ``cfg.warm_start`` the previous plan, shifted by one step and padded
    with zero actions, seeds one particle of the next search.
    """

    def __init__(self, model, cfg: PsopConfig = PsopConfig(), seed: int = 0):
        self.model = model
        self.cfg = cfg
        self.seed = seed
        self.warmup = model.horizon
        self._previous: Optional[np.ndarray] = None

    def reset(self) -> None:
        self._previous = None

    def __call__(self, history, t: int) -> np.ndarray:
        hist = HistoryWindow(np.asarray(history)[-(self.model.horizon + 1):])
        init = None
        if self.cfg.warm_start and self._previous is not None:
            init = np.concatenate([self._previous[3:], np.zeros(3)])
        x, _ = plan(self.model, hist, self.cfg, step_seed(self.seed, t), init=init)
        self._previous = x
        return x[:3].copy()

"""Neural fitted Q-iteration over the 27 discrete steering changes.

The Q-network is a [9-20-1] logistic MLP on the z-scored pair
``(observation, action)``. Every iteration regresses it (warm-started from
the previous iteration) onto bootstrapped targets ``r + gamma max_a' Q(o', a')``
mapped affinely into ``[0.1, 0.9]``. Training is plain per-sample gradient
descent; the inner loops are compiled with numba.
"""

from __future__ import annotations

import itertools
import json
import logging
from dataclasses import dataclass
from pathlib import Path
from typing import Callable, NamedTuple, Optional, Sequence

import numba
import numpy as np

from .data import TransitionBatch, ZScore
from .env import ActionDelta
from .model import closed_loop_rewards
from .psop import gamma_from_q

log = logging.getLogger(__name__)

ACTIONS = np.array(list(itertools.product((-1.0, 0.0, 1.0), repeat=3)))
N_ACTIONS = len(ACTIONS)
N_INPUTS = 9
N_HIDDEN = 20
Q_LOW, Q_HIGH = 0.1, 0.9
POLICY_FORMAT = "batchrl.nfq-policy"
POLICY_VERSION = 1


def discretize_actions() -> np.ndarray:
    """The 27 triples of ``{-1, 0, 1}^3``, ``dv`` varying slowest and ``dh`` fastest."""
    return ACTIONS.copy()


@dataclass(frozen=True)
class QScaling:
    """Affine map of raw targets ``[lo, hi]`` onto ``[0.1, 0.9]``."""

    lo: float
    hi: float

    @classmethod
    def fit(cls, targets) -> "QScaling":
        t = np.asarray(targets, dtype=float)
        if t.size == 0:
            raise ValueError("cannot scale an empty target set")
        return cls(float(t.min()), float(t.max()))

    @property
    def degenerate(self) -> bool:
        return not self.hi > self.lo

    def scale(self, x):
        x = np.asarray(x, dtype=float)
        if self.degenerate:
            return np.full_like(x, 0.5)
        return Q_LOW + (Q_HIGH - Q_LOW) * (x - self.lo) / (self.hi - self.lo)

    def unscale(self, y):
        y = np.asarray(y, dtype=float)
        if self.degenerate:
            return np.full_like(y, self.lo)
        return self.lo + (y - Q_LOW) * (self.hi - self.lo) / (Q_HIGH - Q_LOW)


def scale_q_targets(targets) -> tuple[np.ndarray, QScaling]:
    scaling = QScaling.fit(targets)
    return scaling.scale(targets), scaling


def _sigmoid(x):
    return 1.0 / (1.0 + np.exp(-x))


@dataclass
class QNetwork:
    """Logistic ``[9-20-1]`` network; the output is a scaled Q value in (0, 1)."""

    W1: np.ndarray  # (hidden, inputs)
    b1: np.ndarray
    W2: np.ndarray  # (hidden,)
    b2: np.ndarray  # (1,)

    @classmethod
    def init(cls, rng: np.random.Generator, n_in: int = N_INPUTS, n_hidden: int = N_HIDDEN, scale: float = 0.1):
        u = lambda *shape: rng.uniform(-scale, scale, size=shape)  # noqa: E731
        return cls(u(n_hidden, n_in), u(n_hidden), u(n_hidden), u(1))

    def copy(self) -> "QNetwork":
        return QNetwork(self.W1.copy(), self.b1.copy(), self.W2.copy(), self.b2.copy())

    def __call__(self, X) -> np.ndarray:
        X = np.asarray(X, dtype=float)
        h = _sigmoid(X @ self.W1.T + self.b1)
        return _sigmoid(h @ self.W2 + self.b2[0])

    def loss_and_grad(self, X, y) -> tuple[float, dict]:
        """Mean of ``0.5 (out - y)^2`` and its gradient with respect to every weight."""
        X = np.asarray(X, dtype=float)
        y = np.asarray(y, dtype=float)
        h = _sigmoid(X @ self.W1.T + self.b1)
        out = _sigmoid(h @ self.W2 + self.b2[0])
        err = out - y
        n = len(y)
        d_out = err * out * (1 - out) / n
        d_h = np.outer(d_out, self.W2) * h * (1 - h)
        grads = {"W1": d_h.T @ X, "b1": d_h.sum(0), "W2": h.T @ d_out, "b2": np.array([d_out.sum()])}
        return 0.5 * float(np.mean(err**2)), grads

    def to_dict(self) -> dict:
        return {k: getattr(self, k).tolist() for k in ("W1", "b1", "W2", "b2")}

    @classmethod
    def from_dict(cls, d: dict) -> "QNetwork":
        return cls(*(np.asarray(d[k], dtype=float) for k in ("W1", "b1", "W2", "b2")))


@numba.njit(cache=True)
def _sgd_epoch(W1, b1, W2, b2, X, y, order, lr):
    n_hidden = W1.shape[0]
    n_in = W1.shape[1]
    h = np.empty(n_hidden)
    for idx in order:
        x = X[idx]
        z = b2[0]
        for j in range(n_hidden):
            a = b1[j]
            for i in range(n_in):
                a += W1[j, i] * x[i]
            h[j] = 1.0 / (1.0 + np.exp(-a))
            z += W2[j] * h[j]
        out = 1.0 / (1.0 + np.exp(-z))
        d_out = (out - y[idx]) * out * (1.0 - out)
        for j in range(n_hidden):
            d_h = d_out * W2[j] * h[j] * (1.0 - h[j])
            W2[j] -= lr * d_out * h[j]
            b1[j] -= lr * d_h
            for i in range(n_in):
                W1[j, i] -= lr * d_h * x[i]
        b2[0] -= lr * d_out


@dataclass(frozen=True)
class NfqConfig:
    iterations: int = 200
    gamma: float = gamma_from_q(0.25, 50)
    learning_rate: float = 0.1
    max_epochs: int = 300
    patience: int = 10
    validation_fraction: float = 0.1
    init_scale: float = 0.1

    def __post_init__(self):
        if self.iterations < 1:
            raise ValueError("iterations must be >= 1")
        if not (0.0 <= self.gamma < 1.0):
            raise ValueError("gamma must lie in [0, 1)")
        if self.max_epochs < 1 or self.patience < 1:
            raise ValueError("max_epochs and patience must be >= 1")
        if not (0.0 < self.validation_fraction < 1.0):
            raise ValueError("validation_fraction must lie in (0, 1)")


def fit_network(
    net: QNetwork, X, y, cfg: NfqConfig, rng: np.random.Generator, split=None
) -> tuple[QNetwork, float]:
    """Per-sample gradient descent with early stopping; returns the best weights and their validation MSE.

    Training stops once the validation error has not improved for
    ``cfg.patience`` consecutive epochs or after ``cfg.max_epochs``.
    """
    X = np.ascontiguousarray(X, dtype=float)
    y = np.ascontiguousarray(y, dtype=float)
    if split is None:
        split = train_validation_split(len(y), cfg.validation_fraction, rng)
    train, val = split
    net = net.copy()
    best = net.copy()
    best_err = float(np.mean((net(X[val]) - y[val]) ** 2))
    stale = 0
    for _ in range(cfg.max_epochs):
        _sgd_epoch(net.W1, net.b1, net.W2, net.b2, X, y, rng.permutation(train), cfg.learning_rate)
        err = float(np.mean((net(X[val]) - y[val]) ** 2))
        if not np.isfinite(err):
            raise FloatingPointError("Q-network training diverged")
        if err < best_err:
            best, best_err, stale = net.copy(), err, 0
        else:
            stale += 1
            if stale >= cfg.patience:
                break
    return best, best_err


def train_validation_split(n: int, validation_fraction: float, rng: np.random.Generator):
    if n < 2:
        raise ValueError("need at least two transitions to split")
    perm = rng.permutation(n)
    n_val = min(max(1, int(round(validation_fraction * n))), n - 1)
    return perm[n_val:], perm[:n_val]


@dataclass
class QFunction:
    """Raw-scale Q function: normalization, network and target scaling together."""

    net: QNetwork
    stats: ZScore
    scaling: QScaling
    iteration: int = 0
    validation_mse: float = float("nan")

    def __call__(self, obs, actions) -> np.ndarray:
        X = self.stats.apply(np.concatenate([np.asarray(obs, float), np.asarray(actions, float)], axis=-1))
        return self.scaling.unscale(self.net(X))

    def q_table(self, obs) -> np.ndarray:
        """Raw Q values ``(n, 27)`` of every discrete action."""
        obs = np.atleast_2d(np.asarray(obs, dtype=float))
        n = len(obs)
        rows = np.concatenate([np.repeat(obs, N_ACTIONS, axis=0), np.tile(ACTIONS, (n, 1))], axis=1)
        return self.scaling.unscale(self.net(self.stats.apply(rows))).reshape(n, N_ACTIONS)

    def to_dict(self) -> dict:
        return {
            "format": POLICY_FORMAT,
            "version": POLICY_VERSION,
            "network": self.net.to_dict(),
            "stats": self.stats.to_dict(),
            "scaling": {"lo": self.scaling.lo, "hi": self.scaling.hi},
            "iteration": self.iteration,
            "validation_mse": self.validation_mse,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "QFunction":
        if d.get("format") != POLICY_FORMAT:
            raise ValueError("not an NFQ policy file")
        if d.get("version") != POLICY_VERSION:
            raise ValueError(f"unsupported NFQ policy version {d.get('version')}")
        return cls(
            QNetwork.from_dict(d["network"]),
            ZScore.from_dict(d["stats"]),
            QScaling(**d["scaling"]),
            int(d["iteration"]),
            float(d["validation_mse"]),
        )


def greedy_action(Q, stats: Optional[ZScore], o) -> ActionDelta:
    """Action maximizing ``Q`` at observation ``o``; ties go to the lowest index.

    ``Q`` maps the ``(27, 9)`` matrix of (normalized) observation-action rows,
    in action order, to 27 values. ``stats=None`` passes rows unnormalized.
    """
    o = np.asarray(o.as_array() if hasattr(o, "as_array") else o, dtype=float).reshape(-1)
    rows = np.concatenate([np.tile(o, (N_ACTIONS, 1)), ACTIONS], axis=1)
    if stats is not None:
        rows = stats.apply(rows)
    values = np.asarray(Q(rows), dtype=float).reshape(N_ACTIONS)
    return ActionDelta(*ACTIONS[int(np.argmax(values))])


class NfqPolicy:
    """Greedy controller of a fitted Q function; acts on the current observation only."""

    def __init__(self, q: QFunction):
        self.q = q

    def act(self, obs) -> np.ndarray:
        """Greedy actions ``(n, 3)`` for observations ``(n, 6)``."""
        return ACTIONS[np.argmax(self.q.q_table(obs), axis=1)]

    def __call__(self, history, t: int = 0) -> np.ndarray:
        return self.act(np.asarray(history, dtype=float)[-1:])[0]

    def controller(self, state, obs) -> np.ndarray:
        return self.act(obs)

    def save(self, path) -> None:
        Path(path).write_text(json.dumps(self.q.to_dict()))

    @classmethod
    def load(cls, path) -> "NfqPolicy":
        return cls(QFunction.from_dict(json.loads(Path(path).read_text())))


def build_targets(batch: TransitionBatch, Q: Optional[QFunction], gamma: float) -> np.ndarray:
    """Bootstrapped raw targets ``r + gamma max_a' Q(o', a')``; no Q means Q = 0."""
    _, _, r, o2 = batch.tuples()
    if Q is None or gamma == 0.0:
        y = r.copy()
    else:
        y = r + gamma * Q.q_table(o2).max(axis=1)
    if not np.all(np.isfinite(y)):
        raise FloatingPointError("non-finite Q targets")
    return y


def nfq_iterate(
    batch: TransitionBatch,
    Q: Optional[QFunction],
    gamma: float,
    cfg: NfqConfig = NfqConfig(),
    seed=0,
    *,
    stats: Optional[ZScore] = None,
    split=None,
) -> QFunction:
    """One fitted-Q iteration: build targets under ``Q`` and regress a new network onto them.

    The new network starts from ``Q``'s weights (or fresh uniform weights).
    """
    rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)
    o, a, _, _ = batch.tuples()
    X_raw = np.concatenate([o, a], axis=1)
    if stats is None:
        stats = Q.stats if Q is not None else ZScore.fit(X_raw)
    y = build_targets(batch, Q, gamma)
    scaling = QScaling.fit(y)
    net0 = Q.net if Q is not None else QNetwork.init(rng, scale=cfg.init_scale)
    net, err = fit_network(net0, stats.apply(X_raw), scaling.scale(y), cfg, rng, split)
    return QFunction(net, stats, scaling, (Q.iteration if Q is not None else 0) + 1, err)


def train_nfq(
    batch: TransitionBatch,
    iterations: Optional[int] = None,
    gamma: Optional[float] = None,
    seed: int = 0,
    cfg: NfqConfig = NfqConfig(),
    callback: Optional[Callable] = None,
) -> list[NfqPolicy]:
    """Run fitted-Q iteration and return the greedy policy after every iteration."""
    iterations = cfg.iterations if iterations is None else iterations
    gamma = cfg.gamma if gamma is None else gamma
    if iterations < 1:
        raise ValueError("iterations must be >= 1")
    rng = np.random.default_rng(seed)
    o, a, _, _ = batch.tuples()
    stats = ZScore.fit(np.concatenate([o, a], axis=1))
    split = train_validation_split(len(batch), cfg.validation_fraction, rng)
    Q = None
    policies = []
    for k in range(iterations):
        Q = nfq_iterate(batch, Q, gamma, cfg, rng, stats=stats, split=split)
        policies.append(NfqPolicy(Q))
        log.debug("nfq iteration %d: validation mse %.3g", k + 1, Q.validation_mse)
        if callback is not None:
            callback(k, Q)
    return policies


class SelectionResult(NamedTuple):
    index: int
    policy: object
    value: float
    estimates: np.ndarray


def select_best_policy(policies: Sequence, m, eval_histories, horizon: int = 50) -> SelectionResult:
    """Pick the policy with the highest mean model-predicted reward; ties go to the earliest.

    Each policy drives the model in closed loop through its ``controller``
    method (or, failing that, is called directly with ``(state, obs)``).
    """
    if len(policies) == 0:
        raise ValueError("no policies to select from")
    estimates = np.array(
        [float(np.mean(closed_loop_rewards(m, getattr(p, "controller", p), eval_histories, horizon))) for p in policies]
    )
    i = int(np.argmax(estimates))
    return SelectionResult(i, policies[i], float(estimates[i]), estimates)

"""Recurrent control network: a policy trained by backpropagation through the frozen model.

The policy reads the concatenated hidden state of both predictors and emits
a steering change through a sine output layer. Training unrolls the model's
future branch for ``T`` steps with the policy in the loop, and minimizes the
negative discounted predicted return; gradients flow through the model (and
its steering clamp) into the policy weights only.
"""

from __future__ import annotations

import json
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional

import numba
import numpy as np

from .data import TransitionBatch
from .env import STEER_SCALE
from .model import SystemModel, closed_loop_rewards
from .psop import gamma_from_q

log = logging.getLogger(__name__)

POLICY_FORMAT = "batchrl.rcnn-policy"
POLICY_VERSION = 1
LAYER_NAMES = ("W1", "b1", "W2", "b2", "W3", "b3")


LADDER = (1, 2, 4, 6, 10, 15, 23, 34, 50, 72)


def snapshot_ladder(max_epoch: int) -> list[int]:
    """Snapshot epochs 1, 2, 4, 6, 10, 15, 23, 34, 50, 72, then growing by x1.44, up to ``max_epoch``."""
    out = list(LADDER)
    while out[-1] < max_epoch:
        out.append(int(round(out[-1] * 1.44)))
    return [e for e in out if e <= max_epoch]


@dataclass
class PolicyNetwork:
    """``n_in -> 12 -> 6 -> 3`` network, tanh hidden layers, sine outputs."""

    W1: np.ndarray
    b1: np.ndarray
    W2: np.ndarray
    b2: np.ndarray
    W3: np.ndarray
    b3: np.ndarray

    @classmethod
    def init(cls, rng: np.random.Generator, n_in: int = 60, hidden=(12, 6), n_out: int = 3) -> "PolicyNetwork":
        sizes = (n_in, *hidden, n_out)
        params = []
        for fan_in, fan_out in zip(sizes[:-1], sizes[1:]):
            lim = 1.0 / math.sqrt(fan_in)
            params += [rng.uniform(-lim, lim, (fan_out, fan_in)), np.zeros(fan_out)]
        return cls(*params)

    @classmethod
    def zeros(cls, n_in: int = 60, hidden=(12, 6), n_out: int = 3) -> "PolicyNetwork":
        sizes = (n_in, *hidden, n_out)
        params = []
        for fan_in, fan_out in zip(sizes[:-1], sizes[1:]):
            params += [np.zeros((fan_out, fan_in)), np.zeros(fan_out)]
        return cls(*params)

    @property
    def n_in(self) -> int:
        return self.W1.shape[1]

    def params(self) -> tuple:
        return tuple(getattr(self, k) for k in LAYER_NAMES)

    def copy(self) -> "PolicyNetwork":
        return PolicyNetwork(*(p.copy() for p in self.params()))

    def __call__(self, x) -> np.ndarray:
        x = np.asarray(x, dtype=float)
        h1 = np.tanh(x @ self.W1.T + self.b1)
        h2 = np.tanh(h1 @ self.W2.T + self.b2)
        return np.sin(h2 @ self.W3.T + self.b3)

    def to_dict(self) -> dict:
        return {k: getattr(self, k).tolist() for k in LAYER_NAMES}

    @classmethod
    def from_dict(cls, d: dict) -> "PolicyNetwork":
        return cls(*(np.asarray(d[k], dtype=float) for k in LAYER_NAMES))


def policy_forward(net: PolicyNetwork, model_hidden) -> np.ndarray:
    """Steering change in ``[-1, 1]^3`` for one hidden-state vector (or a batch of them)."""
    return net(model_hidden)


@numba.njit(cache=True)
def _relu(x):
    # NaN passes through, as with np.maximum, so the divergence guard sees it
    return x if (x > 0.0 or x != x) else 0.0


@numba.njit(cache=True)
def _rollout_grad(W1, b1, W2, b2, W3, b3, A, B, Wr, y0, d, s0, steer0, ctx, gamma, T, g):
    """Loss ``-sum_k gamma^k r_k`` of one closed-loop rollout; gradients are added into ``g``."""
    n = s0.shape[0]
    n1 = W1.shape[0]
    n2 = W2.shape[0]
    S = np.empty((T + 1, n))
    H1 = np.empty((T, n1))
    H2 = np.empty((T, n2))
    Z3 = np.empty((T, 3))
    PRE = np.empty((T, 3))
    Y = np.empty((T, 2))
    S[0] = s0
    steer = steer0.copy()
    loss = 0.0
    disc = 1.0
    for k in range(T):
        x = S[k]
        for j in range(n1):
            a = b1[j]
            for i in range(n):
                a += W1[j, i] * x[i]
            H1[k, j] = math.tanh(a)
        for j in range(n2):
            a = b2[j]
            for i in range(n1):
                a += W2[j, i] * H1[k, i]
            H2[k, j] = math.tanh(a)
        for j in range(3):
            a = b3[j]
            for i in range(n2):
                a += W3[j, i] * H2[k, i]
            Z3[k, j] = a
            PRE[k, j] = steer[j] + d[j] * math.sin(a)
            steer[j] = min(100.0, max(0.0, PRE[k, j]))
        for j in range(n):
            a = ctx[j]
            for i in range(3):
                a += steer[i] * A[i, j]
            for i in range(n):
                a += S[k, i] * B[i, j]
            S[k + 1, j] = math.tanh(a)
        for o in range(2):
            a = y0[o]
            for i in range(n):
                a += S[k + 1, i] * Wr[i, o]
            Y[k, o] = a
        r = -_relu(Y[k, 0]) - 3.0 * _relu(Y[k, 1])
        loss -= disc * r
        disc *= gamma

    gW1, gb1, gW2, gb2, gW3, gb3 = g
    gs = np.zeros(n)  # dL/dS[k+1]
    gsteer = np.zeros(3)  # dL/dsteer_{k+1}
    dpre = np.empty(n)
    gx = np.empty(n)
    gz3 = np.empty(3)
    gh2 = np.empty(n2)
    gh1 = np.empty(n1)
    for k in range(T - 1, -1, -1):
        disc = gamma**k
        dy0 = disc if Y[k, 0] > 0.0 else 0.0
        dy1 = 3.0 * disc if Y[k, 1] > 0.0 else 0.0
        for i in range(n):
            gs[i] += Wr[i, 0] * dy0 + Wr[i, 1] * dy1
            dpre[i] = gs[i] * (1.0 - S[k + 1, i] * S[k + 1, i])
        for i in range(3):
            a = gsteer[i]
            for j in range(n):
                a += A[i, j] * dpre[j]
            # clamp: gradient passes only strictly inside the box
            gsteer[i] = a if 0.0 < PRE[k, i] < 100.0 else 0.0
        for i in range(n):
            a = 0.0
            for j in range(n):
                a += B[i, j] * dpre[j]
            gx[i] = a
        for j in range(3):
            gz3[j] = gsteer[j] * d[j] * math.cos(Z3[k, j])
            gb3[j] += gz3[j]
            for i in range(n2):
                gW3[j, i] += gz3[j] * H2[k, i]
        for i in range(n2):
            a = 0.0
            for j in range(3):
                a += W3[j, i] * gz3[j]
            gh2[i] = a * (1.0 - H2[k, i] * H2[k, i])
            gb2[i] += gh2[i]
            for m in range(n1):
                gW2[i, m] += gh2[i] * H1[k, m]
        for i in range(n1):
            a = 0.0
            for j in range(n2):
                a += W2[j, i] * gh2[j]
            gh1[i] = a * (1.0 - H1[k, i] * H1[k, i])
            gb1[i] += gh1[i]
            for m in range(n):
                gW1[i, m] += gh1[i] * S[k, m]
        for m in range(n):
            a = 0.0
            for i in range(n1):
                a += W1[i, m] * gh1[i]
            gs[m] = gx[m] + a
    return loss


@dataclass(frozen=True)
class StartStates:
    """Encoded start points for closed-loop rollouts on the model."""

    hidden: np.ndarray
    steer: np.ndarray
    context: np.ndarray

    def __len__(self) -> int:
        return len(self.hidden)


def start_states(m: SystemModel, histories) -> StartStates:
    st = m.encode(histories)
    return StartStates(np.ascontiguousarray(st.hidden), np.ascontiguousarray(st.steer), np.ascontiguousarray(st.context))


def rollout_loss_and_grad(net: PolicyNetwork, m: SystemModel, start: StartStates, i: int, T: int, gamma: float):
    """Loss ``-sum_k gamma^k r_k`` from start ``i`` and its gradient per policy layer."""
    k = m.kernel
    grads = tuple(np.zeros_like(p) for p in net.params())
    loss = _rollout_grad(
        *(np.ascontiguousarray(p) for p in net.params()),
        np.ascontiguousarray(k.A), np.ascontiguousarray(k.B), np.ascontiguousarray(k.W), k.y0, STEER_SCALE,
        start.hidden[i], start.steer[i], start.context[i], float(gamma), int(T), grads,
    )
    return loss, dict(zip(LAYER_NAMES, grads))


def self_assess(policy, m: SystemModel, histories, horizon: int = 50) -> float:
    """Mean model-predicted reward per step of the policy run in closed loop on ``m``."""
    net = policy.net if isinstance(policy, RcnnPolicy) else policy
    rewards = closed_loop_rewards(m, lambda state, obs: net(state.hidden), histories, horizon)
    return float(np.mean(rewards))


@dataclass(frozen=True)
class RcnnTrainConfig:
    rollout: int = 50
    gamma: float = gamma_from_q(0.25, 50)
    lr_low: float = 1e-6
    lr_high: float = 1e-4
    learning_rate: Optional[float] = None  # fixed rate instead of the per-run draw
    epochs: int = 72
    n_runs: int = 1
    histories_per_epoch: int = 512
    assess_histories: int = 64
    assess_horizon: int = 50
    hidden: tuple = (12, 6)

    def __post_init__(self):
        if self.rollout < 1 or self.epochs < 1 or self.n_runs < 1:
            raise ValueError("rollout, epochs and n_runs must be >= 1")
        if not (0 < self.lr_low <= self.lr_high):
            raise ValueError("need 0 < lr_low <= lr_high")
        if self.learning_rate is not None and self.learning_rate <= 0:
            raise ValueError("learning_rate must be positive")
        if not (0 < self.gamma <= 1):
            raise ValueError("gamma must lie in (0, 1]")

    @property
    def snapshots(self) -> list[int]:
        ladder = snapshot_ladder(self.epochs)
        return ladder if ladder[-1] == self.epochs else ladder + [self.epochs]


@dataclass
class Snapshot:
    epoch: int
    net: PolicyNetwork
    assessed: float


@dataclass
class RcnnRun:
    learning_rate: float
    snapshots: list = field(default_factory=list)
    diverged: bool = False

    @property
    def best(self) -> Snapshot:
        return max(self.snapshots, key=lambda s: s.assessed)


def sample_histories(data: TransitionBatch, H: int, n: int, rng: np.random.Generator) -> np.ndarray:
    """``n`` random windows of ``H + 1`` consecutive observations."""
    L1 = data.observations.shape[1]
    if L1 < H + 1:
        raise ValueError("episodes are shorter than the model history window")
    e = rng.integers(0, data.n_episodes, size=n)
    t = rng.integers(H, L1, size=n)
    return np.stack([data.observations[ei, ti - H: ti + 1] for ei, ti in zip(e, t)])


def train_rcnn_run(
    m: SystemModel,
    train_start: StartStates,
    assess_hist: np.ndarray,
    cfg: RcnnTrainConfig,
    rng: np.random.Generator,
) -> RcnnRun:
    """One training run with online (batch size one) gradient descent and snapshot self-assessment."""
    lr = cfg.learning_rate if cfg.learning_rate is not None else float(
        np.exp(rng.uniform(np.log(cfg.lr_low), np.log(cfg.lr_high)))
    )
    net = PolicyNetwork.init(rng, m.kernel.A.shape[1], cfg.hidden)
    run = RcnnRun(lr)
    marks = set(cfg.snapshots)
    for epoch in range(1, cfg.epochs + 1):
        for i in rng.permutation(len(train_start)):
            loss, grads = rollout_loss_and_grad(net, m, train_start, i, cfg.rollout, cfg.gamma)
            if not np.isfinite(loss) or not all(np.all(np.isfinite(g)) for g in grads.values()):
                log.warning("rcnn run with lr=%.3g diverged in epoch %d", lr, epoch)
                run.diverged = True
                return run
            for name, g in grads.items():
                getattr(net, name)[...] -= lr * g
        if epoch in marks:
            value = self_assess(net, m, assess_hist, cfg.assess_horizon)
            run.snapshots.append(Snapshot(epoch, net.copy(), value))
            log.debug("rcnn lr=%.3g epoch %d: self-assessed %.4f", lr, epoch, value)
    return run


def train_rcnn_runs(m: SystemModel, data: TransitionBatch, cfg: RcnnTrainConfig = RcnnTrainConfig(), seed: int = 0):
    """Independent training runs, each with its own learning-rate draw."""
    rng = np.random.default_rng(seed)
    H = m.horizon
    start = start_states(m, sample_histories(data, H, cfg.histories_per_epoch, rng))
    assess = sample_histories(data, H, cfg.assess_histories, rng)
    runs = []
    for child in rng.spawn(cfg.n_runs):
        runs.append(train_rcnn_run(m, start, assess, cfg, child))
    return runs


def train_rcnn_policy(
    m: SystemModel, data: TransitionBatch, cfg: RcnnTrainConfig = RcnnTrainConfig(), seed: int = 0
) -> PolicyNetwork:
    """Best self-assessed snapshot over all runs."""
    snaps = [s for run in train_rcnn_runs(m, data, cfg, seed) for s in run.snapshots]
    if not snaps:
        raise FloatingPointError("every rcnn training run diverged")
    return max(snaps, key=lambda s: s.assessed).net


class RcnnPolicy:
    """Deployed controller: the model consumes the real history, the policy reads its hidden state."""

    def __init__(self, net: PolicyNetwork, model: SystemModel):
        if net.n_in != model.kernel.A.shape[1]:
            raise ValueError("policy input size does not match the model's hidden state")
        self.net = net
        self.model = model
        self.warmup = model.horizon

    def reset(self) -> None:
        pass

    def __call__(self, history, t: int = 0) -> np.ndarray:
        window = np.asarray(history, dtype=float)[-(self.model.horizon + 1):]
        return self.net(self.model.encode(window).hidden[0])

    def controller(self, state, obs) -> np.ndarray:
        return self.net(state.hidden)

    def to_dict(self) -> dict:
        return {
            "format": POLICY_FORMAT,
            "version": POLICY_VERSION,
            "model_fingerprint": self.model.fingerprint(),
            "network": self.net.to_dict(),
        }

    def save(self, path) -> None:
        Path(path).write_text(json.dumps(self.to_dict()))

    @classmethod
    def load(cls, path, model: SystemModel) -> "RcnnPolicy":
        d = json.loads(Path(path).read_text())
        if d.get("format") != POLICY_FORMAT:
            raise ValueError("not an rcnn policy file")
        if d.get("version") != POLICY_VERSION:
            raise ValueError(f"unsupported rcnn policy version {d.get('version')}")
        if d["model_fingerprint"] != model.fingerprint():
            raise ValueError("policy was trained against a different system model")
        return cls(PolicyNetwork.from_dict(d["network"]), model)

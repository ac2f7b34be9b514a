"""Learned system model: recurrent predictors for consumption and fatigue.

Each predictor is an Elman network (tanh hidden state, linear read-out).
A history window is consumed by the *past branch*, whose inputs are the
steerings, the set point and, in self-input mode, the predictor's own
target variable. Predictions are made by the *future branch*, which is
driven by steerings and set point only. Training unrolls ``horizon + 1``
past steps and ``future`` steps ahead and minimizes the squared error of the
normalized target over the future steps.
"""

from __future__ import annotations

import hashlib
import json
import logging
from dataclasses import dataclass, field
from functools import cached_property
from pathlib import Path
from typing import Optional

import numpy as np

from .data import TransitionBatch, ZScore
from .env import C, F, G, H, P, STEER_SCALE, V, ActionDelta, Observation, apply_action_array, compute_reward

log = logging.getLogger(__name__)

U_COLS = (V, G, H, P)
TARGET_COLS = {"consumption": C, "fatigue": F}
MODEL_FORMAT = "batchrl.system-model"
MODEL_VERSION = 1
ARCHITECTURE = "elman-tanh-linear"


@dataclass(frozen=True)
class HistoryWindow:
    """Chronological observations ``(o_{t-H}, ..., o_t)`` as a ``(H + 1, 6)`` array."""

    observations: np.ndarray

    def __post_init__(self):
        obs = np.asarray(self.observations, dtype=float)
        if obs.ndim != 2 or obs.shape[1] != 6 or len(obs) == 0:
            raise ValueError("history must be a nonempty (n, 6) array")
        steer = obs[:, :3]
        if np.any(steer < 0) or np.any(steer > 100) or np.any(obs[:, P] < 0) or np.any(obs[:, P] > 100):
            raise ValueError("history violates steering/set-point bounds")
        if np.any(obs[:, C] < 0) or np.any(obs[:, F] < 0):
            raise ValueError("history contains negative consumption or fatigue")
        object.__setattr__(self, "observations", obs)

    def __len__(self) -> int:
        return len(self.observations)

    @property
    def last(self) -> np.ndarray:
        return self.observations[-1]


@dataclass
class Predictor:
    target: str
    self_input: bool
    horizon: int
    params: dict
    input_stats: ZScore
    target_stats: ZScore
    validation_mae: float = float("nan")
    baseline_mae: float = float("nan")

    @property
    def target_col(self) -> int:
        return TARGET_COLS[self.target]

    @property
    def self_cols(self) -> tuple:
        return (self.target_col,) if self.self_input else ()

    @property
    def hidden_size(self) -> int:
        return self.params["B"].shape[0]

    # -- normalization helpers ---------------------------------------------
    def norm_u(self, x):
        """Normalize steering + set-point columns taken from ``x[..., (v, g, h, p)]``."""
        idx = list(U_COLS)
        return (x - self.input_stats.mean[idx]) / self.input_stats.std[idx]

    def norm_self(self, x):
        idx = list(self.self_cols)
        return (x - self.input_stats.mean[idx]) / self.input_stats.std[idx]

    # -- inference ------------------------------------------------------------
    def encode(self, window: np.ndarray) -> np.ndarray:
        """Hidden state after consuming the last ``horizon + 1`` observations of ``window``."""
        window = np.asarray(window, dtype=float)
        if window.ndim == 2:
            window = window[None]
        if window.shape[1] < self.horizon + 1:
            raise ValueError(
                f"history too short: {self.target} predictor needs {self.horizon + 1} observations, got {window.shape[1]}"
            )
        w = window[:, -(self.horizon + 1):]
        p = self.params
        pre_in = self.norm_u(w[..., list(U_COLS)]) @ p["A"].T + p["b"]
        if self.self_input:
            pre_in = pre_in + self.norm_self(w[..., list(self.self_cols)]) @ p["S"].T
        s = np.zeros((w.shape[0], self.hidden_size))
        BT = p["B"].T
        for k in range(w.shape[1]):
            s = np.tanh(pre_in[:, k] + s @ BT)
        return s

    def advance(self, s: np.ndarray, steer_p: np.ndarray) -> np.ndarray:
        """One future-branch step driven by raw ``(v, g, h, p)`` rows."""
        p = self.params
        return np.tanh(self.norm_u(steer_p) @ p["A"].T + p["b"] + s @ p["B"].T)

    def readout(self, s: np.ndarray) -> np.ndarray:
        z = s @ self.params["w"] + self.params["w0"][0]
        return z * self.target_stats.std[0] + self.target_stats.mean[0]

    # -- persistence ----------------------------------------------------------
    def to_dict(self) -> dict:
        return {
            "target": self.target,
            "self_input": self.self_input,
            "horizon": self.horizon,
            "hidden": self.hidden_size,
            "input_columns": ["v", "g", "h", "p"],
            "self_columns": ["c"] if self.self_cols == (C,) else ["f"] if self.self_cols == (F,) else [],
            "params": {k: v.tolist() for k, v in self.params.items()},
            "input_stats": self.input_stats.to_dict(),
            "target_stats": self.target_stats.to_dict(),
            "validation_mae": self.validation_mae,
            "baseline_mae": self.baseline_mae,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "Predictor":
        params = {k: np.asarray(v, dtype=float) for k, v in d["params"].items()}
        if params["S"].ndim == 1:
            params["S"] = params["S"].reshape(len(params["b"]), -1)
        return cls(
            target=d["target"],
            self_input=bool(d["self_input"]),
            horizon=int(d["horizon"]),
            params=params,
            input_stats=ZScore.from_dict(d["input_stats"]),
            target_stats=ZScore.from_dict(d["target_stats"]),
            validation_mae=float(d.get("validation_mae", "nan")),
            baseline_mae=float(d.get("baseline_mae", "nan")),
        )


def init_params(hidden: int, n_self: int, rng: np.random.Generator) -> dict:
    def u(shape, fan_in):
        lim = 1.0 / np.sqrt(fan_in)
        return rng.uniform(-lim, lim, size=shape)

    return {
        "A": u((hidden, len(U_COLS)), len(U_COLS) + n_self),
        "S": u((hidden, n_self), len(U_COLS) + n_self),
        "B": u((hidden, hidden), hidden),
        "b": np.zeros(hidden),
        "w": u((hidden,), hidden),
        "w0": np.zeros(1),
    }


# -- system model ----------------------------------------------------------------


@dataclass
class ModelState:
    """Rollout state for a batch of ``n`` histories.

    ``hidden`` concatenates the consumption and fatigue hidden states;
    ``context`` is the per-history constant part of the pre-activation
    (bias plus set-point term), cached so rollouts do not recompute it.
    """

    hidden: np.ndarray
    steer: np.ndarray
    p: np.ndarray
    context: np.ndarray
    n_c: int

    @property
    def s_c(self) -> np.ndarray:
        return self.hidden[:, : self.n_c]

    @property
    def s_f(self) -> np.ndarray:
        return self.hidden[:, self.n_c:]

    def __len__(self) -> int:
        return len(self.steer)

    def repeat(self, n: int) -> "ModelState":
        if len(self) != 1:
            raise ValueError("only single-history states can be repeated")
        return ModelState(*(np.repeat(x, n, axis=0) for x in (self.hidden, self.steer, self.p, self.context)), self.n_c)

    def take(self, idx) -> "ModelState":
        return ModelState(self.hidden[idx], self.steer[idx], self.p[idx], self.context[idx], self.n_c)


@dataclass(frozen=True)
class RolloutKernel:
    """Both predictors' future branches fused into one block-diagonal recurrence.

    With raw steerings ``x`` and set point ``p`` a step is
    ``s' = tanh(x @ A + p * a_p + bias + s @ B)`` and the raw predictions
    are ``(c, f) = s' @ W + y0``; input and target normalization are folded
    into the weights.
    """

    A: np.ndarray  # (3, n)
    a_p: np.ndarray  # (n,)
    bias: np.ndarray  # (n,)
    B: np.ndarray  # (n, n), already transposed for right multiplication
    W: np.ndarray  # (n, 2)
    y0: np.ndarray  # (2,)
    n_c: int

    @classmethod
    def from_predictors(cls, m_c: Predictor, m_f: Predictor) -> "RolloutKernel":
        parts = []
        for pred in (m_c, m_f):
            idx = list(U_COLS)
            mu, sd = pred.input_stats.mean[idx], pred.input_stats.std[idx]
            A = pred.params["A"] / sd
            parts.append((A[:, :3].T, A[:, 3], pred.params["b"] - A @ mu, pred.params["B"].T,
                          pred.params["w"] * pred.target_stats.std[0],
                          pred.params["w0"][0] * pred.target_stats.std[0] + pred.target_stats.mean[0]))
        (Ac, apc, bc, Bc, wc, yc), (Af, apf, bf, Bf, wf, yf) = parts
        hc, hf = len(bc), len(bf)
        B = np.zeros((hc + hf, hc + hf))
        B[:hc, :hc] = Bc
        B[hc:, hc:] = Bf
        W = np.zeros((hc + hf, 2))
        W[:hc, 0] = wc
        W[hc:, 1] = wf
        return cls(np.hstack([Ac, Af]), np.concatenate([apc, apf]), np.concatenate([bc, bf]), B, W,
                   np.array([yc, yf]), hc)


@dataclass
class SystemModel:
    m_c: Predictor
    m_f: Predictor
    meta: dict = field(default_factory=dict)

    @property
    def horizon(self) -> int:
        return max(self.m_c.horizon, self.m_f.horizon)

    @cached_property
    def kernel(self) -> RolloutKernel:
        return RolloutKernel.from_predictors(self.m_c, self.m_f)

    def encode(self, history) -> ModelState:
        """Encode one ``(L, 6)`` window or a batch ``(n, L, 6)`` of windows."""
        h = np.asarray(history.observations if isinstance(history, HistoryWindow) else history, dtype=float)
        if h.ndim == 2:
            h = h[None]
        if h.shape[1] < self.horizon + 1:
            raise ValueError(f"history too short: need {self.horizon + 1} observations, got {h.shape[1]}")
        last = h[:, -1]
        k = self.kernel
        hidden = np.concatenate([self.m_c.encode(h), self.m_f.encode(h)], axis=1)
        p = last[:, P].copy()
        return ModelState(hidden, last[:, :3].copy(), p, p[:, None] * k.a_p + k.bias, k.n_c)

    def step(self, state: ModelState, actions) -> tuple[ModelState, np.ndarray, np.ndarray]:
        """Advance every history by one action; returns ``(state', observations, rewards)``."""
        a = np.asarray(actions, dtype=float).reshape(len(state), 3)
        k = self.kernel
        steer = apply_action_array(state.steer, a)
        hidden = np.tanh(steer @ k.A + state.context + state.hidden @ k.B)
        y = np.maximum(0.0, hidden @ k.W + k.y0)
        obs = np.column_stack([steer, state.p, y])
        new = ModelState(hidden, steer, state.p, state.context, state.n_c)
        return new, obs, compute_reward(y[:, 0], y[:, 1])

    def rollout_rewards(self, state: ModelState, actions) -> np.ndarray:
        """Per-step predicted rewards ``(n, T)`` of open-loop sequences ``(n, T, 3)``."""
        actions = np.asarray(actions, dtype=float)
        n, T, _ = actions.shape
        if len(state) == 1 and n > 1:
            state = state.repeat(n)
        k = self.kernel
        steer = state.steer.copy()
        s = state.hidden.copy()
        pre = np.empty_like(s)
        y = np.empty((n, 2))
        out = np.empty((T, n))
        weights = np.array([-1.0, -3.0])
        for t in range(T):
            steer += STEER_SCALE * actions[:, t]
            np.clip(steer, 0.0, 100.0, out=steer)
            np.dot(steer, k.A, out=pre)
            pre += state.context
            pre += s @ k.B
            np.tanh(pre, out=s)
            np.dot(s, k.W, out=y)
            y += k.y0
            np.maximum(y, 0.0, out=y)
            np.dot(y, weights, out=out[t])
        return out.T

    def rollout_returns(self, state: ModelState, actions, gamma: float) -> np.ndarray:
        rewards = self.rollout_rewards(state, actions)
        return rewards @ (gamma ** np.arange(rewards.shape[1]))

    # -- persistence ----------------------------------------------------------
    def to_dict(self) -> dict:
        return {
            "format": MODEL_FORMAT,
            "version": MODEL_VERSION,
            "architecture": ARCHITECTURE,
            "predictors": {"consumption": self.m_c.to_dict(), "fatigue": self.m_f.to_dict()},
            "meta": self.meta,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "SystemModel":
        if d.get("format") != MODEL_FORMAT or d.get("version") != MODEL_VERSION:
            raise ValueError("not a supported system-model file")
        if d.get("architecture") != ARCHITECTURE:
            raise ValueError(f"unknown architecture {d.get('architecture')!r}")
        preds = d["predictors"]
        return cls(Predictor.from_dict(preds["consumption"]), Predictor.from_dict(preds["fatigue"]), d.get("meta", {}))

    def save(self, path) -> None:
        Path(path).parent.mkdir(parents=True, exist_ok=True)
        Path(path).write_text(json.dumps(self.to_dict()))

    @classmethod
    def load(cls, path) -> "SystemModel":
        return cls.from_dict(json.loads(Path(path).read_text()))

    def fingerprint(self) -> str:
        blob = json.dumps(self.to_dict(), sort_keys=True).encode()
        return hashlib.sha256(blob).hexdigest()


def predict_step(m: SystemModel, hist: HistoryWindow, a: ActionDelta) -> tuple[Observation, float]:
    a = ActionDelta.coerce(a)
    _, obs, r = m.step(m.encode(hist), a.as_array()[None])
    return Observation.from_array(obs[0]), float(r[0])


def rollout_return(m: SystemModel, hist: HistoryWindow, x, gamma: float) -> float:
    """Discounted predicted return of the flattened action sequence ``x``."""
    x = np.asarray(x, dtype=float).reshape(-1)
    if x.size == 0 or x.size % 3:
        raise ValueError("action sequence length must be a positive multiple of 3")
    if not (0 < gamma <= 1):
        raise ValueError("gamma must lie in (0, 1]")
    return float(m.rollout_returns(m.encode(hist), x.reshape(1, -1, 3), gamma)[0])


def closed_loop_rewards(m, controller, histories, horizon: int) -> np.ndarray:
    """Predicted rewards ``(n, horizon)`` of a feedback controller run on the model.

    ``controller(state, obs)`` maps the model state and the current (real or
    predicted) observations ``(n, 6)`` to actions ``(n, 3)``.
    """
    if horizon < 1:
        raise ValueError("horizon must be >= 1")
    hist = np.asarray(histories, dtype=float)
    if hist.ndim == 2:
        hist = hist[None]
    if len(hist) == 0:
        raise ValueError("no evaluation histories")
    state = m.encode(hist)
    obs = hist[:, -1]
    out = np.empty((len(hist), horizon))
    for k in range(horizon):
        a = np.asarray(controller(state, obs), dtype=float).reshape(len(hist), 3)
        state, obs, out[:, k] = m.step(state, a)
    return out


def rollout_error_profile(
    m, episodes: TransitionBatch, steps: int, starts: int = 1, seed: int = 0
) -> tuple[np.ndarray, np.ndarray]:
    """Mean absolute consumption and fatigue errors at rollout steps ``1..steps``.

    From ``starts`` random positions per episode the model is rolled out with
    the recorded actions; predicted observations are compared with the
    recorded future.
    """
    if episodes.n_episodes == 0:
        raise ValueError("no episodes to evaluate")
    H = m.horizon
    L = episodes.episode_length
    if steps > L - H:
        raise ValueError(f"steps={steps} exceeds episode length minus horizon ({L - H})")
    rng = np.random.default_rng(seed)
    hist, acts, truth = [], [], []
    for e in range(episodes.n_episodes):
        for t in rng.integers(H, L - steps + 1, size=starts):
            hist.append(episodes.observations[e, t - H: t + 1])
            acts.append(episodes.actions[e, t: t + steps])
            truth.append(episodes.observations[e, t + 1: t + steps + 1])
    hist, acts, truth = np.array(hist), np.array(acts), np.array(truth)
    state = m.encode(hist)
    err_c = np.empty(steps)
    err_f = np.empty(steps)
    for k in range(steps):
        state, obs, _ = m.step(state, acts[:, k])
        err_c[k] = np.mean(np.abs(obs[:, C] - truth[:, k, C]))
        err_f[k] = np.mean(np.abs(obs[:, F] - truth[:, k, F]))
    return err_c, err_f


# -- training --------------------------------------------------------------------


@dataclass(frozen=True)
class ModelTrainConfig:
    train_fraction: float = 0.7
    restarts: int = 8
    optimizer: str = "irprop-"
    max_epochs: int = 2000
    patience: int = 50
    future: int = 50
    hidden: int = 30
    horizon_c: int = 30
    horizon_f: int = 10
    self_input_c: bool = False
    self_input_f: bool = True
    max_train_windows: int = 2000
    max_val_windows: int = 1000
    eta_plus: float = 1.2
    eta_minus: float = 0.5
    delta0: float = 0.01
    delta_min: float = 1e-6
    delta_max: float = 1.0

    def __post_init__(self):
        if not (0 < self.train_fraction < 1):
            raise ValueError("train_fraction must lie in (0, 1)")
        if self.restarts < 1:
            raise ValueError("restarts must be >= 1")
        if self.optimizer != "irprop-":
            raise ValueError(f"unsupported optimizer {self.optimizer!r}")


@dataclass
class Windows:
    """Time-major training windows for one predictor."""

    U: np.ndarray  # (K, n, 4) normalized steering + set point inputs
    S: np.ndarray  # (n_past, n, k) normalized self inputs
    Y: np.ndarray  # (future, n) normalized targets
    n_past: int


def split_episodes(batch: TransitionBatch, train_fraction: float, rng: np.random.Generator):
    """Whole-episode train/validation split, stratified by set point."""
    if batch.n_episodes < 2:
        raise ValueError("need at least two episodes for a train/validation split")
    train, val = [], []
    sp = batch.set_points
    for p in np.unique(sp):
        idx = rng.permutation(np.flatnonzero(sp == p))
        k = int(round(train_fraction * len(idx)))
        if len(idx) >= 2:
            k = min(max(k, 1), len(idx) - 1)
        else:
            k = len(idx)
        train.extend(idx[:k])
        val.extend(idx[k:])
    if not val:
        # every set point has a single episode: fall back to an unstratified split
        idx = rng.permutation(batch.n_episodes)
        k = min(max(int(round(train_fraction * len(idx))), 1), len(idx) - 1)
        train, val = list(idx[:k]), list(idx[k:])
    return np.sort(train), np.sort(val)


def make_windows(pred: Predictor, batch: TransitionBatch, future: int, limit: Optional[int], rng) -> Windows:
    H = pred.horizon
    K = H + 1 + future
    L1 = batch.observations.shape[1]
    if L1 < K:
        raise ValueError(f"episodes too short: need {K} consecutive observations, have {L1}")
    starts = [(e, i) for e in range(batch.n_episodes) for i in range(L1 - K + 1)]
    if limit is not None and len(starts) > limit:
        pick = rng.choice(len(starts), size=limit, replace=False)
        starts = [starts[j] for j in np.sort(pick)]
    seg = np.stack([batch.observations[e, i: i + K] for e, i in starts], axis=1)  # (K, n, 6)
    U = pred.norm_u(seg[..., list(U_COLS)])
    S = pred.norm_self(seg[: H + 1][..., list(pred.self_cols)]) if pred.self_input else np.zeros((H + 1, len(starts), 0))
    Y = pred.target_stats.apply(seg[H + 1:, :, pred.target_col])
    return Windows(U, S, Y, H + 1)


def forward(params: dict, win: Windows) -> tuple[np.ndarray, np.ndarray]:
    """Hidden states ``(K + 1, n, h)`` (index 0 is the zero state) and normalized predictions ``(future, n)``."""
    K, n, _ = win.U.shape
    hdim = params["B"].shape[0]
    pre_in = win.U @ params["A"].T + params["b"]
    if win.S.shape[-1]:
        pre_in[: win.n_past] += win.S @ params["S"].T
    states = np.empty((K + 1, n, hdim))
    states[0] = 0.0
    BT = params["B"].T
    for k in range(K):
        states[k + 1] = np.tanh(pre_in[k] + states[k] @ BT)
    yhat = states[win.n_past + 1:] @ params["w"] + params["w0"][0]
    return states, yhat


def loss_and_grad(params: dict, win: Windows) -> tuple[float, dict]:
    """Mean squared error over future steps and its exact gradient (BPTT)."""
    states, yhat = forward(params, win)
    K, n, _ = win.U.shape
    Fut = win.Y.shape[0]
    resid = yhat - win.Y
    loss = float(np.mean(resid**2))
    dy = 2.0 * resid / resid.size  # (Fut, n)

    B, w = params["B"], params["w"]
    dpre = np.empty_like(states[1:])
    carry = np.zeros_like(states[0])
    for k in range(K - 1, -1, -1):
        ds = carry
        j = k - win.n_past
        if j >= 0:
            ds = ds + dy[j][:, None] * w
        dpre[k] = ds * (1.0 - states[k + 1] ** 2)
        carry = dpre[k] @ B

    hdim = B.shape[0]
    flat = dpre.reshape(-1, hdim)
    grads = {
        "A": flat.T @ win.U.reshape(-1, win.U.shape[-1]),
        "S": np.einsum("knh,kni->hi", dpre[: win.n_past], win.S),
        "B": flat.T @ states[:-1].reshape(-1, hdim),
        "b": flat.sum(axis=0),
        "w": np.einsum("kn,knh->h", dy, states[win.n_past + 1:]),
        "w0": np.array([dy.sum()]),
    }
    return loss, grads


class IRpropMinus:
    """iRPROP-: sign-based steps with per-weight adaptive sizes, no backtracking."""

    def __init__(self, params: dict, eta_plus=1.2, eta_minus=0.5, delta0=0.01, delta_min=1e-6, delta_max=1.0):
        self.eta_plus, self.eta_minus = eta_plus, eta_minus
        self.delta_min, self.delta_max = delta_min, delta_max
        self.delta = {k: np.full_like(v, delta0) for k, v in params.items()}
        self.prev = {k: np.zeros_like(v) for k, v in params.items()}

    def step(self, params: dict, grads: dict) -> None:
        for k, g in grads.items():
            g = g.copy()
            sign = self.prev[k] * g
            d = self.delta[k]
            d[sign > 0] = np.minimum(d[sign > 0] * self.eta_plus, self.delta_max)
            d[sign < 0] = np.maximum(d[sign < 0] * self.eta_minus, self.delta_min)
            g[sign < 0] = 0.0
            params[k] -= np.sign(g) * d
            self.prev[k] = g


def _val_mae(params: dict, win: Windows, target_std: float) -> float:
    _, yhat = forward(params, win)
    return float(np.mean(np.abs(yhat - win.Y)) * target_std)


def train_predictor(
    data: TransitionBatch,
    target: str,
    cfg: ModelTrainConfig = ModelTrainConfig(),
    seed: int = 0,
    split: Optional[tuple] = None,
) -> Predictor:
    """Train ``cfg.restarts`` predictors and keep the one with the lowest validation MAE.

    Raises ``RuntimeError`` when no restart beats the constant-mean baseline.
    """
    if target not in TARGET_COLS:
        raise ValueError(f"unknown target {target!r}")
    rng = np.random.default_rng(seed)
    if split is None:
        split = split_episodes(data, cfg.train_fraction, rng)
    train, val = data.subset(split[0]), data.subset(split[1])
    self_input = cfg.self_input_c if target == "consumption" else cfg.self_input_f
    horizon = cfg.horizon_c if target == "consumption" else cfg.horizon_f
    col = TARGET_COLS[target]

    in_stats = ZScore.fit(train.observations.reshape(-1, 6))
    out_stats = ZScore.fit(train.observations[..., col].reshape(-1, 1))
    template = Predictor(target, self_input, horizon, init_params(cfg.hidden, int(self_input), rng), in_stats, out_stats)
    tr = make_windows(template, train, cfg.future, cfg.max_train_windows, rng)
    va = make_windows(template, val, cfg.future, cfg.max_val_windows, rng)
    std = float(out_stats.std[0])

    baseline = float(np.mean(np.abs(out_stats.invert(va.Y) - out_stats.mean[0])))
    best_params, best_mae = None, np.inf
    for restart, child in enumerate(np.random.SeedSequence(seed).spawn(cfg.restarts)):
        params = init_params(cfg.hidden, int(self_input), np.random.default_rng(child))
        opt = IRpropMinus(params, cfg.eta_plus, cfg.eta_minus, cfg.delta0, cfg.delta_min, cfg.delta_max)
        run_best, run_params, stale = _val_mae(params, va, std), {k: v.copy() for k, v in params.items()}, 0
        for epoch in range(cfg.max_epochs):
            _, grads = loss_and_grad(params, tr)
            opt.step(params, grads)
            mae = _val_mae(params, va, std)
            if not np.isfinite(mae):
                break
            if mae < run_best:
                run_best, run_params, stale = mae, {k: v.copy() for k, v in params.items()}, 0
            else:
                stale += 1
                if stale >= cfg.patience:
                    break
        log.info("%s restart %d: validation MAE %.5g after %d epochs", target, restart, run_best, epoch + 1)
        if run_best < best_mae:
            best_mae, best_params = run_best, run_params

    # a (nearly) constant target leaves nothing to beat; equal to the baseline within atol passes
    atol = 1e-6 * max(1.0, abs(float(out_stats.mean[0])))
    if best_params is None or not (best_mae < baseline or best_mae <= max(atol, baseline + atol)):
        raise RuntimeError(
            f"{target} predictor did not beat the mean baseline (best MAE {best_mae:.4g} vs baseline {baseline:.4g})"
        )
    return Predictor(target, self_input, horizon, best_params, in_stats, out_stats, best_mae, baseline)


def train_system_model(data: TransitionBatch, cfg: ModelTrainConfig = ModelTrainConfig(), seed: int = 0) -> SystemModel:
    """Both predictors on one shared episode split."""
    split = split_episodes(data, cfg.train_fraction, np.random.default_rng(seed))
    seeds = np.random.SeedSequence(seed).generate_state(2)
    m_c = train_predictor(data, "consumption", cfg, int(seeds[0]), split)
    m_f = train_predictor(data, "fatigue", cfg, int(seeds[1]), split)
    meta = {
        "seed": seed,
        "train_episodes": [int(i) for i in split[0]],
        "validation_episodes": [int(i) for i in split[1]],
        "validation_mae": {"consumption": m_c.validation_mae, "fatigue": m_f.validation_mae},
    }
    return SystemModel(m_c, m_f, meta)

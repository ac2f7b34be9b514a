"""Hand-built models with known optima for planner and policy tests."""

from __future__ import annotations

import math

import numpy as np

from batchrl.data import ZScore
from batchrl.model import Predictor, SystemModel

IDENTITY = ZScore(np.zeros(6), np.ones(6))
UNIT = ZScore(np.zeros(1), np.ones(1))


def _predictor(target, A, B, b, w, w0, horizon, self_input=False):
    h = len(b)
    params = {
        "A": np.asarray(A, float),
        "S": np.zeros((h, int(self_input))),
        "B": np.asarray(B, float),
        "b": np.asarray(b, float),
        "w": np.asarray(w, float),
        "w0": np.array([float(w0)]),
    }
    return Predictor(target, self_input, horizon, params, IDENTITY, UNIT)


def quadratic_penalty_model(eps=1e-4, beta=1.0, gamma=1.0, K=1.0, delta=0.05, horizon=3) -> SystemModel:
    """Recurrent model whose reward is an even function of the action, maximal at ``a = 0``.

    For each steering ``x_i`` one unit memorizes ``tanh(eps x_i) ~ eps x_i``;
    two more units compute ``tanh(+-beta (x_i' - x_i) / d_i + gamma)``, whose sum
    is even in the action and peaks at zero change. Consumption is
    ``delta + K sum(6 tanh(gamma) - those sums)`` and fatigue is zero, so the
    predicted reward is ``-delta - K kappa |a|^2 + O(|a|^4)`` with
    ``kappa = 2 beta^2 tanh(gamma) / cosh(gamma)^2``.
    """
    d = (1.0, 10.0, 5.75)
    n = 9
    A = np.zeros((n, 4))
    B = np.zeros((n, n))
    b = np.zeros(n)
    w = np.zeros(n)
    for i in range(3):
        m, up, dn = 3 * i, 3 * i + 1, 3 * i + 2
        A[m, i] = eps
        for unit, sign in ((up, 1.0), (dn, -1.0)):
            A[unit, i] = sign * beta / (d[i] * eps) * eps
            B[unit, m] = -sign * beta / (d[i] * eps)
            b[unit] = gamma
            w[unit] = -K
    w0 = delta + K * 6.0 * math.tanh(gamma)
    m_c = _predictor("consumption", A, B, b, w, w0, horizon)
    m_f = _predictor("fatigue", np.zeros((1, 4)), np.zeros((1, 1)), np.zeros(1), np.zeros(1), 0.0, 1, self_input=True)
    return SystemModel(m_c, m_f)


def linear_velocity_model(slope=0.01, offset=1.0, horizon=3) -> SystemModel:
    """Consumption ``offset + tanh(slope v)``: the reward is maximized by lowering velocity."""
    A = np.zeros((1, 4))
    A[0, 0] = slope
    m_c = _predictor("consumption", A, np.zeros((1, 1)), np.zeros(1), np.ones(1), offset, horizon)
    m_f = _predictor("fatigue", np.zeros((1, 4)), np.zeros((1, 1)), np.zeros(1), np.zeros(1), 0.0, 1, self_input=True)
    return SystemModel(m_c, m_f)


class ActionRewardState:
    def __init__(self, n):
        self.n = n

    def __len__(self):
        return self.n

    def repeat(self, n):
        return ActionRewardState(n)


class ActionRewardModel:
    """Model stub: per-step reward is ``reward_fn(actions)``; nothing else is simulated."""

    horizon = 0

    def __init__(self, reward_fn):
        self.reward_fn = reward_fn

    def encode(self, history):
        h = np.asarray(history, dtype=float)
        return ActionRewardState(1 if h.ndim == 2 else len(h))

    def step(self, state, actions):
        a = np.asarray(actions, dtype=float).reshape(len(state), 3)
        obs = np.zeros((len(state), 6))
        return state, obs, self.reward_fn(a)

    def rollout_rewards(self, state, actions):
        actions = np.asarray(actions, dtype=float)
        return np.stack([self.reward_fn(actions[:, k]) for k in range(actions.shape[1])], axis=1)

    def rollout_returns(self, state, actions, gamma):
        r = self.rollout_rewards(state, actions)
        return r @ (gamma ** np.arange(r.shape[1]))


class ConstantPolicy:
    def __init__(self, action):
        self.action = np.asarray(action, dtype=float)

    def controller(self, state, obs):
        return np.tile(self.action, (len(obs), 1))

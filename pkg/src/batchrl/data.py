"""Offline transition data, CSV trajectory files and z-score statistics."""

from __future__ import annotations

import csv
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .env import OBS_FIELDS, P

CSV_HEADER = ("episode", "t", "set_point", "v", "g", "h", "c", "f", "reward", "dv", "dg", "dh")
STD_FLOOR = 1e-8


@dataclass(frozen=True)
class ZScore:
    """Per-column mean and standard deviation with a floor on the deviation."""

    mean: np.ndarray
    std: np.ndarray

    @classmethod
    def fit(cls, data) -> "ZScore":
        data = np.asarray(data, dtype=float)
        if data.size == 0:
            raise ValueError("cannot fit normalization statistics on empty data")
        data = data.reshape(-1, data.shape[-1]) if data.ndim > 1 else data.reshape(-1, 1)
        mean = data.mean(axis=0)
        # summation rounding would otherwise leave constant columns slightly off zero
        const = np.all(data == data[0], axis=0)
        mean[const] = data[0, const]
        return cls(mean, np.maximum(data.std(axis=0), STD_FLOOR))

    def apply(self, x):
        return (np.asarray(x, dtype=float) - self.mean) / self.std

    def invert(self, z):
        return np.asarray(z, dtype=float) * self.std + self.mean

    def to_dict(self) -> dict:
        return {"mean": self.mean.tolist(), "std": self.std.tolist()}

    @classmethod
    def from_dict(cls, d: dict) -> "ZScore":
        return cls(np.asarray(d["mean"], dtype=float), np.asarray(d["std"], dtype=float))


def zscore_fit(data) -> ZScore:
    return ZScore.fit(data)


def zscore_apply(stats: ZScore, x):
    return stats.apply(x)


@dataclass
class TransitionBatch:
    """Equal-length episodes of ``(o_t, a_t, r_t, o_{t+1})`` transitions.

    ``observations`` is ``(episodes, L + 1, 6)`` in :data:`OBS_FIELDS` order,
    ``actions`` is ``(episodes, L, 3)`` and ``rewards`` is ``(episodes, L)``.
    """

    observations: np.ndarray
    actions: np.ndarray
    rewards: np.ndarray

    def __post_init__(self):
        self.observations = np.asarray(self.observations, dtype=float)
        self.actions = np.asarray(self.actions, dtype=float)
        self.rewards = np.asarray(self.rewards, dtype=float)
        e, l1, k = self.observations.shape
        if k != len(OBS_FIELDS):
            raise ValueError("observations must have 6 columns")
        if self.actions.shape != (e, l1 - 1, 3) or self.rewards.shape != (e, l1 - 1):
            raise ValueError("actions/rewards shapes do not match observations")

    def __len__(self) -> int:
        return self.rewards.size

    @property
    def n_episodes(self) -> int:
        return self.observations.shape[0]

    @property
    def episode_length(self) -> int:
        return self.rewards.shape[1]

    @property
    def set_points(self) -> np.ndarray:
        return self.observations[:, 0, P]

    def subset(self, episodes) -> "TransitionBatch":
        idx = np.asarray(episodes, dtype=int)
        return TransitionBatch(self.observations[idx], self.actions[idx], self.rewards[idx])

    def tuples(self) -> tuple[np.ndarray, np.ndarray, np.ndarray, np.ndarray]:
        """Flat ``(o, a, r, o_next)`` arrays, episode-major."""
        o = self.observations[:, :-1].reshape(-1, 6)
        o2 = self.observations[:, 1:].reshape(-1, 6)
        return o, self.actions.reshape(-1, 3), self.rewards.reshape(-1), o2

    def to_csv(self, path) -> None:
        write_episodes_csv(path, self.observations, self.actions, self.rewards)

    @classmethod
    def from_csv(cls, path) -> "TransitionBatch":
        return cls(*read_episodes_csv(path))


def _fmt(x: float) -> str:
    return repr(float(x))


def write_episodes_csv(path, observations, actions, rewards, episode_ids=None) -> None:
    """Write episodes in the trajectory layout.

    Row ``t`` holds the observation at ``t`` together with the action taken
    there and the reward it produced; the closing observation of each episode
    has empty action and reward fields.
    """
    observations = np.asarray(observations, dtype=float)
    actions = np.asarray(actions, dtype=float)
    rewards = np.asarray(rewards, dtype=float)
    if observations.ndim == 2:
        observations, actions, rewards = observations[None], actions[None], rewards[None]
    if episode_ids is None:
        episode_ids = range(len(observations))
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with path.open("w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(CSV_HEADER)
        for ep, obs, act, rew in zip(episode_ids, observations, actions, rewards):
            L = len(rew)
            for t in range(L + 1):
                v, g, h, p, c, f = obs[t]
                row = [ep, t, _fmt(p), _fmt(v), _fmt(g), _fmt(h), _fmt(c), _fmt(f)]
                if t < L:
                    row += [_fmt(rew[t]), *(_fmt(x) for x in act[t])]
                else:
                    row += ["", "", "", ""]
                w.writerow(row)


def read_episodes_csv(path) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    episodes: dict[str, list[list[str]]] = {}
    with Path(path).open(newline="") as fh:
        r = csv.reader(fh)
        header = tuple(next(r))
        if header != CSV_HEADER:
            raise ValueError(f"unexpected trajectory header {header}")
        for row in r:
            episodes.setdefault(row[0], []).append(row)
    if not episodes:
        raise ValueError(f"{path} contains no episodes")
    lengths = {len(rows) for rows in episodes.values()}
    if len(lengths) != 1:
        raise ValueError("episodes of unequal length are not supported")
    obs, act, rew = [], [], []
    for rows in episodes.values():
        rows.sort(key=lambda row: int(row[1]))
        o = np.array([[float(row[i]) for i in (3, 4, 5, 2, 6, 7)] for row in rows])
        a = np.array([[float(row[i]) for i in (9, 10, 11)] for row in rows[:-1]])
        rr = np.array([float(row[8]) for row in rows[:-1]])
        obs.append(o)
        act.append(a.reshape(-1, 3))
        rew.append(rr)
    return np.stack(obs), np.stack(act), np.stack(rew)

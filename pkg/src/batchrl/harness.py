"""Experiment orchestration: data generation, closed-loop evaluation, the
frozen-seed reward oracle and appendix-style result tables.

Every random quantity is derived from one master seed through named streams,
so rerunning a configuration reproduces batch, models, policies and tables.
Artifacts live in ``cfg.output_dir``::

    batch.csv                      generated transitions
    model.json                     system model
    policies/{nfq,rcnn}_run{r}.json
    oracle.csv                     set_point,env_seed,oracle_average
    results/{method}_table.csv     appendix layout
    results/{method}_long.csv      method,set_point,run,env_seed,average_reward
    trajectories/{method}/sp{p}_run{r}.csv
"""

from __future__ import annotations

import csv
import json
import logging
import math
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path
from typing import Callable, Optional, Sequence

import numpy as np

from . import env as ib
from .data import TransitionBatch, write_episodes_csv
from .model import ModelTrainConfig, SystemModel, train_system_model
from .nfq import NfqConfig, NfqPolicy, select_best_policy, train_nfq
from .psop import PsopConfig, PsopPolicy, gamma_from_q
from .rcnn import RcnnPolicy, RcnnTrainConfig, sample_histories, train_rcnn_policy
from .swarm import SwarmConfig, pso_maximize

log = logging.getLogger(__name__)

METHODS = ("psop", "nfq", "rcnn", "random")
STREAMS = {"batch": 1, "model": 2, "nfq": 3, "rcnn": 4, "psop": 5, "env": 6, "random": 7, "oracle": 8, "select": 9}
DEFAULT_SET_POINTS = tuple(range(10, 101, 10))


class MissingArtifact(FileNotFoundError):
    """A pipeline stage needs an artifact that has not been produced yet."""


def derive_seed(master: int, stream: str, *index: int) -> int:
    """Independent 63-bit seed for a named stream and index tuple."""
    ss = np.random.SeedSequence([int(master), STREAMS[stream], *(int(i) for i in index)])
    return int(ss.generate_state(1, np.uint64)[0] >> np.uint64(1))


# -- configuration ----------------------------------------------------------------


@dataclass
class ExperimentConfig:
    set_points: tuple = DEFAULT_SET_POINTS
    trajectories: int = 10  # batch episodes per set point
    batch_length: int = 1000
    episode_length: int = 1000  # evaluation steps after the warm-up
    warmup: int = 30
    runs: int = 10
    master_seed: int = 0
    method: str = "psop"
    noise: float = 1.0
    env_seeds: str = "shared"  # "shared": frozen seeds common to all runs; "per-run": fresh seeds per run
    with_oracle: bool = False
    model: dict = field(default_factory=dict)
    psop: dict = field(default_factory=dict)
    nfq: dict = field(default_factory=dict)
    rcnn: dict = field(default_factory=dict)
    oracle: dict = field(default_factory=lambda: {"horizon": 20})
    selection_histories: int = 64
    selection_horizon: int = 50
    output_dir: str = "runs"

    def __post_init__(self):
        self.set_points = tuple(float(p) for p in self.set_points)
        if not self.set_points:
            raise ValueError("need at least one set point")
        if any(not (0.0 <= p <= 100.0) for p in self.set_points):
            raise ValueError("set points must lie in [0, 100]")
        for name in ("trajectories", "batch_length", "episode_length", "runs", "selection_histories", "selection_horizon"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be >= 1")
        if self.warmup < 0:
            raise ValueError("warmup must be >= 0")
        if self.method not in METHODS:
            raise ValueError(f"unknown method {self.method!r}; expected one of {METHODS}")
        if self.env_seeds not in ("shared", "per-run"):
            raise ValueError("env_seeds must be 'shared' or 'per-run'")
        if self.noise < 0:
            raise ValueError("noise must be nonnegative")

    @classmethod
    def from_dict(cls, d: dict) -> "ExperimentConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ValueError(f"unknown config keys: {sorted(unknown)}")
        return cls(**d)

    @classmethod
    def load(cls, path, overrides: Optional[dict] = None) -> "ExperimentConfig":
        d = json.loads(Path(path).read_text()) if path else {}
        d.update(overrides or {})
        return cls.from_dict(d)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["set_points"] = list(self.set_points)
        return d

    def model_config(self) -> ModelTrainConfig:
        return ModelTrainConfig(**self.model)

    def nfq_config(self) -> NfqConfig:
        return NfqConfig(**self.nfq)

    def rcnn_config(self) -> RcnnTrainConfig:
        d = dict(self.rcnn)
        if "hidden" in d:
            d["hidden"] = tuple(d["hidden"])
        return RcnnTrainConfig(**d)

    def psop_config(self) -> PsopConfig:
        d = dict(self.psop)
        return PsopConfig(swarm=SwarmConfig(**d.pop("swarm", {})), **d)

    def oracle_swarm(self) -> SwarmConfig:
        return SwarmConfig(**{k: v for k, v in self.oracle.items() if k not in ("horizon", "q")})

    def env_seed(self, sp_index: int, run: int) -> int:
        return derive_seed(self.master_seed, "env", sp_index, 0 if self.env_seeds == "shared" else run)


# -- data generation -----------------------------------------------------------


def generate_batch(cfg: ExperimentConfig, seed: Optional[int] = None, path=None) -> TransitionBatch:
    """Random-exploration batch: uniform actions in ``[-1, 1]^3`` from the initial state."""
    seed = derive_seed(cfg.master_seed, "batch") if seed is None else seed
    n_ep = len(cfg.set_points) * cfg.trajectories
    L = cfg.batch_length
    obs = np.empty((n_ep, L + 1, 6))
    acts = np.empty((n_ep, L, 3))
    rews = np.empty((n_ep, L))
    e = 0
    for i, p in enumerate(cfg.set_points):
        for j in range(cfg.trajectories):
            rng = np.random.default_rng(np.random.SeedSequence([seed, i, j]))
            state = ib.reset(p, int(rng.integers(2**63)), cfg.noise)
            obs[e, 0] = state.observation().as_array()
            acts[e] = rng.uniform(-1.0, 1.0, (L, 3))
            for t in range(L):
                state, o, rews[e, t] = ib.step(state, acts[e, t])
                obs[e, t + 1] = o.as_array()
            e += 1
    batch = TransitionBatch(obs, acts, rews)
    if path is not None:
        batch.to_csv(path)
    return batch


# -- closed-loop evaluation -----------------------------------------------------


class RandomPolicy:
    """Uniform random steering changes; a reference point below every learned method."""

    def __init__(self, seed: int = 0):
        self.seed = seed
        self.reset()

    def reset(self) -> None:
        self.rng = np.random.default_rng(self.seed)

    def __call__(self, history, t: int = 0) -> np.ndarray:
        return self.rng.uniform(-1.0, 1.0, 3)


@dataclass
class Episode:
    set_point: float
    run: int
    env_seed: int
    warmup: int
    observations: np.ndarray  # (warmup + steps + 1, 6)
    actions: np.ndarray
    rewards: np.ndarray

    @property
    def average(self) -> float:
        """Average reward per step, warm-up excluded."""
        return float(np.mean(self.rewards[self.warmup:]))


def run_episode(
    policy: Callable, set_point: float, env_seed: int, steps: int, warmup: int = 30, noise: float = 1.0, run: int = 0
) -> Episode:
    """Zero actions for ``warmup`` steps, then ``steps`` steps of ``policy(history, t)``."""
    state = ib.reset(set_point, env_seed, noise)
    N = warmup + steps
    obs = np.empty((N + 1, 6))
    acts = np.zeros((N, 3))
    rews = np.empty(N)
    obs[0] = state.observation().as_array()
    if hasattr(policy, "reset"):
        policy.reset()
    for t in range(N):
        if t >= warmup:
            acts[t] = np.clip(np.asarray(policy(obs[: t + 1], t), dtype=float).reshape(3), -1.0, 1.0)
        state, o, rews[t] = ib.step(state, acts[t])
        obs[t + 1] = o.as_array()
    return Episode(float(set_point), run, int(env_seed), warmup, obs, acts, rews)


@dataclass
class ResultTable:
    """Average reward per step; rows are set points, columns are runs."""

    set_points: np.ndarray
    values: np.ndarray  # (set points, runs); NaN marks a failed run
    max: Optional[np.ndarray] = None
    method: str = ""

    def __post_init__(self):
        self.set_points = np.asarray(self.set_points, dtype=float)
        self.values = np.asarray(self.values, dtype=float)
        if self.values.shape[0] != len(self.set_points):
            raise ValueError("one row per set point expected")
        if self.max is not None:
            self.max = np.asarray(self.max, dtype=float)

    @property
    def n_runs(self) -> int:
        return self.values.shape[1]

    @property
    def mean_column(self) -> np.ndarray:
        return _nanmean(self.values, axis=1)

    @property
    def mean_row(self) -> np.ndarray:
        return _nanmean(self.values, axis=0)

    @property
    def overall(self) -> float:
        return float(_nanmean(self.values.reshape(-1), axis=0))

    def to_csv(self, path) -> None:
        """Appendix layout: ``SetPoint (MAX), 1..R, Mean`` plus a closing mean row."""
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        with path.open("w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["SetPoint (MAX)" if self.max is not None else "SetPoint", *range(1, self.n_runs + 1), "Mean"])
            for i, p in enumerate(self.set_points):
                label = f"{p:g}" if self.max is None else f"{p:g} ({float(self.max[i])!r})"
                w.writerow([label, *(_cell(x) for x in self.values[i]), _cell(self.mean_column[i])])
            w.writerow(["Mean", *(_cell(x) for x in self.mean_row), _cell(self.overall)])

    @classmethod
    def from_csv(cls, path, method: str = "") -> "ResultTable":
        with Path(path).open(newline="") as fh:
            rows = list(csv.reader(fh))
        body = rows[1:-1]
        sps, mx, vals = [], [], []
        for row in body:
            label = row[0].split(" (")
            sps.append(float(label[0]))
            if len(label) > 1:
                mx.append(float(label[1].rstrip(")")))
            vals.append([float(x) if x else math.nan for x in row[1:-1]])
        return cls(np.array(sps), np.array(vals), np.array(mx) if mx else None, method)

    def long_rows(self, env_seeds=None) -> list[tuple]:
        out = []
        for i, p in enumerate(self.set_points):
            for r in range(self.n_runs):
                seed = "" if env_seeds is None else env_seeds[i][r]
                out.append((self.method, p, r + 1, seed, self.values[i, r]))
        return out


def _nanmean(x, axis):
    x = np.asarray(x, dtype=float)
    ok = ~np.isnan(x)
    n = ok.sum(axis=axis)
    s = np.where(ok, x, 0.0).sum(axis=axis)
    return np.where(n > 0, s / np.maximum(n, 1), np.nan)


def _cell(x) -> str:
    return "" if np.isnan(x) else repr(float(x))


def evaluate_policy(make_policy: Callable[[int], Callable], cfg: ExperimentConfig, method: str = ""):
    """Closed-loop episodes for every run and set point.

    ``make_policy(run)`` builds the controller of one run. A controller that
    raises aborts its episode, which is recorded as missing.
    """
    values = np.full((len(cfg.set_points), cfg.runs), np.nan)
    seeds = [[cfg.env_seed(i, r) for r in range(cfg.runs)] for i in range(len(cfg.set_points))]
    episodes = []
    for r in range(cfg.runs):
        policy = make_policy(r)
        for i, p in enumerate(cfg.set_points):
            try:
                ep = run_episode(policy, p, seeds[i][r], cfg.episode_length, cfg.warmup, cfg.noise, run=r)
            except Exception as exc:  # noqa: BLE001 - a failing controller must not sink the table
                log.warning("%s run %d at set point %g failed: %s", method, r + 1, p, exc)
                continue
            values[i, r] = ep.average
            episodes.append(ep)
    return ResultTable(np.array(cfg.set_points), values, method=method), episodes, seeds


# -- frozen-seed oracle --------------------------------------------------------


def max_reward_oracle(
    set_point: float,
    seed: int,
    T: int = 20,
    swarm_cfg: SwarmConfig = SwarmConfig(),
    *,
    steps: int = 1000,
    warmup: int = 30,
    noise: float = 1.0,
    q: float = 0.25,
    plan_seed: int = 0,
    return_episode: bool = False,
):
    """Receding-horizon swarm planning on the true dynamics with frozen future noise.

    At every step the planner evaluates candidate sequences by exact
    rollouts from the current state, whose future noise is fixed by the
    generator position; only the first action is applied. The previous plan,
    shifted by one step, seeds the next search. Returns the average reward
    per step after the warm-up, an empirical upper estimate for any policy on
    the same seed.
    """
    gamma = gamma_from_q(q, T)
    disc = gamma ** np.arange(T)
    state = ib.reset(set_point, seed, noise)
    obs = [state.observation().as_array()]
    acts, rews = [], []
    prev = None
    for t in range(warmup + steps):
        if t < warmup:
            a = np.zeros(3)
        else:
            future = ib.future_noise(state, T)
            s0 = state

            def fitness(X):
                return ib.rollout_rewards(s0, X.reshape(len(X), T, 3), future) @ disc

            init = None if prev is None else np.concatenate([prev[3:], np.zeros(3)])
            prev, _ = pso_maximize(
                fitness, 3 * T, (-1.0, 1.0), swarm_cfg, derive_seed(plan_seed, "oracle", t), vectorized=True, init=init
            )
            a = prev[:3]
        state, o, r = ib.step(state, a)
        acts.append(a)
        rews.append(r)
        obs.append(o.as_array())
    ep = Episode(float(set_point), 0, int(seed), warmup, np.array(obs), np.array(acts), np.array(rews))
    return ep if return_episode else ep.average


# -- pipeline ----------------------------------------------------------------------


class ArtifactStore:
    """Paths of the pipeline artifacts below one output directory."""

    def __init__(self, root):
        self.root = Path(root)

    @property
    def batch(self) -> Path:
        return self.root / "batch.csv"

    @property
    def model(self) -> Path:
        return self.root / "model.json"

    @property
    def oracle(self) -> Path:
        return self.root / "oracle.csv"

    def policy(self, method: str, run: int) -> Path:
        return self.root / "policies" / f"{method}_run{run + 1}.json"

    def table(self, method: str) -> Path:
        return self.root / "results" / f"{method}_table.csv"

    def long(self, method: str) -> Path:
        return self.root / "results" / f"{method}_long.csv"

    def trajectory(self, method: str, set_point: float, run: int) -> Path:
        return self.root / "trajectories" / method / f"sp{set_point:g}_run{run + 1}.csv"

    def require(self, path: Path, hint: str) -> Path:
        if not path.exists():
            raise MissingArtifact(f"{path} not found; {hint}")
        return path


def stage_generate(cfg: ExperimentConfig, store: ArtifactStore) -> TransitionBatch:
    return generate_batch(cfg, path=store.batch)


def stage_train_model(cfg: ExperimentConfig, store: ArtifactStore) -> SystemModel:
    batch = TransitionBatch.from_csv(store.require(store.batch, "run `batchrl generate` first"))
    model = train_system_model(batch, cfg.model_config(), derive_seed(cfg.master_seed, "model"))
    store.model.parent.mkdir(parents=True, exist_ok=True)
    model.save(store.model)
    return model


def _load_model(store: ArtifactStore) -> SystemModel:
    return SystemModel.load(store.require(store.model, "run `batchrl train-model` first"))


def _load_batch(store: ArtifactStore) -> TransitionBatch:
    return TransitionBatch.from_csv(store.require(store.batch, "run `batchrl generate` first"))


def stage_train_nfq(cfg: ExperimentConfig, store: ArtifactStore, runs: Optional[Sequence[int]] = None) -> list:
    """Fitted-Q training per run, keeping the iteration the model rates best."""
    batch, model = _load_batch(store), _load_model(store)
    chosen = []
    for r in range(cfg.runs) if runs is None else runs:
        policies = train_nfq(batch, seed=derive_seed(cfg.master_seed, "nfq", r), cfg=cfg.nfq_config())
        rng = np.random.default_rng(derive_seed(cfg.master_seed, "select", r))
        hist = sample_histories(batch, model.horizon, cfg.selection_histories, rng)
        sel = select_best_policy(policies, model, hist, cfg.selection_horizon)
        log.info("nfq run %d: selected iteration %d (model estimate %.4f)", r + 1, sel.index + 1, sel.value)
        path = store.policy("nfq", r)
        path.parent.mkdir(parents=True, exist_ok=True)
        sel.policy.save(path)
        chosen.append(sel)
    return chosen


def stage_train_rcnn(cfg: ExperimentConfig, store: ArtifactStore, runs: Optional[Sequence[int]] = None) -> list:
    batch, model = _load_batch(store), _load_model(store)
    out = []
    for r in range(cfg.runs) if runs is None else runs:
        net = train_rcnn_policy(model, batch, cfg.rcnn_config(), derive_seed(cfg.master_seed, "rcnn", r))
        pol = RcnnPolicy(net, model)
        path = store.policy("rcnn", r)
        path.parent.mkdir(parents=True, exist_ok=True)
        pol.save(path)
        out.append(pol)
    return out


def policy_factory(cfg: ExperimentConfig, store: ArtifactStore, method: str) -> Callable[[int], Callable]:
    if method == "random":
        return lambda r: RandomPolicy(derive_seed(cfg.master_seed, "random", r))
    if method == "psop":
        model = _load_model(store)
        pcfg = cfg.psop_config()
        return lambda r: PsopPolicy(model, pcfg, derive_seed(cfg.master_seed, "psop", r))
    if method == "nfq":
        return lambda r: NfqPolicy.load(store.require(store.policy("nfq", r), "run `batchrl train-nfq` first"))
    if method == "rcnn":
        model = _load_model(store)
        return lambda r: RcnnPolicy.load(store.require(store.policy("rcnn", r), "run `batchrl train-rcnn` first"), model)
    raise ValueError(f"unknown method {method!r}")


def stage_oracle(cfg: ExperimentConfig, store: ArtifactStore) -> np.ndarray:
    """Oracle value per set point on the frozen seeds of the first run."""
    T = int(cfg.oracle.get("horizon", 20))
    q = float(cfg.oracle.get("q", 0.25))
    values = []
    rows = []
    for i, p in enumerate(cfg.set_points):
        seed = cfg.env_seed(i, 0)
        v = max_reward_oracle(
            p, seed, T, cfg.oracle_swarm(), steps=cfg.episode_length, warmup=cfg.warmup, noise=cfg.noise, q=q,
            plan_seed=derive_seed(cfg.master_seed, "oracle", i),
        )
        values.append(v)
        rows.append((p, seed, repr(v)))
    store.oracle.parent.mkdir(parents=True, exist_ok=True)
    with store.oracle.open("w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(("set_point", "env_seed", "oracle_average"))
        w.writerows(rows)
    return np.array(values)


def read_oracle(store: ArtifactStore) -> dict:
    with store.oracle.open(newline="") as fh:
        return {float(row["set_point"]): float(row["oracle_average"]) for row in csv.DictReader(fh)}


def stage_evaluate(cfg: ExperimentConfig, store: ArtifactStore, method: Optional[str] = None) -> ResultTable:
    method = method or cfg.method
    table, episodes, seeds = evaluate_policy(policy_factory(cfg, store, method), cfg, method)
    if store.oracle.exists():
        oracle = read_oracle(store)
        if all(p in oracle for p in cfg.set_points):
            table.max = np.array([oracle[p] for p in cfg.set_points])
    table.to_csv(store.table(method))
    write_long_csv(store.long(method), table.long_rows(seeds))
    for ep in episodes:
        write_episodes_csv(store.trajectory(method, ep.set_point, ep.run), ep.observations, ep.actions, ep.rewards)
    return table


LONG_HEADER = ("method", "set_point", "run", "env_seed", "average_reward")


def write_long_csv(path, rows) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with path.open("w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(LONG_HEADER)
        for method, p, r, seed, v in rows:
            w.writerow((method, f"{p:g}", r, seed, _cell(v)))


def report(cfg: ExperimentConfig, store: ArtifactStore) -> dict:
    """Re-assemble appendix tables (with MAX when available) and one combined long CSV."""
    tables = {}
    rows = []
    oracle = read_oracle(store) if store.oracle.exists() else None
    for method in METHODS:
        path = store.long(method)
        if not path.exists():
            continue
        with path.open(newline="") as fh:
            recs = list(csv.DictReader(fh))
        sps = sorted({float(x["set_point"]) for x in recs})
        n_runs = max(int(x["run"]) for x in recs)
        vals = np.full((len(sps), n_runs), np.nan)
        for x in recs:
            if x["average_reward"]:
                vals[sps.index(float(x["set_point"])), int(x["run"]) - 1] = float(x["average_reward"])
        mx = np.array([oracle[p] for p in sps]) if oracle and all(p in oracle for p in sps) else None
        table = ResultTable(np.array(sps), vals, mx, method)
        table.to_csv(store.root / "report" / f"{method}_table.csv")
        tables[method] = table
        rows += [(x["method"], float(x["set_point"]), int(x["run"]), x["env_seed"],
                  float(x["average_reward"]) if x["average_reward"] else math.nan) for x in recs]
    if not tables:
        raise MissingArtifact(f"no results below {store.root / 'results'}; run `batchrl eval` first")
    write_long_csv(store.root / "report" / "long.csv", rows)
    return tables


def run_experiment(cfg: ExperimentConfig, method: Optional[str] = None) -> ResultTable:
    """Full pipeline for one method, building any missing artifact on the way."""
    method = method or cfg.method
    store = ArtifactStore(cfg.output_dir)
    store.root.mkdir(parents=True, exist_ok=True)
    (store.root / "config.json").write_text(json.dumps(cfg.to_dict(), indent=2))
    if not store.batch.exists():
        stage_generate(cfg, store)
    if method != "random" and not store.model.exists():
        stage_train_model(cfg, store)
    if method in ("nfq", "rcnn"):
        todo = [r for r in range(cfg.runs) if not store.policy(method, r).exists()]
        if todo:
            (stage_train_nfq if method == "nfq" else stage_train_rcnn)(cfg, store, todo)
    if cfg.with_oracle and not store.oracle.exists():
        stage_oracle(cfg, store)
    return stage_evaluate(cfg, store, method)

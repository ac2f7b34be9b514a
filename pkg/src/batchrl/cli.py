"""Command line entry point.

Every subcommand reads an optional JSON config (``--config``); flags override
individual keys, and ``--set key=json`` overrides any key, nested ones with
dots (``--set psop.swarm.n_particles=50``).
"""

from __future__ import annotations

import argparse
import json
import logging
import sys

from . import harness as hn


def _parse_assignment(text: str) -> tuple[str, object]:
    if "=" not in text:
        raise argparse.ArgumentTypeError(f"expected key=value, got {text!r}")
    key, raw = text.split("=", 1)
    try:
        value = json.loads(raw)
    except json.JSONDecodeError:
        value = raw
    return key, value


def _assign(d: dict, dotted: str, value) -> None:
    keys = dotted.split(".")
    for k in keys[:-1]:
        d = d.setdefault(k, {})
    d[keys[-1]] = value


def build_config(args) -> hn.ExperimentConfig:
    overrides: dict = {}
    flat = {
        "output_dir": args.output_dir,
        "master_seed": args.master_seed,
        "set_points": args.set_points,
        "runs": args.runs,
        "trajectories": args.trajectories,
        "batch_length": args.batch_length,
        "episode_length": args.episode_length,
        "warmup": args.warmup,
        "noise": args.noise,
        "env_seeds": args.env_seeds,
    }
    overrides.update({k: v for k, v in flat.items() if v is not None})
    if getattr(args, "method", None):
        overrides["method"] = args.method
    base = json.loads(open(args.config).read()) if args.config else {}
    base.update(overrides)
    for key, flag in (("horizon", args.horizon), ("q", args.q)):
        if flag is not None:
            _assign(base, f"psop.{key}", flag)
    for key, flag in (("n_particles", args.particles), ("n_iterations", args.iterations)):
        if flag is not None:
            _assign(base, f"psop.swarm.{key}", flag)
    if args.oracle_horizon is not None:
        _assign(base, "oracle.horizon", args.oracle_horizon)
    for key, value in args.set or []:
        _assign(base, key, value)
    return hn.ExperimentConfig.from_dict(base)


def _common(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", help="JSON experiment config")
    p.add_argument("--output-dir")
    p.add_argument("--master-seed", type=int)
    p.add_argument("--set-points", type=float, nargs="+")
    p.add_argument("--runs", type=int)
    p.add_argument("--trajectories", type=int, help="batch episodes per set point")
    p.add_argument("--batch-length", type=int)
    p.add_argument("--episode-length", type=int, help="evaluation steps after the warm-up")
    p.add_argument("--warmup", type=int)
    p.add_argument("--noise", type=float)
    p.add_argument("--env-seeds", choices=("shared", "per-run"))
    p.add_argument("--horizon", type=int, help="PSO-P planning horizon T")
    p.add_argument("--q", type=float, help="PSO-P weight of the last planned reward")
    p.add_argument("--particles", type=int)
    p.add_argument("--iterations", type=int)
    p.add_argument("--oracle-horizon", type=int)
    p.add_argument("--set", type=_parse_assignment, action="append", metavar="KEY=JSON")
    p.add_argument("-v", "--verbose", action="store_true")


def make_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="batchrl", description="Batch RL experiments on the industrial benchmark surrogate")
    sub = parser.add_subparsers(dest="command", required=True)
    for name, help_ in (
        ("generate", "generate the random-exploration batch"),
        ("train-model", "train the recurrent system model"),
        ("train-nfq", "fitted Q-iteration with model-based policy selection"),
        ("train-rcnn", "train policies through the system model"),
        ("oracle", "frozen-seed maximum-reward estimate per set point"),
        ("report", "assemble appendix tables and a long-format CSV"),
    ):
        _common(sub.add_parser(name, help=help_))
    ev = sub.add_parser("eval", help="closed-loop evaluation of one method")
    _common(ev)
    ev.add_argument("--method", choices=hn.METHODS, required=True)
    return parser


def main(argv=None) -> int:
    args = make_parser().parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.INFO, format="%(levelname)s %(name)s: %(message)s")
    logging.getLogger("numba").setLevel(logging.WARNING)
    try:
        cfg = build_config(args)
        store = hn.ArtifactStore(cfg.output_dir)
        store.root.mkdir(parents=True, exist_ok=True)
        if args.command == "generate":
            batch = hn.stage_generate(cfg, store)
            print(f"wrote {len(batch)} transitions to {store.batch}")
        elif args.command == "train-model":
            m = hn.stage_train_model(cfg, store)
            print(f"wrote {store.model} (validation MAE c={m.m_c.validation_mae:.4g}, f={m.m_f.validation_mae:.4g})")
        elif args.command == "train-nfq":
            for r, sel in enumerate(hn.stage_train_nfq(cfg, store)):
                print(f"run {r + 1}: iteration {sel.index + 1}, model estimate {sel.value:.4f}")
        elif args.command == "train-rcnn":
            hn.stage_train_rcnn(cfg, store)
            print(f"wrote {cfg.runs} rcnn policies below {store.root / 'policies'}")
        elif args.command == "eval":
            table = hn.stage_evaluate(cfg, store, args.method)
            print(f"{args.method}: mean average reward {table.overall:.4f} -> {store.table(args.method)}")
        elif args.command == "oracle":
            values = hn.stage_oracle(cfg, store)
            for p, v in zip(cfg.set_points, values):
                print(f"set point {p:g}: {v:.4f}")
        elif args.command == "report":
            for method, table in hn.report(cfg, store).items():
                print(f"{method}: {table.overall:.4f}")
    except (hn.MissingArtifact, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except (RuntimeError, FloatingPointError) as exc:
        print(f"training failed: {exc}", file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())

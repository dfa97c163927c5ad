"""Command-line entry point.

Subcommands: gen-data, train, infer, eval, report.  Every run writes a
manifest (canonical config, its hash, library versions) into the output
directory; failures exit nonzero with a machine-readable JSON error on
stderr.
"""

from __future__ import annotations

import argparse
import json
import os
import sys
from dataclasses import asdict
from pathlib import Path

from . import construction as con
from . import driving as drv
from .core import Diagnostics
from .errors import MissingModel, NestedTomError
from .evaluate import (
    METHODS,
    eval_construction,
    eval_driving,
    max_workers,
    write_eval_rows,
)
from .pipeline import ModelBundle, train_construction_models, train_driving_models
from .report import generate_report
from .serialize import (
    load_episodes,
    save_episodes,
    write_diagnostics,
    write_manifest,
)

CONSTRUCTION_KINDS = ("s1", "s2", "test")


def _load_config(path: str | None) -> dict:
    if not path:
        return {}
    return json.loads(Path(path).read_text(encoding="utf-8"))


def _construction_cfg(config: dict) -> con.ConstructionConfig:
    fields = {k: v for k, v in config.get("construction", {}).items()}
    return con.ConstructionConfig(**fields)


def _driving_cfg(config: dict) -> drv.DrivingConfig:
    fields = {k: v for k, v in config.get("driving", {}).items()}
    if "dist_edges" in fields:
        fields["dist_edges"] = tuple(fields["dist_edges"])
    if "speed_edges" in fields:
        fields["speed_edges"] = tuple(fields["speed_edges"])
    return drv.DrivingConfig(**fields)


def cmd_gen_data(args: argparse.Namespace) -> int:
    config = _load_config(args.config)
    out_dir = Path(args.out)
    out_dir.mkdir(parents=True, exist_ok=True)
    kind = args.kind.lower()
    if args.env == "construction":
        if kind not in CONSTRUCTION_KINDS:
            raise NestedTomError(f"construction kinds: {CONSTRUCTION_KINDS}, got {kind!r}")
        episodes = con.synthesize_episodes(_construction_cfg(config), kind, args.count, args.seed)
        summary = {"episodes": len(episodes)}
    else:
        cfg = _driving_cfg(config)
        bundle = ModelBundle.load(args.models) if args.models else ModelBundle()
        episodes, summary = drv.synthesize_driving_episodes(
            cfg,
            kind,
            args.count,
            args.seed,
            q0_params=bundle.driving_q0,
            q1_params=bundle.driving_q1,
        )
    path = out_dir / f"{args.env}_{kind}.jsonl"
    n = save_episodes(episodes, path)
    (out_dir / f"{args.env}_{kind}_summary.json").write_text(
        json.dumps(summary, indent=2), encoding="utf-8"
    )
    write_manifest(
        {"cmd": "gen-data", "env": args.env, "kind": kind, "count": args.count,
         "seed": args.seed, "config": config},
        out_dir,
    )
    print(f"wrote {n} episodes to {path}")
    return 0


def cmd_train(args: argparse.Namespace) -> int:
    config = _load_config(args.config)
    out_dir = Path(args.out)
    out_dir.mkdir(parents=True, exist_ok=True)
    data_dir = Path(args.data)
    if args.env == "construction":
        cfg = _construction_cfg(config)
        s1 = load_episodes(data_dir / "construction_s1.jsonl")
        s2 = load_episodes(data_dir / "construction_s2.jsonl")
        train_construction_models(s1, s2, cfg, out_dir, seed=args.seed)
    else:
        cfg = _driving_cfg(config)
        s0 = load_episodes(data_dir / "driving_s0.jsonl")
        s1 = load_episodes(data_dir / "driving_s1.jsonl")
        s2 = load_episodes(data_dir / "driving_s2.jsonl")
        train_driving_models(s0, s1, s2, cfg, out_dir, seed=args.seed)
    write_manifest(
        {"cmd": "train", "env": args.env, "seed": args.seed, "config": config}, out_dir
    )
    print(f"checkpoints written to {out_dir}")
    return 0


def cmd_infer(args: argparse.Namespace) -> int:
    from .engine import exact_sequence, infer_sequence, ProposalSet
    from .proposals import LearnedProposal
    from .serialize import dump_posteriors, posterior_rows
    from .spaces import InferenceConfig

    config = _load_config(args.config)
    out_dir = Path(args.out)
    out_dir.mkdir(parents=True, exist_ok=True)
    episodes = load_episodes(args.episodes)
    episode = episodes[args.index]
    diag = Diagnostics()
    if args.env == "construction":
        cfg = _construction_cfg(config)
        model = con.ConstructionModel(episode, cfg)
        n1 = max(1, int(args.particles / 2))
        particles = {1: n1, 2: 2}
    else:
        cfg = _driving_cfg(config)
        data = drv.DrivingEpisodeData(episode, cfg)
        target = args.target or episode.agents[0].id
        model = drv.DrivingModel(data, target)
        particles = {1: max(1, args.particles // 3), 2: 3}
    if args.method == "exact":
        seq = exact_sequence(model, 2)
    else:
        bundle = ModelBundle.load(args.models) if args.models else ModelBundle()
        if args.method == "ours":
            if args.env == "construction":
                bundle.require("construction_l1", "construction_l2")
                proposals = ProposalSet(
                    LearnedProposal(bundle.construction_l2),
                    LearnedProposal(bundle.construction_l1),
                )
            else:
                bundle.require("driving_q1", "driving_q2")
                proposals = ProposalSet(
                    LearnedProposal(bundle.driving_q2), LearnedProposal(bundle.driving_q1)
                )
        else:
            proposals = ProposalSet.uniform()
        cfg_inf = InferenceConfig(particles_per_level=particles, stratified=True, seed=args.seed)
        seq = infer_sequence(model, 2, cfg_inf, proposals, diagnostics=diag)
    rows = []
    for t, post in enumerate(seq, start=1):
        rows.extend(posterior_rows(model.episode_id, t, post))
    dump_posteriors(rows, out_dir / "posteriors.csv")
    write_diagnostics(diag, out_dir / "diagnostics.jsonl")
    write_manifest(
        {"cmd": "infer", "env": args.env, "method": args.method, "seed": args.seed,
         "episode_index": args.index, "particles": args.particles, "config": config},
        out_dir,
    )
    print(f"posterior dump written to {out_dir / 'posteriors.csv'}")
    return 0


def cmd_eval(args: argparse.Namespace) -> int:
    config = _load_config(args.config)
    out_dir = Path(args.out)
    out_dir.mkdir(parents=True, exist_ok=True)
    episodes = load_episodes(args.episodes)
    fractions = [float(f) for f in args.fractions.split(",") if f]
    methods = tuple(args.method.split(",")) if args.method else METHODS
    bundle = ModelBundle.load(args.models) if args.models else ModelBundle()
    workers = max_workers(args.workers)
    diag = Diagnostics()
    if args.env == "construction":
        rows = eval_construction(
            episodes, bundle, fractions, methods, _construction_cfg(config),
            seed=args.seed, workers=workers, diagnostics=diag,
        )
    else:
        rows = eval_driving(
            episodes, bundle, fractions, methods, _driving_cfg(config),
            seed=args.seed, workers=workers, diagnostics=diag,
        )
    manifest_hash = write_manifest(
        {"cmd": "eval", "env": args.env, "methods": list(methods),
         "fractions": fractions, "seed": args.seed, "config": config},
        out_dir,
    )
    write_eval_rows(rows, out_dir / "eval_rows.csv", config_hash=manifest_hash)
    write_diagnostics(diag, out_dir / "diagnostics.jsonl")
    print(f"eval rows written to {out_dir / 'eval_rows.csv'}")
    return 0


def cmd_report(args: argparse.Namespace) -> int:
    out_dir = Path(args.out)
    out_dir.mkdir(parents=True, exist_ok=True)
    info = generate_report(args.inputs, out_dir, prefix=args.prefix)
    write_manifest({"cmd": "report", "inputs": [str(p) for p in args.inputs]}, out_dir)
    print(json.dumps(info))
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="nested-tom")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen-data", help="synthesize episode datasets")
    p.add_argument("--env", required=True, choices=("construction", "driving"))
    p.add_argument("--kind", required=True)
    p.add_argument("--count", type=int, default=100)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True)
    p.add_argument("--config", default=None)
    p.add_argument("--models", default=None,
                   help="checkpoint dir (required for driving s1/s2/test kinds)")
    p.set_defaults(func=cmd_gen_data)

    p = sub.add_parser("train", help="train recognition networks")
    p.add_argument("--env", required=True, choices=("construction", "driving"))
    p.add_argument("--data", required=True, help="directory with the JSONL datasets")
    p.add_argument("--out", required=True)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--config", default=None)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("infer", help="posterior dump for one episode")
    p.add_argument("--env", required=True, choices=("construction", "driving"))
    p.add_argument("--episodes", required=True)
    p.add_argument("--index", type=int, default=0)
    p.add_argument("--target", default=None)
    p.add_argument("--method", default="exact", choices=("exact", "ours", "ours_no_nn"))
    p.add_argument("--particles", type=int, default=6)
    p.add_argument("--models", default=None)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True)
    p.add_argument("--config", default=None)
    p.set_defaults(func=cmd_infer)

    p = sub.add_parser("eval", help="run the evaluation protocols")
    p.add_argument("--env", required=True, choices=("construction", "driving"))
    p.add_argument("--episodes", required=True)
    p.add_argument("--method", default=None, help="comma-separated subset of methods")
    p.add_argument("--fractions", default="0.067,0.111,0.25,1.0")
    p.add_argument("--models", default=None)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--workers", type=int, default=1)
    p.add_argument("--out", required=True)
    p.add_argument("--config", default=None)
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("report", help="aggregate eval CSVs into tables and figures")
    p.add_argument("--inputs", nargs="+", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--prefix", default="")
    p.set_defaults(func=cmd_report)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except MissingModel as exc:
        print(json.dumps({"error": "MissingModel", "message": str(exc)}), file=sys.stderr)
        return MissingModel.exit_code
    except NestedTomError as exc:
        print(json.dumps({"error": type(exc).__name__, "message": str(exc)}), file=sys.stderr)
        return 1
    except FileNotFoundError as exc:
        print(json.dumps({"error": "FileNotFound", "message": str(exc)}), file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())

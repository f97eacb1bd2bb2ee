"""Command-line interface.

    taskfusion [--config FILE] [--seed N] [--out PATH] COMMAND [options]

Commands: search, meta-init, train-joint, fuse, evaluate, report,
synth-data and run (all phases). ``--config`` is an experiment YAML file;
command options override its fields.
"""

from __future__ import annotations

import argparse
import dataclasses
import json
import logging
import sys
from pathlib import Path
from typing import List, Optional

from .errors import CheckpointError, ConfigError, DimensionError, NonFiniteLossError

log = logging.getLogger("taskfusion")


def _bool(text: str) -> bool:
    v = text.strip().lower()
    if v in ("1", "true", "yes", "on"):
        return True
    if v in ("0", "false", "no", "off"):
        return False
    raise argparse.ArgumentTypeError(f"expected a boolean, got {text!r}")


def _common(p: argparse.ArgumentParser, top: bool) -> None:
    d = None if top else argparse.SUPPRESS
    p.add_argument("--config", default=d, help="experiment YAML file")
    p.add_argument("--seed", type=int, default=d, help="master seed")
    p.add_argument("--out", default=d, help="output checkpoint, directory or file (per command)")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="taskfusion", description=__doc__.split("\n\n")[0])
    _common(parser, top=True)
    parser.add_argument("-v", "--verbose", action="count", default=0)
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("search", help="implicit architecture search")
    _common(p, top=False)
    p.add_argument("--space", help="search-space YAML file")
    p.add_argument("--data", action="append", default=[], help="pair directory (repeat once per task)")
    p.add_argument("--lambda", dest="lam", type=float, help="latency trade-off")
    p.add_argument("--epochs", type=int)
    p.add_argument("--latency", help="latency table YAML (operator id -> cost)")

    p = sub.add_parser("meta-init", help="pretext meta initialization")
    _common(p, top=False)
    p.add_argument("--tasks", help="task manifest (id, train, val, kind)")
    p.add_argument("--search-ckpt", help="checkpoint of the search phase (alpha)")
    p.add_argument("--K", type=int)
    p.add_argument("--outer-iters", type=int)
    p.add_argument("--first-order", type=_bool)
    p.add_argument("--allow-fallback", action="store_true", help="random architecture when no search checkpoint")
    p.add_argument("--allow-config-mismatch", action="store_true")

    p = sub.add_parser("train-joint", help="task-guided joint training")
    _common(p, top=False)
    p.add_argument("--init", help="checkpoint of the meta phase")
    p.add_argument("--search-ckpt", help="search checkpoint used when --init is absent")
    p.add_argument("--data", help="pair directory")
    p.add_argument("--epochs", type=int)
    p.add_argument("--eta", type=float)
    p.add_argument("--lr", type=float)
    p.add_argument("--freeze-fusion", action="store_true")
    p.add_argument("--allow-fallback", action="store_true", help="random fusion weights when --init is absent")
    p.add_argument("--allow-config-mismatch", action="store_true")

    p = sub.add_parser("fuse", help="fuse every pair of a directory")
    _common(p, top=False)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--data", required=True, help="pair directory")
    p.add_argument("--gray", action="store_true", help="write luminance only")

    p = sub.add_parser("evaluate", help="fusion metrics for a directory of fused images")
    _common(p, top=False)
    p.add_argument("--fused", required=True)
    p.add_argument("--src-a", required=True)
    p.add_argument("--src-b", required=True)

    p = sub.add_parser("report", help="aggregate tables and plots for a run directory")
    _common(p, top=False)
    p.add_argument("--run-dir", required=True)

    p = sub.add_parser("synth-data", help="write a synthetic paired dataset")
    _common(p, top=False)
    p.add_argument("--kind", default="ivif")
    p.add_argument("--pairs", type=int, default=8)
    p.add_argument("--size", type=int, default=128)

    p = sub.add_parser("run", help="all enabled phases end to end")
    _common(p, top=False)
    p.add_argument("--resume", action="store_true", help="reuse phase checkpoints already in --out")
    return parser


def _experiment(args):
    from .pipeline.config import ExperimentConfig, load_experiment_config

    cfg = load_experiment_config(args.config) if args.config else ExperimentConfig()
    if args.seed is not None:
        cfg = dataclasses.replace(cfg, seed=args.seed)
    return cfg


def _require(args, *names):
    missing = [f"--{n.replace('_', '-')}" for n in names if getattr(args, n, None) in (None, [], "")]
    if missing:
        raise ConfigError(f"{args.command} needs {', '.join(missing)}")


def _out_paths(out: str, default_name: str):
    """``--out`` may name a checkpoint file or a directory."""
    p = Path(out)
    if p.suffix == ".safetensors":
        return p.parent, p
    return p, p / default_name


def cmd_search(args) -> int:
    from .pipeline.data import ingest
    from .pipeline.phases import CHECKPOINTS, run_phase_search
    from .search_space import load_space_config

    _require(args, "data", "out")
    cfg = _experiment(args)
    base_hash = cfg.hash()
    if args.space:
        cfg = dataclasses.replace(cfg, space=load_space_config(args.space).raw)
    changes = {k: v for k, v in (("lam", args.lam), ("epochs", args.epochs)) if v is not None}
    cfg = dataclasses.replace(cfg, search=dataclasses.replace(cfg.search, **changes))
    if args.latency:
        cfg = dataclasses.replace(cfg, latency_path=args.latency)
    out_dir, ckpt = _out_paths(args.out, CHECKPOINTS["search"])
    data = {Path(d).name: ingest(d) for d in args.data}
    result = run_phase_search(cfg, data, out_dir, ckpt, config_hash=base_hash)
    print(f"search done: {ckpt}")
    print(json.dumps(result.metadata()["architecture"], indent=2, sort_keys=True))
    return 0


def _load_optional(path, cfg_hash, allow_mismatch):
    from .pipeline.checkpoint import load_checkpoint

    return load_checkpoint(path, cfg_hash, allow_mismatch) if path else None


def cmd_meta(args) -> int:
    from .pipeline.data import ingest
    from .pipeline.phases import CHECKPOINTS, read_task_manifest, run_phase_meta

    _require(args, "tasks", "out")
    cfg = _experiment(args)
    base_hash = cfg.hash()
    changes = {
        k: v for k, v in (("K", args.K), ("outer_iters", args.outer_iters), ("first_order", args.first_order)) if v is not None
    }
    cfg = dataclasses.replace(cfg, meta=dataclasses.replace(cfg.meta, **changes))
    search_ckpt = _load_optional(args.search_ckpt, base_hash, args.allow_config_mismatch)
    tasks = {t["id"]: (ingest(t["train"]), ingest(t["val"])) for t in read_task_manifest(args.tasks)}
    out_dir, ckpt = _out_paths(args.out, CHECKPOINTS["meta"])
    run_phase_meta(cfg, tasks, search_ckpt, out_dir, args.allow_fallback, ckpt, config_hash=base_hash)
    print(f"meta initialization done: {ckpt}")
    return 0


def cmd_joint(args) -> int:
    from .pipeline.data import ingest, split_pairs
    from .pipeline.config import component_seed
    from .pipeline.phases import CHECKPOINTS, run_phase_joint

    _require(args, "data", "out")
    cfg = _experiment(args)
    base_hash = cfg.hash()
    changes = {k: v for k, v in (("epochs", args.epochs), ("lr", args.lr)) if v is not None}
    if args.freeze_fusion:
        changes["freeze_fusion"] = True
    cfg = dataclasses.replace(cfg, joint=dataclasses.replace(cfg.joint, **changes))
    if args.eta is not None:
        cfg = dataclasses.replace(cfg, loss=dataclasses.replace(cfg.loss, eta=args.eta))
    init = _load_optional(args.init, base_hash, args.allow_config_mismatch)
    search_ckpt = _load_optional(args.search_ckpt, base_hash, args.allow_config_mismatch)
    task = (init.space if init else cfg.space).get("task_head", {}).get("task", "enhancement")
    pairs = ingest(args.data, require_masks=task == "mask")
    data = split_pairs(pairs, 1.0 - cfg.joint.val_fraction, component_seed(cfg.seed, "joint.split"))
    out_dir, ckpt = _out_paths(args.out, CHECKPOINTS["joint"])
    run_phase_joint(cfg, data, init, out_dir, args.allow_fallback, search_ckpt, ckpt, config_hash=base_hash)
    print(f"joint training done: {ckpt}")
    return 0


def cmd_fuse(args) -> int:
    from .pipeline.checkpoint import load_checkpoint
    from .pipeline.data import ingest
    from .pipeline.evaluation import fuse_pairs

    _require(args, "out")
    ckpt = load_checkpoint(args.checkpoint)
    timings = fuse_pairs(ckpt, ingest(args.data), args.out, color=not args.gray)
    print(f"fused {len(timings)} pair(s) into {args.out}")
    return 0


def cmd_evaluate(args) -> int:
    from .pipeline.evaluation import evaluate_dirs, write_metric_csv

    _require(args, "out")
    report = evaluate_dirs(args.fused, args.src_a, args.src_b)
    write_metric_csv(report, args.out)
    agg = report.aggregate()["mean"]
    print(" ".join(f"{k}={v:.4f}" for k, v in agg.items()))
    return 0


def cmd_report(args) -> int:
    from .pipeline.evaluation import report

    for name, path in report(args.run_dir).items():
        print(f"{name}: {path}")
    return 0


def cmd_synth(args) -> int:
    from .pipeline.synth import synth_pairs, write_pairs

    _require(args, "out")
    seed = args.seed if args.seed is not None else 0
    out = write_pairs(synth_pairs(args.kind, args.pairs, args.size, seed), args.out)
    print(f"wrote {args.pairs} {args.kind} pair(s) to {out}")
    return 0


def cmd_run(args) -> int:
    from .pipeline.phases import run_pipeline

    _require(args, "out")
    paths = run_pipeline(_experiment(args), args.out, resume=args.resume)
    for name, path in paths.items():
        print(f"{name}: {path}")
    return 0


COMMANDS = {
    "search": cmd_search,
    "meta-init": cmd_meta,
    "train-joint": cmd_joint,
    "fuse": cmd_fuse,
    "evaluate": cmd_evaluate,
    "report": cmd_report,
    "synth-data": cmd_synth,
    "run": cmd_run,
}


def main(argv: Optional[List[str]] = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(
        level=logging.WARNING - 10 * min(args.verbose, 2), format="%(levelname)s %(name)s: %(message)s"
    )
    try:
        return COMMANDS[args.command](args)
    except (ConfigError, DimensionError, CheckpointError, NonFiniteLossError, FileNotFoundError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())

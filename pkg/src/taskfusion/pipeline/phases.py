"""The three training phases and the end-to-end driver.

search -> meta -> joint. Each phase persists a checkpoint plus a history
CSV in the run directory. A disabled phase is replaced by a logged fallback:
no search means a randomly drawn architecture, no meta phase means randomly
initialized fusion weights.
"""

from __future__ import annotations

import csv
import dataclasses
import json
import logging
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np
import torch
import yaml

from ..errors import CheckpointError, ConfigError, NonFiniteLossError
from ..ias import search
from ..losses import feature_richness_loss, saliency_weights, task_loss
from ..pmi import MetaTask, pretrain
from ..search_space import (
    ArchitectureWeights,
    FusionNetwork,
    LatencyTable,
    NetworkParams,
    architecture_manifest,
    build_fusion_network,
    build_task_head,
    derive_architecture,
    discrete_space_dict,
    parse_space_config,
    run,
)
from .checkpoint import Checkpoint, file_hash, load_checkpoint, ordered_like, save_checkpoint
from .config import ExperimentConfig, component_seed
from .data import ImagePair, PatchSet, ingest, patchify, split_pairs
from .synth import synth_pairs

log = logging.getLogger(__name__)

CHECKPOINTS = {"search": "search.safetensors", "meta": "meta.safetensors", "joint": "joint.safetensors"}
HISTORIES = {"search": "search_history.csv", "meta": "meta_history.csv", "joint": "joint_history.csv"}


def _generator(seed: int, name: str) -> torch.Generator:
    return torch.Generator().manual_seed(component_seed(seed, name))


def write_history(path, rows: Sequence[Dict[str, float]]) -> Path:
    """CSV with a fixed column order and round-trippable float text."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    columns: List[str] = []
    for r in rows:
        columns += [k for k in r if k not in columns]
    with path.open("w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(columns)
        for r in rows:
            w.writerow([repr(float(r[c])) if isinstance(r.get(c), float) else r.get(c, "") for c in columns])
    return path


# ---------------------------------------------------------------- data


def load_data(cfg: ExperimentConfig) -> Dict[str, object]:
    """Task datasets for all phases: ``search`` {task: pairs}, ``meta``
    {task: (train, val)}, ``joint`` (train, val)."""
    d = cfg.data
    seed = component_seed(cfg.seed, "data")
    if d.search_dirs:
        search_sets = {Path(p).name: ingest(p) for p in d.search_dirs}
    else:
        search_sets = {k: synth_pairs(k, d.pairs, d.image_size, seed) for k in d.kinds}
    if d.meta_manifest:
        meta_sets = {t["id"]: (ingest(t["train"]), ingest(t["val"])) for t in read_task_manifest(d.meta_manifest)}
    else:
        meta_sets = {
            k: split_pairs(v, 1.0 - cfg.meta_val_fraction, component_seed(cfg.seed, f"meta.split.{k}"))
            for k, v in search_sets.items()
        }
    if d.joint_dir:
        joint_pairs = ingest(d.joint_dir, require_masks=_head_task(cfg) == "mask")
    else:
        joint_pairs = synth_pairs(d.joint_kind, d.pairs, d.image_size, component_seed(cfg.seed, "data.joint"))
    joint = split_pairs(joint_pairs, 1.0 - cfg.joint.val_fraction, component_seed(cfg.seed, "joint.split"))
    return {"search": search_sets, "meta": meta_sets, "joint": joint}


def read_task_manifest(path) -> List[Dict[str, str]]:
    """YAML/JSON list of ``{id, train, val, kind}``; relative dirs resolve
    against the manifest's folder."""
    path = Path(path)
    entries = yaml.safe_load(path.read_text())
    if isinstance(entries, dict):
        entries = entries.get("tasks")
    if not isinstance(entries, list) or not entries:
        raise ConfigError(f"{path}: expected a nonempty list of tasks")
    out = []
    for i, e in enumerate(entries):
        missing = {"id", "train", "val"} - set(e)
        if missing:
            raise ConfigError(f"{path}: task {i} lacks {', '.join(sorted(missing))}")
        out.append(
            {
                "id": str(e["id"]),
                "train": str((path.parent / e["train"]).resolve()),
                "val": str((path.parent / e["val"]).resolve()),
                "kind": str(e.get("kind", "unspecified")),
            }
        )
    return out


def _head_task(cfg: ExperimentConfig) -> str:
    return (cfg.space.get("task_head") or {}).get("task", "enhancement")


def _space(cfg: ExperimentConfig):
    space = parse_space_config(cfg.space)
    if cfg.latency_path:
        raw = yaml.safe_load(Path(cfg.latency_path).read_text())
        table = LatencyTable({str(k): float(v) for k, v in raw.items()})
        table.check_covers(space.operator_ids)
        space.latency = table
    return space


# ---------------------------------------------------------------- phases


def run_phase_search(
    cfg: ExperimentConfig,
    data: Dict[str, List[ImagePair]],
    out_dir,
    checkpoint_path=None,
    config_hash: Optional[str] = None,
) -> Checkpoint:
    out = Path(out_dir)
    space = _space(cfg)
    net, params = build_fusion_network(space, _generator(cfg.seed, "search.init"))
    datasets = [
        patchify(data[k], cfg.patch_size, cfg.augment, component_seed(cfg.seed, f"search.patch.{k}"))
        for k in sorted(data)
    ]
    sc = dataclasses.replace(cfg.search, seed=component_seed(cfg.seed, "search"))
    result = search(net, datasets, sc, space.latency, params)
    write_history(out / HISTORIES["search"], result.history)
    write_history(out / "search_timing.csv", [{"epoch": i, "wall_time": t} for i, t in enumerate(result.wall_times)])
    (out / "architecture.txt").write_text(architecture_manifest(net, result.architecture))
    ckpt = Checkpoint("search", cfg.seed, config_hash or cfg.hash(), space.to_dict(), result.params, result.alpha)
    save_checkpoint(ckpt, checkpoint_path or out / CHECKPOINTS["search"])
    return ckpt


def random_alpha(cfg: ExperimentConfig) -> Tuple[FusionNetwork, ArchitectureWeights]:
    """Fallback architecture: Gaussian logits from the run seed."""
    net = FusionNetwork(_space(cfg))
    alpha = net.init_alpha()
    g = _generator(cfg.seed, "fallback.alpha")
    return net, alpha.with_logits({e: torch.randn(v.shape, generator=g) for e, v in alpha.logits.items()})


def _discrete(space_raw, alpha: ArchitectureWeights):
    relaxed = parse_space_config(space_raw)
    return discrete_space_dict(relaxed, derive_architecture(alpha))


def _fusion_data_loss(net, weights):
    def loss_fn(params, patches: PatchSet):
        a, b = patches.a, patches.b
        return feature_richness_loss(run(net, params, a, b), a, b, weights)

    return loss_fn


def run_phase_meta(
    cfg: ExperimentConfig,
    tasks: Dict[str, Tuple[List[ImagePair], List[ImagePair]]],
    search_ckpt: Optional[Checkpoint],
    out_dir,
    fallback: bool = False,
    checkpoint_path=None,
    config_hash: Optional[str] = None,
) -> Checkpoint:
    """Meta-initialize the derived (discrete) fusion network; alpha stays frozen."""
    out = Path(out_dir)
    if search_ckpt is None:
        if not fallback:
            raise CheckpointError("meta phase needs the search phase checkpoint (alpha)")
        net, alpha = random_alpha(cfg)
        log.warning("search phase skipped: substituting a random architecture %s", dict(derive_architecture(alpha).operator_ids))
        space_raw = net.config.to_dict()
    else:
        alpha, space_raw = search_ckpt.alpha, search_ckpt.space
    discrete = _discrete(space_raw, alpha)
    net, omega = build_fusion_network(discrete, _generator(cfg.seed, "meta.init"))
    meta_tasks = []
    for tid in sorted(tasks):
        train, val = tasks[tid]
        meta_tasks.append(
            MetaTask(
                tid,
                patchify(train, cfg.patch_size, cfg.augment, component_seed(cfg.seed, f"meta.train.{tid}")),
                patchify(val, cfg.patch_size, False, component_seed(cfg.seed, f"meta.val.{tid}")),
            )
        )
    result = pretrain(omega, meta_tasks, _fusion_data_loss(net, cfg.loss), cfg.meta)
    write_history(out / HISTORIES["meta"], result.history)
    notes = {} if search_ckpt is not None else {"fallback": "random architecture"}
    ckpt = Checkpoint("meta", cfg.seed, config_hash or cfg.hash(), discrete, result.params, alpha, notes=notes)
    save_checkpoint(ckpt, checkpoint_path or out / CHECKPOINTS["meta"])
    return ckpt


def fallback_init(cfg: ExperimentConfig, search_ckpt: Optional[Checkpoint]) -> Checkpoint:
    """Stand-in for a skipped meta phase: random fusion weights."""
    if search_ckpt is None:
        net, alpha = random_alpha(cfg)
        space_raw, notes = net.config.to_dict(), {"fallback": "random architecture, random init"}
        log.warning("search phase skipped: substituting a random architecture")
    else:
        alpha, space_raw, notes = search_ckpt.alpha, search_ckpt.space, {"fallback": "random init"}
    discrete = _discrete(space_raw, alpha)
    _, params = build_fusion_network(discrete, _generator(cfg.seed, "fallback.init"))
    log.warning("meta phase skipped: substituting randomly initialized fusion weights")
    return Checkpoint("init", cfg.seed, cfg.hash(), discrete, params, alpha, notes=notes)


def _batches(n: int, batch_size: int, rng: np.random.Generator):
    order = rng.permutation(n)
    return [order[i : i + batch_size] for i in range(0, n, batch_size)]


def _task_terms(net, head, theta_F, theta_T, a, b, mask, maps, cfg, task):
    fused = run(net, theta_F, a, b)
    out = run(head, theta_T, fused)
    lt = task_loss(task, out, a, b, mask, cfg.loss, maps)
    lf = feature_richness_loss(fused, a, b, cfg.loss)
    return lt, lf, fused


def run_phase_joint(
    cfg: ExperimentConfig,
    data: Tuple[List[ImagePair], List[ImagePair]],
    init_ckpt: Optional[Checkpoint],
    out_dir,
    fallback: bool = False,
    search_ckpt: Optional[Checkpoint] = None,
    checkpoint_path=None,
    config_hash: Optional[str] = None,
) -> Checkpoint:
    """Train the fusion network and the surrogate task head together.

    With ``cfg.joint.freeze_fusion`` the fusion weights stay at their
    initialization (fuse-then-freeze baseline).
    """
    out = Path(out_dir)
    if init_ckpt is None:
        if not fallback:
            raise CheckpointError("joint phase needs the meta phase checkpoint (initial fusion weights and alpha)")
        init_ckpt = fallback_init(cfg, search_ckpt)
    space = parse_space_config(init_ckpt.space)
    if any(len(c) != 1 for s in space.cells for c in s.edges):
        raise CheckpointError("joint phase expects a discrete architecture checkpoint")
    net = FusionNetwork(space)
    theta_F = ordered_like(init_ckpt.theta_F, net).clone()
    head, theta_T = build_task_head(space.task_head, _generator(cfg.seed, "joint.head"))
    task = space.task_head.task

    train_pairs, val_pairs = data
    train = patchify(train_pairs, cfg.patch_size, cfg.augment, component_seed(cfg.seed, "joint.patch"))
    val = patchify(val_pairs, cfg.patch_size, False, component_seed(cfg.seed, "joint.val"))
    if task == "mask" and (train.mask is None or val.mask is None):
        raise ConfigError("mask surrogate task needs masks for every pair")
    maps_train = saliency_weights(train.a, train.b, cfg.loss) if task == "enhancement" else None
    maps_val = saliency_weights(val.a, val.b, cfg.loss) if task == "enhancement" else None

    jc = cfg.joint
    trainable = list(theta_T.values()) + ([] if jc.freeze_fusion else list(theta_F.values()))
    for t in trainable:
        t.requires_grad_(True)
    opt_cls = torch.optim.Adam if jc.optimizer == "adam" else torch.optim.SGD
    opt = opt_cls(trainable, lr=jc.lr)
    rng = np.random.default_rng(component_seed(cfg.seed, "joint.batches"))

    def evaluate():
        with torch.no_grad():
            lt, lf, _ = _task_terms(net, head, theta_F, theta_T, val.a, val.b, val.mask, maps_val, cfg, task)
        return float(lt), float(lf)

    history = []
    for epoch in range(jc.epochs):
        sums = np.zeros(3)
        batches = _batches(len(train), jc.batch_size, rng)
        for idx in batches:
            i = torch.as_tensor(idx)
            mask = None if train.mask is None else train.mask[i]
            maps = None if maps_train is None else (maps_train[0][i], maps_train[1][i])
            lt, lf, fused = _task_terms(net, head, theta_F, theta_T, train.a[i], train.b[i], mask, maps, cfg, task)
            objective = lt + cfg.loss.eta * lf  # with frozen fusion weights the second term is a constant
            if not torch.isfinite(objective):
                raise NonFiniteLossError(f"non-finite joint objective at epoch {epoch}", step=epoch, value=float(objective))
            opt.zero_grad(set_to_none=True)
            objective.backward()
            opt.step()
            lt, lf = float(lt.detach()), float(lf.detach())
            sums += [lt, lf, lt + cfg.loss.eta * lf]
        mean = sums / len(batches)
        val_t, val_f = evaluate()
        history.append(
            {
                "epoch": epoch,
                "loss_T": float(mean[0]),
                "loss_F": float(mean[1]),
                "joint": float(mean[2]),
                "val_loss_T": val_t,
                "val_loss_F": val_f,
            }
        )
        log.info("joint epoch %d: %s", epoch, history[-1])
    write_history(out / HISTORIES["joint"], history)
    notes = dict(init_ckpt.notes)
    notes["freeze_fusion"] = bool(jc.freeze_fusion)
    ckpt = Checkpoint(
        "joint",
        cfg.seed,
        config_hash or cfg.hash(),
        init_ckpt.space,
        theta_F.detach(),
        init_ckpt.alpha,
        NetworkParams((n, t.detach()) for n, t in theta_T.items()),
        head=space.task_head.raw,
        notes=notes,
    )
    save_checkpoint(ckpt, checkpoint_path or out / CHECKPOINTS["joint"])
    return ckpt


# ---------------------------------------------------------------- driver


def run_pipeline(cfg: ExperimentConfig, out_dir, resume: bool = False) -> Dict[str, Path]:
    """All enabled phases in order; returns the checkpoint paths written.

    With ``resume`` a phase whose checkpoint already exists (same config
    hash) is loaded instead of recomputed. Every phase consumes its
    predecessor as re-read from disk, so resumed and fresh runs match.
    """
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    (out / "config.yaml").write_text(yaml.safe_dump(cfg.to_dict(), sort_keys=True))
    h = cfg.hash()
    data = load_data(cfg)
    paths: Dict[str, Path] = {}

    def phase(name, fn):
        path = out / CHECKPOINTS[name]
        if not (resume and path.is_file()):
            fn()
        else:
            log.info("resuming: reusing %s", path)
        paths[name] = path
        return load_checkpoint(path, expected_hash=h)

    search_ckpt = meta_ckpt = None
    if cfg.phases["search"]:
        search_ckpt = phase("search", lambda: run_phase_search(cfg, data["search"], out))
    if cfg.phases["meta"]:
        meta_ckpt = phase("meta", lambda: run_phase_meta(cfg, data["meta"], search_ckpt, out, fallback=True))
    if cfg.phases["joint"]:
        phase(
            "joint",
            lambda: run_phase_joint(cfg, data["joint"], meta_ckpt, out, fallback=True, search_ckpt=search_ckpt),
        )
    manifest = {
        "config_hash": h,
        "seed": cfg.seed,
        "phases": [p for p in ("search", "meta", "joint") if cfg.phases[p]],
        "files": {
            p.name: file_hash(p)
            for p in sorted(out.iterdir())
            if p.is_file() and p.name not in ("manifest.json", "search_timing.csv")
        },
    }
    (out / "manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")
    return paths

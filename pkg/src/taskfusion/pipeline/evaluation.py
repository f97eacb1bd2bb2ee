"""Inference, metric evaluation over directories and report emission."""

from __future__ import annotations

import csv
import logging
import re
import time
from pathlib import Path
from typing import Dict, List, Optional

import numpy as np
import torch

from ..errors import ConfigError, DimensionError
from ..metrics import METRIC_NAMES, MetricReport, evaluate_pair
from ..search_space import FusionNetwork, discrete_latency, derive_architecture, parse_space_config, run
from .checkpoint import Checkpoint, ordered_like
from .data import IMAGE_SUFFIXES, ImagePair, read_image, write_image, ycbcr_to_rgb

log = logging.getLogger(__name__)


class FusionModel:
    """Fusion network restored from a checkpoint (relaxed or discrete)."""

    def __init__(self, ckpt: Checkpoint):
        self.space = parse_space_config(ckpt.space)
        self.network = FusionNetwork(self.space)
        self.params = ordered_like(ckpt.theta_F, self.network)
        discrete = all(len(c) == 1 for s in self.space.cells for c in s.edges)
        self.alpha = None if discrete else ckpt.alpha
        if not discrete and ckpt.alpha is None:
            raise ConfigError("relaxed architecture checkpoint carries no alpha")
        self.min_size = 4 if any(s.kind == "MS" for s in self.space.cells) else 1

    @property
    def param_count(self) -> int:
        return self.params.numel

    def latency_estimate(self, alpha=None) -> Optional[float]:
        alpha = alpha if alpha is not None else self.alpha
        if alpha is None:
            return float(sum(self.space.latency[c[0].id] for s in self.space.cells for c in s.edges))
        return discrete_latency(derive_architecture(alpha), self.space.latency)

    def __call__(self, a: np.ndarray, b: np.ndarray) -> np.ndarray:
        a, b = np.asarray(a, dtype=np.float64), np.asarray(b, dtype=np.float64)
        if a.shape != b.shape:
            raise DimensionError(f"source sizes differ: {a.shape} vs {b.shape}")
        if a.ndim != 2 or min(a.shape) < self.min_size:
            raise DimensionError(
                f"image of size {a.shape} cannot be processed; this network needs 2-D inputs of at least "
                f"{self.min_size}x{self.min_size}"
            )
        dtype = next(iter(self.params.values())).dtype if self.params else torch.float32
        ta = torch.as_tensor(a, dtype=dtype)[None, None]
        tb = torch.as_tensor(b, dtype=dtype)[None, None]
        with torch.no_grad():
            out = run(self.network, self.params, ta, tb, self.alpha)
        return out[0, 0].clamp(0.0, 1.0).double().numpy()


def fuse(ckpt: Checkpoint, pair: ImagePair, color: bool = True) -> np.ndarray:
    """Fused luminance in [0, 1]; RGB when the pair carries chroma and ``color``."""
    y = FusionModel(ckpt)(pair.a, pair.b)
    if color and pair.chroma is not None:
        return ycbcr_to_rgb(y, pair.chroma)
    return y


def fuse_pairs(ckpt: Checkpoint, pairs: List[ImagePair], out_dir, color: bool = True) -> Dict[str, float]:
    """Write ``<id>_F.png`` for each pair; returns fuse seconds per pair."""
    model = FusionModel(ckpt)
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    timings = {}
    for p in pairs:
        start = time.perf_counter()
        y = model(p.a, p.b)
        timings[p.id] = time.perf_counter() - start
        write_image(out / f"{p.id}_F.png", ycbcr_to_rgb(y, p.chroma) if color and p.chroma is not None else y)
    return timings


_ROLE = re.compile(r"_(A|B|F)$")


def _index(directory: Path, role: str) -> Dict[str, Path]:
    out = {}
    for p in sorted(directory.iterdir()):
        if p.suffix.lower() not in IMAGE_SUFFIXES:
            continue
        m = _ROLE.search(p.stem)
        if m and m.group(1) != role:
            continue
        out[_ROLE.sub("", p.stem)] = p
    return out


def evaluate_dirs(fused_dir, src_a_dir, src_b_dir) -> MetricReport:
    """Metrics for every fused image with both sources present (matched by id)."""
    fused = _index(Path(fused_dir), "F")
    srcs_a, srcs_b = _index(Path(src_a_dir), "A"), _index(Path(src_b_dir), "B")
    report = MetricReport()
    for pid, path in fused.items():
        if pid not in srcs_a or pid not in srcs_b:
            log.warning("no sources for fused image %s; skipped", path.name)
            continue
        f, _ = read_image(path)
        a, _ = read_image(srcs_a[pid])
        b, _ = read_image(srcs_b[pid])
        report.add(pid, evaluate_pair(f, a, b))
    if not report.rows:
        raise ConfigError(f"no fused images in {fused_dir} match sources in {src_a_dir} / {src_b_dir}")
    return report


def write_metric_csv(report: MetricReport, path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with path.open("w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(("pair_id",) + METRIC_NAMES)
        for pid in sorted(report.rows):
            w.writerow([pid] + [repr(float(report.rows[pid][m])) for m in METRIC_NAMES])
    return path


def read_metric_csv(path) -> MetricReport:
    report = MetricReport()
    with Path(path).open() as fh:
        for row in csv.DictReader(fh):
            report.add(row["pair_id"], {m: float(row[m]) for m in METRIC_NAMES})
    return report


def _is_metric_csv(path: Path) -> bool:
    with path.open() as fh:
        return fh.readline().strip().split(",")[:1] == ["pair_id"]


def report(run_dir) -> Dict[str, Path]:
    """Aggregate every evaluation CSV under ``run_dir`` and draw static plots.

    Writes ``aggregate.csv`` (mean and median per metric), ``metrics.png``
    and one ``<history>.png`` loss-curve plot per history CSV.
    """
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    run_dir = Path(run_dir)
    if not run_dir.is_dir():
        raise FileNotFoundError(f"run directory {run_dir} does not exist")
    csvs = sorted(p for p in run_dir.rglob("*.csv") if p.name != "aggregate.csv" and _is_metric_csv(p))
    if not csvs:
        raise FileNotFoundError(
            f"no evaluation CSVs in {run_dir}; expected at least one file such as report.csv "
            f"with columns pair_id,{','.join(METRIC_NAMES)}"
        )
    merged = MetricReport()
    for p in csvs:
        prefix = "" if len(csvs) == 1 else f"{p.relative_to(run_dir).with_suffix('')}/"
        for pid, vals in read_metric_csv(p).rows.items():
            merged.add(prefix + pid, vals)
    agg = merged.aggregate()
    outputs = {}
    path = run_dir / "aggregate.csv"
    with path.open("w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(("statistic",) + METRIC_NAMES)
        for stat in ("mean", "median"):
            w.writerow([stat] + [repr(agg[stat][m]) for m in METRIC_NAMES])
    outputs["aggregate"] = path

    fig, ax = plt.subplots(figsize=(6, 3))
    ax.bar(METRIC_NAMES, [agg["mean"][m] for m in METRIC_NAMES], color="0.4")
    ax.set_ylabel("mean over pairs")
    fig.tight_layout()
    fig.savefig(run_dir / "metrics.png", dpi=100)
    plt.close(fig)
    outputs["metrics_plot"] = run_dir / "metrics.png"

    for hist in sorted(run_dir.glob("*history.csv")):
        with hist.open() as fh:
            rows = list(csv.DictReader(fh))
        if not rows:
            continue
        xkey = next(iter(rows[0]))
        fig, ax = plt.subplots(figsize=(6, 3))
        for key in rows[0]:
            if key == xkey:
                continue
            ax.plot([float(r[xkey]) for r in rows], [float(r[key]) for r in rows], label=key)
        ax.set_xlabel(xkey)
        ax.legend(fontsize=7)
        fig.tight_layout()
        fig.savefig(hist.with_suffix(".png"), dpi=100)
        plt.close(fig)
        outputs[hist.stem] = hist.with_suffix(".png")
    return outputs

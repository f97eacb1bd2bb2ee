"""Cells: reusable sub-networks whose edges mix candidate operators.

Wiring per kind (all cells map C channels to C channels, same spatial size):

* ``SC`` successive -- edges applied in sequence.
* ``DC`` decomposition -- a 3x3 average-pool low-frequency path and the
  residual detail path; the first half of the edges runs on the low path,
  the second half on the detail path, and the two are summed.
* ``MS`` multi-scale -- the edge chain runs (with shared weights) on the
  input at scales 1, 1/2 and 1/4; results are upsampled, concatenated and
  fused by a 1x1 convolution.
* ``FD`` feature distillation -- edges form a chain of nodes; the final node
  concatenates every interior node and fuses them with a 1x1 convolution.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Mapping, Optional, Sequence, Tuple

import torch
import torch.nn as nn
import torch.nn.functional as F

from ..errors import ConfigError, DimensionError
from .operations import OperatorSpec, make_operator

CELL_KINDS = ("SC", "DC", "MS", "FD")
MS_SCALES = (1, 2, 4)


@dataclass(frozen=True)
class CellSpec:
    kind: str
    edges: Tuple[Tuple[OperatorSpec, ...], ...]
    name: str = "cell"

    def __post_init__(self):
        if self.kind not in CELL_KINDS:
            raise ConfigError(f"unknown cell kind {self.kind!r} (cell {self.name!r})")
        if not self.edges:
            raise ConfigError(f"cell {self.name!r} has no edges")
        for i, cands in enumerate(self.edges):
            if not cands:
                raise ConfigError(f"cell {self.name!r} edge {i} has no candidate operators")
        if self.kind == "DC" and len(self.edges) < 2:
            raise ConfigError(f"decomposition cell {self.name!r} needs at least 2 edges")

    def edge_id(self, i: int) -> str:
        return f"{self.name}.edge{i}"

    @property
    def edge_ids(self) -> Tuple[str, ...]:
        return tuple(self.edge_id(i) for i in range(len(self.edges)))

    def candidates(self):
        return {self.edge_id(i): tuple(op.id for op in c) for i, c in enumerate(self.edges)}

    def overhead_params(self, channels: int) -> int:
        """Non-searched parameters owned by the cell itself."""
        if self.kind == "MS":
            return len(MS_SCALES) * channels * channels + channels
        if self.kind == "FD":
            return len(self.edges) * channels * channels + channels
        return 0

    def param_count(self, channels: int) -> int:
        ops = sum(op.bind(channels).param_count for cands in self.edges for op in cands)
        return ops + self.overhead_params(channels)


class Edge(nn.Module):
    """Convex combination of candidate operators under normalized weights."""

    def __init__(self, edge_id: str, candidates: Sequence[OperatorSpec], channels: int):
        super().__init__()
        self.edge_id = edge_id
        self.ops = nn.ModuleList(make_operator(op, channels) for op in candidates)

    def forward(self, x, logits: Optional[torch.Tensor]):
        if logits is None:
            if len(self.ops) != 1:
                raise DimensionError(f"edge {self.edge_id}: no architecture weights supplied")
            weights = None
        else:
            if logits.numel() != len(self.ops):
                raise DimensionError(
                    f"edge {self.edge_id}: {logits.numel()} weights for {len(self.ops)} candidates"
                )
            weights = torch.softmax(logits, dim=0)
        out = None
        for i, op in enumerate(self.ops):
            y = op(x)
            if y.shape != x.shape:
                raise DimensionError(
                    f"edge {self.edge_id}: candidate {i} maps {tuple(x.shape)} to {tuple(y.shape)}"
                )
            if weights is not None:
                y = weights[i] * y
            out = y if out is None else out + y
        return out


class Cell(nn.Module):
    def __init__(self, spec: CellSpec, channels: int):
        super().__init__()
        self.spec = spec
        self.channels = channels
        self.edges = nn.ModuleList(
            Edge(spec.edge_id(i), cands, channels) for i, cands in enumerate(spec.edges)
        )
        if spec.kind == "MS":
            self.fuse = nn.Conv2d(len(MS_SCALES) * channels, channels, 1)
        elif spec.kind == "FD":
            self.fuse = nn.Conv2d(len(spec.edges) * channels, channels, 1)

    def _chain(self, edges, x, alpha):
        for edge in edges:
            x = edge(x, _lookup(alpha, edge.edge_id))
        return x

    def forward(self, x, alpha: Optional[Mapping[str, torch.Tensor]] = None):
        if x.dim() != 4 or x.shape[1] != self.channels:
            raise DimensionError(
                f"{self.spec.name}: expected (N, {self.channels}, H, W) input, got {tuple(x.shape)}"
            )
        kind, edges = self.spec.kind, list(self.edges)
        if kind == "SC":
            return self._chain(edges, x, alpha)
        if kind == "DC":
            low = F.avg_pool2d(x, 3, stride=1, padding=1, count_include_pad=False)
            half = len(edges) // 2
            return self._chain(edges[:half], low, alpha) + self._chain(edges[half:], x - low, alpha)
        if kind == "MS":
            h, w = x.shape[-2:]
            if min(h, w) < max(MS_SCALES):
                raise DimensionError(
                    f"{self.spec.name}: multi-scale cell needs H, W >= {max(MS_SCALES)}, got {h}x{w}"
                )
            outs = []
            for s in MS_SCALES:
                xs = x if s == 1 else F.avg_pool2d(x, s)
                ys = self._chain(edges, xs, alpha)
                if s != 1:
                    ys = F.interpolate(ys, size=(h, w), mode="bilinear", align_corners=False)
                outs.append(ys)
            return self.fuse(torch.cat(outs, dim=1))
        # FD
        nodes = []
        for edge in edges:
            x = edge(x, _lookup(alpha, edge.edge_id))
            nodes.append(x)
        return self.fuse(torch.cat(nodes, dim=1))


class CellStack(nn.Module):
    """Cells applied in order; the unit over which ``mixed_forward`` runs."""

    def __init__(self, specs: Sequence[CellSpec], channels: int):
        super().__init__()
        self.specs = tuple(specs)
        self.channels = channels
        self.cells = nn.ModuleList(Cell(s, channels) for s in specs)

    def candidates(self):
        out = {}
        for s in self.specs:
            out.update(s.candidates())
        return out

    def forward(self, x, alpha=None):
        for cell in self.cells:
            x = cell(x, alpha)
        return x


def _lookup(alpha, edge_id):
    if alpha is None:
        return None
    logits = alpha.logits if hasattr(alpha, "logits") else alpha
    if edge_id not in logits:
        raise DimensionError(f"architecture weights do not cover edge {edge_id}")
    return logits[edge_id]

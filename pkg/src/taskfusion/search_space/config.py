"""Search-space configuration: parsing from YAML-style mappings and defaults.

A space file looks like::

    width: 16
    cells:
      - kind: MS
        edges: 2
        candidates: [CA, SA, 3-DC, 3-RB, 3-DB, 3-SC]
      - kind: SC
        edges:                # or give candidates per edge
          - [3-RB, 3-DC]
          - [SA]
    latency: {CA: 0.4, SA: 0.3, ...}   # omitted -> synthetic table
    task_head:
      width: 16
      branches:
        - [{kind: SC, edges: [[SA], [3-DC]]}, {kind: SC, edges: [[CA], [SA]]}]
        - [{kind: SC, edges: [[SA], [3-DC]]}, {kind: SC, edges: [[CA], [SA]]}]
"""

from __future__ import annotations

import copy
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Dict, Optional, Sequence, Tuple

import yaml

from ..errors import ConfigError
from .cells import CELL_KINDS, CellSpec
from .operations import OperatorSpec, parse_operator
from .params import LatencyTable

DEFAULT_CANDIDATES = ("CA", "SA", "3-DC", "3-RB", "3-DB", "3-SC")
DEFAULT_WIDTH = 16

# Discrete structures reported for infrared-visible fusion.
SEARCHED_IVIF_FUSION = {
    "cells": [
        {"kind": "MS", "edges": [["3-RB"], ["3-DC"]]},
        {"kind": "SC", "edges": [["3-DB"], ["3-DC"]]},
    ]
}
SEARCHED_IVIF_ENHANCEMENT = [
    {"kind": "SC", "edges": [["SA"], ["3-DC"]]},
    {"kind": "SC", "edges": [["CA"], ["SA"]]},
]


@dataclass
class TaskHeadConfig:
    width: int = DEFAULT_WIDTH
    branches: Tuple[Tuple[CellSpec, ...], ...] = ()
    merge_kernel: int = 3
    out_channels: int = 1
    task: str = "enhancement"
    raw: Dict[str, Any] = field(default_factory=dict, repr=False)


@dataclass
class SearchSpaceConfig:
    width: int = DEFAULT_WIDTH
    in_channels: int = 2
    stem: str = "conv"
    head: str = "conv"
    cells: Tuple[CellSpec, ...] = ()
    latency: Optional[LatencyTable] = None
    task_head: Optional[TaskHeadConfig] = None
    raw: Dict[str, Any] = field(default_factory=dict, repr=False)

    @property
    def operator_ids(self):
        return sorted({op.id for c in self.cells for cands in c.edges for op in cands})

    def to_dict(self) -> Dict[str, Any]:
        """Round-trippable plain representation (used in checkpoints)."""
        d = copy.deepcopy(self.raw)
        if self.latency is not None:
            d["latency"] = dict(sorted(self.latency.items()))
        return d


def _parse_cells(entries, prefix: str) -> Tuple[CellSpec, ...]:
    if not isinstance(entries, (list, tuple)) or not entries:
        raise ConfigError(f"{prefix}: 'cells' must be a nonempty list")
    cells = []
    for i, entry in enumerate(entries):
        if not isinstance(entry, dict) or "kind" not in entry:
            raise ConfigError(f"{prefix}: cell {i} must be a mapping with a 'kind'")
        kind = str(entry["kind"])
        if kind not in CELL_KINDS:
            raise ConfigError(f"unknown cell kind {kind!r} ({prefix} cell {i})")
        edges = entry.get("edges", 2)
        if isinstance(edges, int):
            cands = entry.get("candidates", DEFAULT_CANDIDATES)
            edges = [list(cands) for _ in range(edges)]
        parsed = tuple(tuple(parse_operator(op) for op in cands) for cands in edges)
        cells.append(CellSpec(kind, parsed, name=f"{prefix}cell{i}"))
    return tuple(cells)


def synthetic_latency(ops: Sequence[OperatorSpec], channels: int) -> LatencyTable:
    """Hardware-free latency proxy: parameter count per operator, in k-units.

    Parameter-free operators get a small nonzero cost except ``zero``.
    """
    table = {}
    for op in ops:
        n = op.bind(channels).param_count
        table[op.id] = 0.0 if op.kind == "zero" else round(0.01 + n / 1000.0, 6)
    return LatencyTable(table)


def parse_task_head(raw: Optional[Dict[str, Any]]) -> TaskHeadConfig:
    raw = copy.deepcopy(raw) if raw else {}
    width = int(raw.get("width", DEFAULT_WIDTH))
    branches_raw = raw.get("branches") or [SEARCHED_IVIF_ENHANCEMENT, SEARCHED_IVIF_ENHANCEMENT]
    if len(branches_raw) != 2:
        raise ConfigError("task head needs exactly two parallel branches")
    branches = tuple(_parse_cells(b, f"branch{i}.") for i, b in enumerate(branches_raw))
    task = raw.get("task", "enhancement")
    if task not in ("enhancement", "mask"):
        raise ConfigError(f"unknown surrogate task {task!r}")
    merge_kernel = int(raw.get("merge_kernel", 3))
    if merge_kernel not in (3, 5):
        raise ConfigError("merge_kernel must be 3 or 5")
    raw.update(width=width, branches=copy.deepcopy(branches_raw), task=task, merge_kernel=merge_kernel)
    return TaskHeadConfig(width, branches, merge_kernel, int(raw.get("out_channels", 1)), task, raw)


def parse_space_config(raw: Dict[str, Any]) -> SearchSpaceConfig:
    raw = copy.deepcopy(raw) if raw else {}
    width = int(raw.get("width", DEFAULT_WIDTH))
    in_channels = int(raw.get("in_channels", 2))
    stem = raw.get("stem", "conv")
    head = raw.get("head", "conv")
    if stem not in ("conv", "none"):
        raise ConfigError(f"unknown stem {stem!r}")
    if head not in ("conv", "mean"):
        raise ConfigError(f"unknown head {head!r}")
    if stem == "none":
        width = in_channels
    if width <= 0:
        raise ConfigError("width must be positive")
    cells_raw = raw.get("cells") or [
        {"kind": "MS", "edges": 2, "candidates": list(DEFAULT_CANDIDATES)},
        {"kind": "SC", "edges": 2, "candidates": list(DEFAULT_CANDIDATES)},
    ]
    cells = _parse_cells(cells_raw, "")
    all_ops = {op.id: op for c in cells for cands in c.edges for op in cands}
    if raw.get("latency") is not None:
        latency = LatencyTable({str(k): float(v) for k, v in raw["latency"].items()})
    else:
        latency = synthetic_latency(list(all_ops.values()), width)
    latency.check_covers(all_ops)
    task_head = parse_task_head(raw.get("task_head"))
    raw.update(width=width, in_channels=in_channels, stem=stem, head=head, cells=cells_raw)
    raw["task_head"] = task_head.raw
    raw.pop("latency", None)
    return SearchSpaceConfig(width, in_channels, stem, head, cells, latency, task_head, raw)


def load_space_config(path) -> SearchSpaceConfig:
    text = Path(path).read_text()
    raw = yaml.safe_load(text) or {}
    if not isinstance(raw, dict):
        raise ConfigError(f"{path}: top level must be a mapping")
    return parse_space_config(raw.get("space", raw))

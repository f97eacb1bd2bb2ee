"""Fusion network N_F and parallel enhancement head N_T.

Networks are ordinary ``nn.Module`` templates; weights live in a separate
:class:`NetworkParams` mapping and every evaluation goes through
``torch.func.functional_call`` so forward passes are stateless in
``(alpha, params, inputs)``.
"""

from __future__ import annotations

from typing import Optional, Tuple

import torch
import torch.nn as nn
import torch.nn.functional as F
from torch.func import functional_call

from ..errors import ConfigError, DimensionError
from .cells import CellSpec, CellStack
from .config import SearchSpaceConfig, TaskHeadConfig, parse_space_config, parse_task_head
from .operations import NEGATIVE_SLOPE, SpatialAttention
from .params import ArchitectureWeights, DiscreteArchitecture, NetworkParams


def _act(x):
    return F.leaky_relu(x, NEGATIVE_SLOPE)


class FusionNetwork(nn.Module):
    """(I_A, I_B) -> stem -> cells -> head -> I_F."""

    def __init__(self, config: SearchSpaceConfig):
        super().__init__()
        self.config = config
        w = config.width
        if config.stem == "conv":
            self.stem = nn.Conv2d(config.in_channels, w, 3, padding=1)
        self.cells = CellStack(config.cells, w)
        if config.head == "conv":
            self.head = nn.Conv2d(w, 1, 3, padding=1)

    @property
    def cell_specs(self) -> Tuple[CellSpec, ...]:
        return self.config.cells

    def candidates(self):
        return self.cells.candidates()

    def init_alpha(self, dtype=None) -> ArchitectureWeights:
        return ArchitectureWeights.zeros(self.candidates(), dtype=dtype)

    def declared_param_count(self) -> int:
        c = self.config
        n = sum(s.param_count(c.width) for s in c.cells)
        if c.stem == "conv":
            n += 9 * c.in_channels * c.width + c.width
        if c.head == "conv":
            n += 9 * c.width + 1
        return n

    def forward(self, img_a, img_b, alpha=None):
        if img_a.shape != img_b.shape:
            raise DimensionError(
                f"source images differ in shape: {tuple(img_a.shape)} vs {tuple(img_b.shape)}"
            )
        x = torch.cat([img_a, img_b], dim=1)
        if self.config.stem == "conv":
            x = _act(self.stem(x))
        x = self.cells(x, alpha)
        if self.config.head == "conv":
            return torch.sigmoid(self.head(x))
        return x.mean(dim=1, keepdim=True)


class TaskHead(nn.Module):
    """Parallel enhancement network: two cell branches merged by a spatial
    attention map, followed by three 3x3 convolutions."""

    def __init__(self, config: TaskHeadConfig):
        super().__init__()
        self.config = config
        w = config.width
        self.stem = nn.Conv2d(1, w, 3, padding=1)
        self.branches = nn.ModuleList(CellStack(b, w) for b in config.branches)
        self.merge = SpatialAttention(config.merge_kernel)
        self.tail = nn.ModuleList(
            [
                nn.Conv2d(w, w, 3, padding=1),
                nn.Conv2d(w, w, 3, padding=1),
                nn.Conv2d(w, config.out_channels, 3, padding=1),
            ]
        )

    def candidates(self):
        out = {}
        for b in self.branches:
            out.update(b.candidates())
        return out

    def init_alpha(self, dtype=None) -> ArchitectureWeights:
        return ArchitectureWeights.zeros(self.candidates(), dtype=dtype)

    def declared_param_count(self) -> int:
        c = self.config
        w, k = c.width, c.merge_kernel
        n = 9 * w + w  # stem
        n += sum(s.param_count(w) for b in c.branches for s in b)
        n += 2 * k * k + 1  # merge attention
        return n + tail_param_count(w, c.out_channels)

    def forward(self, fused, alpha=None):
        s = _act(self.stem(fused))
        target, detail = (b(s, alpha) for b in self.branches)
        m = self.merge.attention_map(torch.cat([target, detail], dim=1))
        x = m * target + (1.0 - m) * detail
        x = _act(self.tail[0](x))
        x = _act(self.tail[1](x))
        x = self.tail[2](x)
        if self.config.task == "enhancement":
            return torch.sigmoid(x)
        return x


def tail_param_count(width: int, out_channels: int = 1) -> int:
    """Three 3x3 convs (w->w, w->w, w->out), biases included."""
    return 2 * (9 * width * width + width) + 9 * width * out_channels + out_channels


def init_params(module: nn.Module, generator: Optional[torch.Generator] = None, dtype=None) -> NetworkParams:
    """Kaiming-uniform conv kernels, zero biases; returns a fresh mapping."""
    params = NetworkParams()
    for name, p in module.named_parameters():
        t = torch.empty(p.shape, dtype=dtype or p.dtype)
        if name.endswith("bias"):
            t.zero_()
        else:
            nn.init.kaiming_uniform_(t, a=NEGATIVE_SLOPE, generator=generator)
        params[name] = t
    return params


def _as_config(config) -> SearchSpaceConfig:
    if isinstance(config, SearchSpaceConfig):
        return config
    if isinstance(config, dict):
        return parse_space_config(config)
    raise ConfigError(f"expected a search-space config, got {type(config).__name__}")


def build_fusion_network(config, generator=None, dtype=None) -> Tuple[FusionNetwork, NetworkParams]:
    """Build N_F and freshly initialized weights.

    The returned module exposes ``cell_specs``; fresh architecture weights
    come from ``network.init_alpha()`` (all-zero logits).
    """
    net = FusionNetwork(_as_config(config))
    if dtype is not None:
        net = net.to(dtype)
    return net, init_params(net, generator, dtype)


def build_task_head(config=None, generator=None, dtype=None) -> Tuple[TaskHead, NetworkParams]:
    if config is None or isinstance(config, dict):
        config = parse_task_head(config)
    elif isinstance(config, SearchSpaceConfig):
        config = config.task_head
    head = TaskHead(config)
    if dtype is not None:
        head = head.to(dtype)
    return head, init_params(head, generator, dtype)


def mixed_forward(cells: CellStack, alpha, params, inputs):
    """Relaxed forward over a cell stack with explicit weights."""
    return functional_call(cells, dict(params), (inputs, alpha))


def run(module: nn.Module, params, *args):
    """Stateless forward of any network module under ``params``."""
    return functional_call(module, dict(params), args)


def discretize(
    network: FusionNetwork, params: NetworkParams, arch: DiscreteArchitecture
) -> Tuple[FusionNetwork, NetworkParams]:
    """Single-candidate network keeping the chosen operators' weights."""
    choice = arch.as_dict()
    net = FusionNetwork(parse_space_config(discrete_space_dict(network.config, arch)))
    new_params = NetworkParams()
    for name, p in net.named_parameters():
        new_params[name] = params[_source_name(name, network, choice)].detach().clone()
    return net, new_params


def discrete_space_dict(config: SearchSpaceConfig, arch: DiscreteArchitecture) -> dict:
    """Plain config of the network that keeps only the chosen operators."""
    choice = arch.as_dict()
    raw = config.to_dict()
    cells_raw = []
    for spec in config.cells:
        edges = []
        for i, cands in enumerate(spec.edges):
            op = cands[choice[spec.edge_id(i)]]
            entry = {"id": op.id, "kind": op.kind}
            if op.kernel:
                entry["kernel"] = op.kernel
            edges.append([entry])
        cells_raw.append({"kind": spec.kind, "edges": edges})
    raw["cells"] = cells_raw
    return raw


def _source_name(name: str, network: FusionNetwork, choice) -> str:
    parts = name.split(".")
    # cells.cells.<i>.edges.<j>.ops.0.<rest>
    if len(parts) > 6 and parts[:2] == ["cells", "cells"] and parts[3] == "edges" and parts[5] == "ops":
        spec = network.cell_specs[int(parts[2])]
        parts[6] = str(choice[spec.edge_id(int(parts[4]))])
    return ".".join(parts)


def architecture_manifest(network, arch: DiscreteArchitecture) -> str:
    """Text export: one line per cell, kind followed by chosen operator ids."""
    lines = []
    for spec in network.cell_specs:
        ops = [arch.operator(e) for e in spec.edge_ids]
        lines.append(f"{spec.name} {spec.kind} " + " ".join(ops))
    return "\n".join(lines) + "\n"

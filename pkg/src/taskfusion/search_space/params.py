"""Parameter containers: network weights, relaxation logits, latency tables."""

from __future__ import annotations

from collections import OrderedDict
from dataclasses import dataclass
from typing import Dict, Iterable, Mapping, Sequence, Tuple

import numpy as np
import torch

from ..errors import ConfigError, DimensionError


class NetworkParams(OrderedDict):
    """Named parameter tensors with a flat-vector view.

    Names follow ``nn.Module.named_parameters`` so the mapping can be fed to
    ``torch.func.functional_call`` directly.
    """

    @classmethod
    def from_module(cls, module: torch.nn.Module) -> "NetworkParams":
        return cls((n, p.detach().clone()) for n, p in module.named_parameters())

    @property
    def numel(self) -> int:
        return sum(t.numel() for t in self.values())

    def flatten(self) -> torch.Tensor:
        if not self:
            return torch.zeros(0, dtype=torch.get_default_dtype())
        return torch.cat([t.reshape(-1) for t in self.values()])

    def unflatten(self, vector: torch.Tensor) -> "NetworkParams":
        if vector.numel() != self.numel:
            raise DimensionError(f"flat vector has {vector.numel()} entries, expected {self.numel}")
        out, offset = NetworkParams(), 0
        for name, t in self.items():
            out[name] = vector[offset : offset + t.numel()].view_as(t)
            offset += t.numel()
        return out

    def detach(self) -> "NetworkParams":
        return NetworkParams((n, t.detach()) for n, t in self.items())

    def clone(self) -> "NetworkParams":
        return NetworkParams((n, t.detach().clone()) for n, t in self.items())

    def requires_grad_(self, flag: bool = True) -> "NetworkParams":
        for t in self.values():
            t.requires_grad_(flag)
        return self

    def to(self, *args, **kwargs) -> "NetworkParams":
        return NetworkParams((n, t.to(*args, **kwargs)) for n, t in self.items())

    def prefixed(self, prefix: str) -> "NetworkParams":
        """Sub-mapping of names under ``prefix.`` with the prefix stripped."""
        p = prefix + "."
        return NetworkParams((n[len(p) :], t) for n, t in self.items() if n.startswith(p))


class ArchitectureWeights:
    """One logit vector per searchable edge, plus the candidate ids it ranges over."""

    def __init__(self, logits: Mapping[str, torch.Tensor], candidates: Mapping[str, Sequence[str]]):
        if list(logits) != list(candidates):
            raise ConfigError("logits and candidates must name the same edges in the same order")
        for edge, vec in logits.items():
            if vec.dim() != 1 or vec.numel() != len(candidates[edge]):
                raise DimensionError(
                    f"edge {edge!r}: {vec.numel()} logits for {len(candidates[edge])} candidates"
                )
        self.logits = OrderedDict(logits)
        self.candidates = OrderedDict((e, tuple(c)) for e, c in candidates.items())

    @classmethod
    def zeros(cls, candidates: Mapping[str, Sequence[str]], dtype=None) -> "ArchitectureWeights":
        dtype = dtype or torch.get_default_dtype()
        return cls({e: torch.zeros(len(c), dtype=dtype) for e, c in candidates.items()}, candidates)

    def __len__(self):
        return len(self.logits)

    def __getitem__(self, edge):
        return self.logits[edge]

    def __iter__(self):
        return iter(self.logits)

    @property
    def num_entries(self) -> int:
        return sum(v.numel() for v in self.logits.values())

    def normalized(self) -> Dict[str, torch.Tensor]:
        return OrderedDict((e, torch.softmax(v, dim=0)) for e, v in self.logits.items())

    def flatten(self) -> torch.Tensor:
        return torch.cat([v.reshape(-1) for v in self.logits.values()])

    def unflatten(self, vector: torch.Tensor) -> "ArchitectureWeights":
        if vector.numel() != self.num_entries:
            raise DimensionError(
                f"flat vector has {vector.numel()} entries, expected {self.num_entries}"
            )
        out, offset = OrderedDict(), 0
        for e, v in self.logits.items():
            out[e] = vector[offset : offset + v.numel()]
            offset += v.numel()
        return ArchitectureWeights(out, self.candidates)

    def with_logits(self, logits: Mapping[str, torch.Tensor]) -> "ArchitectureWeights":
        return ArchitectureWeights(logits, self.candidates)

    def detach(self) -> "ArchitectureWeights":
        return self.with_logits({e: v.detach() for e, v in self.logits.items()})

    def clone(self) -> "ArchitectureWeights":
        return self.with_logits({e: v.detach().clone() for e, v in self.logits.items()})

    def requires_grad_(self, flag: bool = True) -> "ArchitectureWeights":
        for v in self.logits.values():
            v.requires_grad_(flag)
        return self

    def one_hot(self, choices: Mapping[str, int], low: float = -1e9) -> "ArchitectureWeights":
        """Logits whose normalized weights are exactly one-hot on ``choices``."""
        out = OrderedDict()
        for e, v in self.logits.items():
            vec = torch.full_like(v.detach(), low)
            vec[choices[e]] = 0.0
            out[e] = vec
        return self.with_logits(out)


@dataclass(frozen=True)
class DiscreteArchitecture:
    """Chosen candidate index (and id) per edge."""

    choices: Tuple[Tuple[str, int], ...]
    operator_ids: Tuple[Tuple[str, str], ...] = ()

    def index(self, edge: str) -> int:
        return dict(self.choices)[edge]

    def as_dict(self) -> Dict[str, int]:
        return dict(self.choices)

    def operator(self, edge: str) -> str:
        return dict(self.operator_ids)[edge]


def derive_architecture(alpha: ArchitectureWeights) -> DiscreteArchitecture:
    """Per-edge argmax; ties go to the lowest candidate index."""
    choices, ops = [], []
    for edge, vec in alpha.logits.items():
        # np.argmax returns the first occurrence of the maximum
        idx = int(np.argmax(vec.detach().cpu().numpy()))
        choices.append((edge, idx))
        ops.append((edge, alpha.candidates[edge][idx]))
    return DiscreteArchitecture(tuple(choices), tuple(ops))


class LatencyTable(dict):
    """Operator id -> nonnegative cost (milliseconds or abstract units)."""

    def __init__(self, entries: Mapping[str, float] = (), **kwargs):
        super().__init__(entries, **kwargs)
        for op, v in self.items():
            if not np.isfinite(v) or v < 0:
                raise ConfigError(f"latency for {op!r} must be finite and nonnegative, got {v!r}")

    def check_covers(self, operator_ids: Iterable[str]) -> None:
        missing = sorted(set(operator_ids) - set(self))
        if missing:
            raise ConfigError(f"latency table has no entry for operator(s): {', '.join(missing)}")


def latency_regularizer(alpha: ArchitectureWeights, table: LatencyTable) -> torch.Tensor:
    """Expected latency under the relaxation: sum over edges of w_e . LAT."""
    table.check_covers(op for ops in alpha.candidates.values() for op in ops)
    total = None
    for edge, w in alpha.normalized().items():
        lat = torch.tensor([float(table[op]) for op in alpha.candidates[edge]], dtype=w.dtype)
        term = (w * lat).sum()
        total = term if total is None else total + term
    if total is None:
        return torch.zeros((), dtype=torch.get_default_dtype())
    return total


def discrete_latency(arch: DiscreteArchitecture, table: LatencyTable) -> float:
    """Latency of a derived architecture (sum over chosen operators)."""
    return float(sum(table[op] for _, op in arch.operator_ids))

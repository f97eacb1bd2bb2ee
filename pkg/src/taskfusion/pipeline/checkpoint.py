"""Checkpoint container.

A safetensors file (little-endian by format) holding named arrays under
``alpha/``, ``theta_F/`` and ``theta_T/`` plus one metadata entry with
canonical JSON (phase, seed, config hash, network configs, version).
"""

from __future__ import annotations

import hashlib
import json
import warnings
from collections import OrderedDict
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Dict, Optional

import torch
from safetensors import safe_open
from safetensors.torch import save_file

from .. import __version__
from ..errors import CheckpointError
from ..search_space import ArchitectureWeights, NetworkParams, derive_architecture

FORMAT = "taskfusion-checkpoint/1"
_META_KEY = "taskfusion"


def canonical_json(obj) -> str:
    return json.dumps(obj, sort_keys=True, separators=(",", ":"), allow_nan=False)


def config_hash(obj) -> str:
    return hashlib.sha256(canonical_json(obj).encode()).hexdigest()


def file_hash(path) -> str:
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()


@dataclass
class Checkpoint:
    phase: str
    seed: int
    config_hash: str
    space: Dict[str, Any]  # fusion network config (relaxed or discrete)
    theta_F: NetworkParams
    alpha: Optional[ArchitectureWeights] = None
    theta_T: NetworkParams = field(default_factory=NetworkParams)
    head: Optional[Dict[str, Any]] = None  # task head config
    notes: Dict[str, Any] = field(default_factory=dict)

    def metadata(self) -> Dict[str, Any]:
        meta = {
            "format": FORMAT,
            "version": __version__,
            "phase": self.phase,
            "seed": int(self.seed),
            "config_hash": self.config_hash,
            "space": self.space,
            "head": self.head,
            "notes": self.notes,
        }
        if self.alpha is not None:
            meta["candidates"] = {e: list(c) for e, c in self.alpha.candidates.items()}
            meta["architecture"] = dict(derive_architecture(self.alpha).operator_ids)
        return meta


def save_checkpoint(ckpt: Checkpoint, path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    tensors = OrderedDict()
    if ckpt.alpha is not None:
        for e, v in ckpt.alpha.logits.items():
            tensors[f"alpha/{e}"] = v
    for n, t in ckpt.theta_F.items():
        tensors[f"theta_F/{n}"] = t
    for n, t in ckpt.theta_T.items():
        tensors[f"theta_T/{n}"] = t
    tensors = {k: v.detach().cpu().contiguous().clone() for k, v in tensors.items()}
    save_file(tensors, str(path), metadata={_META_KEY: canonical_json(ckpt.metadata())})
    return path


def load_checkpoint(path, expected_hash: Optional[str] = None, allow_mismatch: bool = False) -> Checkpoint:
    """Read a checkpoint; a config-hash mismatch is an error unless overridden."""
    path = Path(path)
    if not path.is_file():
        raise CheckpointError(f"checkpoint {path} not found")
    try:
        with safe_open(str(path), framework="pt") as f:
            raw = (f.metadata() or {}).get(_META_KEY)
            tensors = {k: f.get_tensor(k) for k in f.keys()}
    except CheckpointError:
        raise
    except Exception as exc:  # corrupt or foreign file
        raise CheckpointError(f"cannot read checkpoint {path}: {exc}") from exc
    if raw is None:
        raise CheckpointError(f"{path} is not a taskfusion checkpoint (no metadata)")
    meta = json.loads(raw)
    if meta.get("format") != FORMAT:
        raise CheckpointError(f"{path}: unsupported checkpoint format {meta.get('format')!r}")
    if expected_hash is not None and meta["config_hash"] != expected_hash:
        msg = (
            f"{path}: config hash {meta['config_hash'][:12]} does not match the loading config "
            f"{expected_hash[:12]}"
        )
        if not allow_mismatch:
            raise CheckpointError(msg + " (pass the override flag to load anyway)")
        warnings.warn(msg + "; loading anyway", stacklevel=2)

    def group(prefix):
        p = prefix + "/"
        return [(k[len(p) :], v) for k, v in tensors.items() if k.startswith(p)]

    alpha = None
    if "candidates" in meta:
        logits = dict(group("alpha"))
        alpha = ArchitectureWeights(
            OrderedDict((e, logits[e]) for e in meta["candidates"]), meta["candidates"]
        )
    # safetensors does not keep insertion order; restore module order from the config
    return Checkpoint(
        phase=meta["phase"],
        seed=meta["seed"],
        config_hash=meta["config_hash"],
        space=meta["space"],
        theta_F=NetworkParams(group("theta_F")),
        alpha=alpha,
        theta_T=NetworkParams(group("theta_T")),
        head=meta.get("head"),
        notes=meta.get("notes", {}),
    )


def ordered_like(params: NetworkParams, module: torch.nn.Module) -> NetworkParams:
    """Reorder ``params`` to ``module.named_parameters()`` order, checking coverage."""
    names = [n for n, _ in module.named_parameters()]
    missing = [n for n in names if n not in params]
    if missing:
        raise CheckpointError(f"checkpoint lacks parameters: {', '.join(missing[:5])}")
    return NetworkParams((n, params[n]) for n in names)

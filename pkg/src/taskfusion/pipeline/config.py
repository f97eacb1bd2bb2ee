"""Experiment configuration and seed derivation."""

from __future__ import annotations

import dataclasses
import hashlib
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Dict, List, Optional

import yaml

from ..errors import ConfigError
from ..ias import SearchConfig
from ..losses import LossWeights
from ..pmi import MetaConfig
from .checkpoint import config_hash

PHASES = ("search", "meta", "joint")


def component_seed(seed: int, name: str) -> int:
    """Independent 31-bit seed per named component."""
    digest = hashlib.sha256(f"{int(seed)}:{name}".encode()).digest()
    return int.from_bytes(digest[:4], "little") & 0x7FFFFFFF


@dataclass
class JointConfig:
    epochs: int = 10
    lr: float = 1e-3
    optimizer: str = "adam"  # or "sgd"
    batch_size: int = 4
    freeze_fusion: bool = False
    val_fraction: float = 0.25

    def __post_init__(self):
        if self.optimizer not in ("adam", "sgd"):
            raise ConfigError(f"unknown joint optimizer {self.optimizer!r}")
        if self.epochs < 0 or self.batch_size < 1 or self.lr <= 0:
            raise ConfigError("joint epochs >= 0, batch_size >= 1 and lr > 0 required")
        if not 0 < self.val_fraction < 1:
            raise ConfigError("val_fraction must lie in (0, 1)")


@dataclass
class DataConfig:
    """Synthetic suite by default; directories replace it when given."""

    kinds: List[str] = field(default_factory=lambda: ["ivif", "ivif-night"])
    joint_kind: str = "ivif"
    pairs: int = 6
    image_size: int = 64
    search_dirs: List[str] = field(default_factory=list)
    meta_manifest: Optional[str] = None
    joint_dir: Optional[str] = None


@dataclass
class ExperimentConfig:
    seed: int = 0
    phases: Dict[str, bool] = field(default_factory=lambda: {p: True for p in PHASES})
    patch_size: int = 64
    augment_flip: bool = True
    augment_rotate: bool = True
    meta_val_fraction: float = 0.25
    latency_path: Optional[str] = None
    space: Dict[str, Any] = field(default_factory=dict)
    search: SearchConfig = field(default_factory=SearchConfig)
    meta: MetaConfig = field(default_factory=MetaConfig)
    joint: JointConfig = field(default_factory=JointConfig)
    loss: LossWeights = field(default_factory=LossWeights)
    data: DataConfig = field(default_factory=DataConfig)

    def __post_init__(self):
        unknown = set(self.phases) - set(PHASES)
        if unknown:
            raise ConfigError(f"unknown phase toggle(s): {', '.join(sorted(unknown))}")
        self.phases = {p: bool(self.phases.get(p, True)) for p in PHASES}
        if self.patch_size < 4:
            raise ConfigError("patch_size must be >= 4")
        if self.data.image_size < self.patch_size and not (self.data.search_dirs or self.data.joint_dir):
            raise ConfigError(
                f"patch size {self.patch_size} exceeds synthetic image size {self.data.image_size}"
            )

    @property
    def augment(self):
        return (self.augment_flip, self.augment_rotate)

    def to_dict(self) -> Dict[str, Any]:
        return dataclasses.asdict(self)

    def hash(self) -> str:
        return config_hash(self.to_dict())


_SECTIONS = {
    "search": SearchConfig,
    "meta": MetaConfig,
    "joint": JointConfig,
    "loss": LossWeights,
    "data": DataConfig,
}


def _build(cls, raw, where):
    if raw is None:
        return cls()
    if isinstance(raw, cls):
        return raw
    if not isinstance(raw, dict):
        raise ConfigError(f"{where}: expected a mapping")
    names = {f.name for f in dataclasses.fields(cls)}
    unknown = set(raw) - names
    if unknown:
        raise ConfigError(f"{where}: unknown key(s) {', '.join(sorted(unknown))}")
    return cls(**raw)


def experiment_from_dict(raw: Optional[Dict[str, Any]]) -> ExperimentConfig:
    raw = dict(raw or {})
    kwargs = {}
    for key, cls in _SECTIONS.items():
        if key in raw:
            kwargs[key] = _build(cls, raw.pop(key), key)
    return _build(ExperimentConfig, {**raw, **kwargs}, "experiment")


def load_experiment_config(path) -> ExperimentConfig:
    raw = yaml.safe_load(Path(path).read_text()) or {}
    if not isinstance(raw, dict):
        raise ConfigError(f"{path}: top level must be a mapping")
    return experiment_from_dict(raw)

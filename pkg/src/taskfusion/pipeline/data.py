"""Image-pair ingestion and patch extraction."""

from __future__ import annotations

import logging
import re
import warnings
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np
import torch
from PIL import Image

from ..errors import ConfigError, DimensionError

log = logging.getLogger(__name__)

IMAGE_SUFFIXES = {".png", ".jpg", ".jpeg", ".bmp", ".tif", ".tiff"}
# ITU-R BT.601 luma and full-range chroma
LUMA = (0.299, 0.587, 0.114)
_PAIR_RE = re.compile(r"^(?P<id>.+)_(?P<role>[ABM])$")


@dataclass
class ImagePair:
    """Two registered grayscale sources in [0, 1] plus optional extras."""

    id: str
    a: np.ndarray
    b: np.ndarray
    chroma: Optional[np.ndarray] = None  # (H, W, 2) Cb, Cr in [0, 1]
    mask: Optional[np.ndarray] = None

    def __post_init__(self):
        if self.a.shape != self.b.shape:
            raise DimensionError(f"pair {self.id}: sources differ in size {self.a.shape} vs {self.b.shape}")
        for name in ("a", "b"):
            v = getattr(self, name)
            if v.ndim != 2:
                raise DimensionError(f"pair {self.id}: source {name} must be 2-D, got {v.shape}")
            if v.size and (v.min() < 0 or v.max() > 1):
                raise ConfigError(f"pair {self.id}: source {name} outside [0, 1]")

    @property
    def shape(self) -> Tuple[int, int]:
        return self.a.shape


def rgb_to_ycbcr(rgb: np.ndarray) -> Tuple[np.ndarray, np.ndarray]:
    """(H, W, 3) unit-range RGB -> luma (H, W) and chroma (H, W, 2)."""
    r, g, b = rgb[..., 0], rgb[..., 1], rgb[..., 2]
    y = LUMA[0] * r + LUMA[1] * g + LUMA[2] * b
    cb = 0.5 + (b - y) / 1.772
    cr = 0.5 + (r - y) / 1.402
    return y, np.stack([cb, cr], axis=-1)


def ycbcr_to_rgb(y: np.ndarray, chroma: np.ndarray) -> np.ndarray:
    cb, cr = chroma[..., 0] - 0.5, chroma[..., 1] - 0.5
    r = y + 1.402 * cr
    b = y + 1.772 * cb
    g = (y - LUMA[0] * r - LUMA[2] * b) / LUMA[1]
    return np.clip(np.stack([r, g, b], axis=-1), 0.0, 1.0)


def read_image(path) -> Tuple[np.ndarray, Optional[np.ndarray]]:
    """Load an image as unit-range luma; chroma is returned for color files."""
    with Image.open(path) as im:
        if im.mode in ("I;16", "I;16B", "I;16L", "I"):
            arr = np.asarray(im, dtype=np.float64)
            return np.clip(arr / 65535.0, 0.0, 1.0), None
        if im.mode == "L":
            return np.asarray(im, dtype=np.float64) / 255.0, None
        if im.mode == "LA":
            return np.asarray(im.convert("L"), dtype=np.float64) / 255.0, None
        rgb = np.asarray(im.convert("RGB"), dtype=np.float64) / 255.0
    y, chroma = rgb_to_ycbcr(rgb)
    return np.clip(y, 0.0, 1.0), chroma


def write_image(path, img: np.ndarray) -> None:
    """Write a unit-range gray (H, W) or RGB (H, W, 3) image as 8-bit."""
    arr = np.clip(np.round(np.asarray(img, dtype=np.float64) * 255.0), 0, 255).astype(np.uint8)
    Image.fromarray(arr).save(path)


def _scan(directory: Path) -> Dict[str, Dict[str, Path]]:
    groups: Dict[str, Dict[str, Path]] = {}
    for p in sorted(directory.iterdir()):
        if p.suffix.lower() not in IMAGE_SUFFIXES:
            continue
        m = _PAIR_RE.match(p.stem)
        if not m:
            warnings.warn(f"skipping {p.name}: name does not follow <id>_A / <id>_B", stacklevel=3)
            continue
        groups.setdefault(m["id"], {})[m["role"]] = p
    return groups


def ingest(directory, require_masks: bool = False) -> List[ImagePair]:
    """Read ``<id>_A.*`` / ``<id>_B.*`` pairs (and optional ``<id>_M.*`` masks).

    Color sources are reduced to luma; the chroma of the color source (B
    preferred) is kept for recombination. Unpaired or size-mismatched pairs are
    skipped with a warning. Pairs come back sorted by id.
    """
    directory = Path(directory)
    if not directory.is_dir():
        raise ConfigError(f"data directory {directory} does not exist")
    pairs, skipped = [], []
    for pid, files in sorted(_scan(directory).items()):
        if "A" not in files or "B" not in files:
            skipped.append(f"{pid} (missing {'A' if 'A' not in files else 'B'})")
            continue
        a, chroma_a = read_image(files["A"])
        b, chroma_b = read_image(files["B"])
        if a.shape != b.shape:
            skipped.append(f"{pid} (size {a.shape} vs {b.shape})")
            continue
        mask = None
        if "M" in files:
            m, _ = read_image(files["M"])
            mask = (m > 0.5).astype(np.float64) if m.shape == a.shape else None
        if require_masks and mask is None:
            skipped.append(f"{pid} (no mask)")
            continue
        pairs.append(ImagePair(pid, a, b, chroma_b if chroma_b is not None else chroma_a, mask))
    if skipped:
        warnings.warn(f"{directory}: skipped {len(skipped)} pair(s): {', '.join(skipped)}", stacklevel=2)
    if not pairs:
        raise ConfigError(f"no usable image pairs in {directory}")
    return pairs


@dataclass
class PatchSet:
    """Aligned patches from both modalities, shaped (N, 1, s, s)."""

    a: torch.Tensor
    b: torch.Tensor
    ids: Tuple[str, ...]
    mask: Optional[torch.Tensor] = None
    extras: Dict[str, torch.Tensor] = field(default_factory=dict)

    def __len__(self) -> int:
        return self.a.shape[0]

    @property
    def pair_ids(self) -> Tuple[str, ...]:
        return tuple(i.split("#", 1)[0] for i in self.ids)

    def subset(self, index) -> "PatchSet":
        idx = torch.as_tensor(np.asarray(index, dtype=np.int64))
        return PatchSet(
            self.a[idx],
            self.b[idx],
            tuple(self.ids[int(i)] for i in idx),
            None if self.mask is None else self.mask[idx],
            {k: v[idx] for k, v in self.extras.items()},
        )

    def tensors(self):
        if self.mask is None:
            return self.a, self.b
        return self.a, self.b, self.mask


def _augment(arrays: Sequence[np.ndarray], flip: bool, k: int):
    out = []
    for x in arrays:
        if flip:
            x = x[:, ::-1]
        out.append(np.ascontiguousarray(np.rot90(x, k)))
    return out


def patchify(
    pairs: Sequence[ImagePair],
    size: int,
    augment=False,
    seed: int = 0,
    stride: Optional[int] = None,
    dtype=torch.float32,
) -> PatchSet:
    """Grid crops of ``size`` (step ``stride``, default ``size``) from every pair.

    ``augment`` is a bool or a ``(flip, rotate)`` tuple; the sampled flip and
    quarter-turn of a patch are applied to A, B and the mask alike.
    """
    flip_on, rot_on = (augment, augment) if isinstance(augment, bool) else tuple(augment)
    stride = stride or size
    if size < 1 or stride < 1:
        raise ConfigError("patch size and stride must be positive")
    rng = np.random.default_rng(seed)
    has_mask = all(p.mask is not None for p in pairs)
    a_out, b_out, m_out, ids = [], [], [], []
    for pair in pairs:
        h, w = pair.shape
        if size > min(h, w):
            raise ConfigError(f"patch size {size} exceeds image {pair.id} of size {h}x{w}")
        k = 0
        for top in range(0, h - size + 1, stride):
            for left in range(0, w - size + 1, stride):
                crop = [x[top : top + size, left : left + size] for x in (pair.a, pair.b)]
                if has_mask:
                    crop.append(pair.mask[top : top + size, left : left + size])
                flip = bool(rng.random() < 0.5) if flip_on else False
                turns = int(rng.integers(4)) if rot_on else 0
                crop = _augment(crop, flip, turns)
                a_out.append(crop[0])
                b_out.append(crop[1])
                if has_mask:
                    m_out.append(crop[2])
                ids.append(f"{pair.id}#{k}")
                k += 1
    if not ids:
        raise ConfigError("no patches extracted")

    def stack(xs):
        return torch.as_tensor(np.stack(xs)[:, None], dtype=dtype)

    return PatchSet(stack(a_out), stack(b_out), tuple(ids), stack(m_out) if has_mask else None)


def split_pairs(pairs: Sequence[ImagePair], fraction: float, seed: int):
    """Disjoint (first, second) split by pair; ``fraction`` goes to the first."""
    if len(pairs) < 2:
        raise ConfigError("need at least two pairs to split")
    order = np.random.default_rng(seed).permutation(len(pairs))
    cut = min(max(int(round(fraction * len(pairs))), 1), len(pairs) - 1)
    first = sorted(order[:cut].tolist())
    second = sorted(order[cut:].tolist())
    return [pairs[i] for i in first], [pairs[i] for i in second]

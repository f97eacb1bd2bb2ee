"""Synthetic two-modality scenes.

A scene is shared geometry: warm objects (soft discs) over a textured,
shaded background. Each task kind renders the same scene with its own
intensity mapping, so kinds differ in distribution but not in content.
"""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path
from typing import List

import numpy as np
from scipy import ndimage

from ..errors import ConfigError
from .data import ImagePair, write_image

KINDS = ("ivif", "ivif-night", "medical")


@dataclass
class Scene:
    objects: np.ndarray  # soft object map in [0, 1]
    texture: np.ndarray  # zero-mean detail, roughly unit range
    shading: np.ndarray  # smooth illumination in [0, 1]
    heat: np.ndarray  # per-object temperature map in [0, 1]


def make_scene(rng: np.random.Generator, size: int) -> Scene:
    yy, xx = np.mgrid[0:size, 0:size].astype(np.float64)
    objects = np.zeros((size, size))
    heat = np.zeros((size, size))
    for _ in range(int(rng.integers(2, 5))):
        cy, cx = rng.uniform(0.15, 0.85, size=2) * size
        r = rng.uniform(0.08, 0.2) * size
        d = np.hypot(yy - cy, xx - cx)
        disc = np.clip((r - d) / 1.5 + 0.5, 0.0, 1.0)
        t = rng.uniform(0.6, 1.0)
        heat = np.maximum(heat, disc * t)
        objects = np.maximum(objects, disc)
    texture = np.zeros((size, size))
    for _ in range(3):
        theta = rng.uniform(0, np.pi)
        freq = rng.uniform(0.15, 0.6)
        phase = rng.uniform(0, 2 * np.pi)
        texture += np.sin(freq * (np.cos(theta) * xx + np.sin(theta) * yy) + phase) / 3.0
    texture += 0.5 * ndimage.gaussian_filter(rng.standard_normal((size, size)), 1.0)
    texture /= max(np.abs(texture).max(), 1e-12)
    shading = ndimage.gaussian_filter(rng.standard_normal((size, size)), size / 6.0)
    shading = (shading - shading.min()) / max(np.ptp(shading), 1e-12)
    return Scene(objects, texture, shading, heat)


def render(scene: Scene, kind: str):
    """(A, B, mask) for a task kind; all in [0, 1]."""
    o, t, s, h = scene.objects, scene.texture, scene.shading, scene.heat
    if kind == "ivif":
        a = 0.12 + 0.08 * s + 0.75 * h
        b = (0.35 + 0.25 * t + 0.3 * s) * (1.0 - 0.45 * o)
    elif kind == "ivif-night":
        a = 0.9 - 0.65 * h - 0.1 * s
        b = (0.12 + 0.08 * t + 0.1 * s) * (1.0 - 0.3 * o)
    elif kind == "medical":
        edges = np.hypot(*np.gradient(ndimage.gaussian_filter(o, 1.0)))
        a = 0.2 + 0.5 * s * (1.0 - o) + 3.0 * edges + 0.1 * t
        b = 0.05 + 0.9 * h**2
    else:
        raise ConfigError(f"unknown synthetic kind {kind!r}; expected one of {', '.join(KINDS)}")
    return np.clip(a, 0.0, 1.0), np.clip(b, 0.0, 1.0), (o > 0.5).astype(np.float64)


def synth_pairs(kind: str, n: int, size: int, seed: int) -> List[ImagePair]:
    """``n`` pairs of one kind; equal seeds give the same scenes across kinds.

    Ids are ``<kind>-<seed hex>-<index>`` so different seeds never collide.
    """
    if n < 1 or size < 8:
        raise ConfigError("need n >= 1 and size >= 8")
    rng = np.random.default_rng(seed)
    out = []
    for i in range(n):
        a, b, m = render(make_scene(rng, size), kind)
        out.append(ImagePair(f"{kind}-{seed:x}-{i:03d}", a, b, None, m))
    return out


def write_pairs(pairs: List[ImagePair], out_dir) -> Path:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    for p in pairs:
        write_image(out / f"{p.id}_A.png", p.a)
        write_image(out / f"{p.id}_B.png", p.b)
        if p.mask is not None:
            write_image(out / f"{p.id}_M.png", p.mask)
    return out

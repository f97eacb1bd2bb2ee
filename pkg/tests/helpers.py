"""Shared test utilities: central differences and small fixtures."""

import numpy as np
import torch


def central_difference(fn, x: torch.Tensor, h: float = 1e-6) -> torch.Tensor:
    """Numerical gradient of scalar ``fn`` at ``x`` (float64)."""
    x = x.detach().clone()
    grad = torch.zeros_like(x)
    flat, g = x.view(-1), grad.view(-1)
    for i in range(flat.numel()):
        old = flat[i].item()
        flat[i] = old + h
        up = float(fn(x))
        flat[i] = old - h
        down = float(fn(x))
        flat[i] = old
        g[i] = (up - down) / (2 * h)
    return grad


def autograd_gradient(fn, x: torch.Tensor) -> torch.Tensor:
    x = x.detach().clone().requires_grad_(True)
    (g,) = torch.autograd.grad(fn(x), x)
    return g


def relative_error(a: torch.Tensor, b: torch.Tensor) -> float:
    den = max(float(a.norm()), float(b.norm()), 1e-30)
    return float((a - b).norm()) / den


def gradient_error(fn, x: torch.Tensor, h: float = 1e-6) -> float:
    return relative_error(autograd_gradient(fn, x), central_difference(fn, x, h))


def smooth_image(seed: int, size: int = 8, dtype=torch.float64) -> torch.Tensor:
    """Random image in (0.1, 0.9), shaped (1, 1, size, size)."""
    rng = np.random.default_rng(seed)
    return torch.as_tensor(0.1 + 0.8 * rng.random((1, 1, size, size)), dtype=dtype)


def natural_fixtures():
    """Three 8-bit natural test images, cropped to 128x128."""
    from skimage import data

    return [np.asarray(f())[:128, :128] for f in (data.camera, data.moon, data.coins)]


TINY_SPACE = {"width": 4, "cells": [{"kind": "SC", "edges": 2, "candidates": ["3-DC", "CA", "skip"]}]}


def tiny_config(seed: int = 0, **sections):
    """Experiment small enough for a full pipeline run in a few seconds."""
    from taskfusion.pipeline import experiment_from_dict

    raw = {
        "seed": seed,
        "patch_size": 16,
        "space": TINY_SPACE,
        "search": {"epochs": 2, "inner_steps": 2, "batch_size": 2},
        "meta": {"K": 1, "outer_iters": 2},
        "joint": {"epochs": 2, "batch_size": 4},
        "data": {"pairs": 4, "image_size": 32},
    }
    for key, value in sections.items():
        raw[key] = {**raw[key], **value} if isinstance(raw.get(key), dict) else value
    return experiment_from_dict(raw)

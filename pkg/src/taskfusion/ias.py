"""Implicit architecture search.

Alternates ``T`` plain gradient steps on the network weights with one
architecture step driven by a Gauss-Newton approximation of the implicit
hypergradient::

    G = grad_a L_s - <grad_w L, grad_w L_s> / (<grad_w L, grad_w L> + eps) * grad_a L

where ``L`` is the fusion loss on the weight-update split and ``L_s`` the
latency-regularized search loss on the architecture-update split.
"""

from __future__ import annotations

import logging
import time
import warnings
from dataclasses import dataclass, field
from typing import Callable, Dict, List, Optional, Sequence

import numpy as np
import torch

from .errors import ConfigError, DimensionError, IllConditionedWarning, NonFiniteLossError
from .losses import DEFAULT_WEIGHTS, feature_richness_loss
from .search_space import (
    ArchitectureWeights,
    DiscreteArchitecture,
    LatencyTable,
    NetworkParams,
    derive_architecture,
    latency_regularizer,
    run,
)

log = logging.getLogger(__name__)


@dataclass
class SearchConfig:
    inner_steps: int = 20
    lam: float = 0.0
    epochs: int = 1
    inner_lr: float = 1e-3
    alpha_lr: float = 3e-4
    eps: float = 1e-12
    batch_size: int = 4
    seed: int = 0

    def __post_init__(self):
        if self.inner_steps < 1:
            raise ConfigError("inner_steps (T) must be >= 1")
        if self.eps <= 0:
            raise ConfigError("eps must be > 0")
        if self.lam < 0:
            raise ConfigError("lambda must be >= 0")
        if self.epochs < 0 or self.batch_size < 1:
            raise ConfigError("epochs must be >= 0 and batch_size >= 1")


@dataclass
class GradientBundle:
    """Flat gradients at the current (alpha, weights).

    ``theta_inner``/``theta_search`` live in weight space, ``alpha_inner``/
    ``alpha_search`` in architecture space.
    """

    theta_inner: torch.Tensor
    theta_search: torch.Tensor
    alpha_inner: torch.Tensor
    alpha_search: torch.Tensor

    def __post_init__(self):
        if self.theta_inner.shape != self.theta_search.shape:
            raise DimensionError(
                f"weight-space gradients differ: {tuple(self.theta_inner.shape)} vs "
                f"{tuple(self.theta_search.shape)}"
            )
        if self.alpha_inner.shape != self.alpha_search.shape:
            raise DimensionError(
                f"architecture-space gradients differ: {tuple(self.alpha_inner.shape)} vs "
                f"{tuple(self.alpha_search.shape)}"
            )

    def norms(self) -> Dict[str, float]:
        return {k: float(getattr(self, k).norm()) for k in ("theta_inner", "theta_search", "alpha_inner", "alpha_search")}


def gauss_newton_coefficient(bundle: GradientBundle, eps: float = 1e-12) -> torch.Tensor:
    g = bundle.theta_inner
    denom = torch.dot(g, g)
    if float(denom) < eps:
        warnings.warn(
            f"squared inner gradient norm {float(denom):.3e} is below eps={eps:.1e}; "
            "weights are at or near the inner optimum and the correction is ill-conditioned",
            IllConditionedWarning,
            stacklevel=3,
        )
    return torch.dot(g, bundle.theta_search) / (denom + eps)


def implicit_alpha_gradient(bundle: GradientBundle, eps: float = 1e-12) -> torch.Tensor:
    """Gauss-Newton implicit architecture gradient."""
    if eps <= 0:
        raise ConfigError("eps must be > 0")
    coef = gauss_newton_coefficient(bundle, eps)
    return bundle.alpha_search - coef * bundle.alpha_inner


def inner_train(
    params: NetworkParams,
    loss_fn: Callable[[NetworkParams, int], torch.Tensor],
    steps: int,
    lr: float,
) -> NetworkParams:
    """``steps`` plain gradient-descent steps; ``loss_fn(params, step)``."""
    if steps < 0:
        raise ConfigError("steps must be >= 0")
    current = NetworkParams((n, t.detach().clone()) for n, t in params.items())
    names = list(current)
    for step in range(steps):
        for t in current.values():
            t.requires_grad_(True)
        loss = loss_fn(current, step)
        if not torch.isfinite(loss):
            value = float(loss.detach())
            raise NonFiniteLossError(f"non-finite inner loss {value} at step {step}", step=step, value=value)
        if not names:
            continue
        grads = torch.autograd.grad(loss, [current[n] for n in names], allow_unused=True)
        current = NetworkParams(
            (n, (current[n] - lr * g).detach() if g is not None else current[n].detach())
            for n, g in zip(names, grads)
        )
    return current.detach()


def fusion_batch_loss(network, alpha, params, batch, loss_fn=None):
    """Fusion loss of ``network`` on one ``(img_a, img_b, ...)`` batch."""
    loss_fn = loss_fn or default_fusion_loss
    a, b = batch[0], batch[1]
    return loss_fn(run(network, params, a, b, alpha), a, b)


def default_fusion_loss(fused, a, b):
    return feature_richness_loss(fused, a, b, DEFAULT_WEIGHTS)


def search_objective(network, alpha, params, batch, lam: float, table: LatencyTable, loss_fn=None):
    """Fusion loss plus ``lam`` times the expected latency of ``alpha``."""
    value = fusion_batch_loss(network, alpha, params, batch, loss_fn)
    if lam == 0:
        return value
    return value + lam * latency_regularizer(alpha, table)


def _grads(loss, tensors):
    if not tensors:
        return torch.zeros(0, dtype=loss.dtype)
    gs = torch.autograd.grad(loss, tensors, allow_unused=True, retain_graph=True)
    return torch.cat([(g if g is not None else torch.zeros_like(t)).reshape(-1) for g, t in zip(gs, tensors)])


def compute_bundle(network, alpha, params, inner_batch, search_batch, lam, table, loss_fn=None):
    """Gradients of the inner loss (weight split) and search loss (architecture split).

    Returns ``(bundle, inner_loss, search_loss, fusion_loss_on_search_split)``.
    """
    theta = NetworkParams((n, t.detach().clone().requires_grad_(True)) for n, t in params.items())
    arch = alpha.clone().requires_grad_(True)
    th, al = list(theta.values()), list(arch.logits.values())

    inner = fusion_batch_loss(network, arch, theta, inner_batch, loss_fn)
    fusion = fusion_batch_loss(network, arch, theta, search_batch, loss_fn)
    search = fusion + lam * latency_regularizer(arch, table) if lam else fusion
    bundle = GradientBundle(
        theta_inner=_grads(inner, th),
        theta_search=_grads(search, th),
        alpha_inner=_grads(inner, al),
        alpha_search=_grads(search, al),
    )
    return bundle, float(inner.detach()), float(search.detach()), float(fusion.detach())


@dataclass
class SearchResult:
    alpha: ArchitectureWeights
    params: NetworkParams
    history: List[Dict[str, float]]
    architecture: DiscreteArchitecture
    wall_times: List[float] = field(default_factory=list)


def _split_halves(patches, rng: np.random.Generator):
    n = len(patches)
    if n < 2:
        raise ConfigError("search needs at least 2 samples per dataset to split")
    perm = rng.permutation(n)
    half = n // 2
    return patches.subset(perm[:half]), patches.subset(perm[half:])


def _batches(patches, batch_size, rng):
    order = rng.permutation(len(patches))
    return [patches.subset(order[i : i + batch_size]).tensors() for i in range(0, len(order), batch_size)]


def search(
    network,
    datasets: Sequence,
    config: SearchConfig,
    table: LatencyTable,
    params: Optional[NetworkParams] = None,
    alpha: Optional[ArchitectureWeights] = None,
    loss_fn=None,
) -> SearchResult:
    """Alternate inner weight training and implicit architecture updates.

    ``datasets`` holds one patch set per fusion task; epoch ``e`` uses task
    ``e mod M`` (round robin). Each task set is split once, in half, into a
    weight-update part and an architecture-update part.
    """
    if not datasets:
        raise ConfigError("search needs at least one dataset")
    rng = np.random.default_rng(config.seed)
    if params is None:
        from .search_space import init_params

        params = init_params(network, torch.Generator().manual_seed(config.seed))
    alpha = (alpha or network.init_alpha()).clone()
    table.check_covers(op for ops in alpha.candidates.values() for op in ops)
    splits = [_split_halves(d, rng) for d in datasets]

    history, wall_times = [], []
    for epoch in range(config.epochs):
        start = time.perf_counter()
        weight_half, arch_half = splits[epoch % len(splits)]
        weight_batches = _batches(weight_half, config.batch_size, rng)
        arch_batches = _batches(arch_half, config.batch_size, rng)
        cursor = 0
        fus_vals, search_vals = [], []
        for arch_batch in arch_batches:

            def inner_loss(p, step, _start=cursor):
                batch = weight_batches[(_start + step) % len(weight_batches)]
                return fusion_batch_loss(network, alpha, p, batch, loss_fn)

            params = inner_train(params, inner_loss, config.inner_steps, config.inner_lr)
            cursor += config.inner_steps
            inner_batch = weight_batches[cursor % len(weight_batches)]
            bundle, _, search_value, fusion_value = compute_bundle(
                network, alpha, params, inner_batch, arch_batch, config.lam, table, loss_fn
            )
            g_alpha = implicit_alpha_gradient(bundle, config.eps)
            if not torch.isfinite(g_alpha).all():
                norms = bundle.norms()
                log.error("non-finite architecture gradient at epoch %d; bundle norms %s", epoch, norms)
                raise NonFiniteLossError(
                    f"non-finite architecture gradient at epoch {epoch} (bundle norms {norms})",
                    step=epoch,
                    context=norms,
                )
            alpha = alpha.unflatten(alpha.flatten().detach() - config.alpha_lr * g_alpha.detach())
            fus_vals.append(fusion_value)
            search_vals.append(search_value)
        reg = float(latency_regularizer(alpha, table))
        history.append(
            {
                "epoch": epoch,
                "loss_F": float(np.mean(fus_vals)),
                "loss_alpha": float(np.mean(search_vals)),
                "reg": reg,
            }
        )
        wall_times.append(time.perf_counter() - start)
        log.info("search epoch %d: loss_F=%.6f loss_alpha=%.6f reg=%.4f", epoch, history[-1]["loss_F"], history[-1]["loss_alpha"], reg)
    return SearchResult(alpha, params, history, derive_architecture(alpha), wall_times)

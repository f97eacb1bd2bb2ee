"""Pretext meta initialization.

Learns an initialization ``omega`` over several fusion tasks: each task
adapts ``omega`` with ``K`` gradient steps on its train split, and the sum of
the adapted losses on the validation splits is minimized over ``omega``.

Loss callables have the form ``loss_fn(params, data) -> scalar`` so the same
code drives the fusion network and closed-form quadratic fixtures.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from typing import Any, Callable, Dict, List, Sequence, Tuple

import torch

from .errors import ConfigError, NonFiniteLossError
from .search_space import NetworkParams

log = logging.getLogger(__name__)

LossFn = Callable[[NetworkParams, Any], torch.Tensor]


@dataclass
class MetaConfig:
    K: int = 4
    inner_lr: float = 1e-3
    outer_lr: float = 1e-4
    outer_iters: int = 100
    first_order: bool = True
    outer_optimizer: str = "sgd"  # or "adam"

    def __post_init__(self):
        if self.K < 0:
            raise ConfigError("K must be >= 0")
        if self.inner_lr <= 0 or self.outer_lr <= 0:
            raise ConfigError("learning rates must be > 0")
        if self.outer_iters < 0:
            raise ConfigError("outer_iters must be >= 0")
        if self.outer_optimizer not in ("sgd", "adam"):
            raise ConfigError(f"unknown outer optimizer {self.outer_optimizer!r}")


@dataclass
class MetaTask:
    """One fusion task with disjoint train/validation data.

    ``train``/``val`` are whatever ``loss_fn`` accepts; when both expose
    ``ids`` the splits are checked for overlap.
    """

    id: str
    train: Any
    val: Any
    kind: str = "synthetic"

    def __post_init__(self):
        a, b = getattr(self.train, "ids", None), getattr(self.val, "ids", None)
        if a is not None and b is not None:
            shared = set(a) & set(b)
            if shared:
                raise ConfigError(
                    f"task {self.id!r}: train and validation splits share {len(shared)} sample(s), "
                    f"e.g. {sorted(shared)[0]!r}"
                )


def _sorted(tasks: Sequence[MetaTask]) -> List[MetaTask]:
    if not tasks:
        raise ConfigError("meta objective needs at least one task")
    return sorted(tasks, key=lambda t: t.id)


def inner_adapt(
    omega: NetworkParams,
    task: MetaTask,
    loss_fn: LossFn,
    K: int,
    lr: float,
    create_graph: bool = False,
) -> NetworkParams:
    """``K`` gradient steps on the task's train split starting at ``omega``.

    With ``create_graph`` the result stays differentiable w.r.t. ``omega``;
    otherwise it is detached.
    """
    if K < 0:
        raise ConfigError("K must be >= 0")
    names = list(omega)
    if create_graph:
        theta = NetworkParams(omega)
    else:
        theta = NetworkParams((n, t.detach().clone().requires_grad_(True)) for n, t in omega.items())
    for step in range(K):
        loss = loss_fn(theta, task.train)
        if not torch.isfinite(loss):
            raise NonFiniteLossError(
                f"task {task.id!r}: non-finite inner loss {float(loss.detach())} at step {step}",
                step=step,
                value=float(loss.detach()),
                context={"task": task.id},
            )
        grads = torch.autograd.grad(loss, [theta[n] for n in names], create_graph=create_graph, allow_unused=True)
        theta = NetworkParams(
            (n, theta[n] - lr * g if g is not None else theta[n]) for n, g in zip(names, grads)
        )
        if not create_graph:
            theta = NetworkParams((n, t.detach().requires_grad_(True)) for n, t in theta.items())
    return theta if create_graph else theta.detach()


def _adapted_for_objective(omega, task, loss_fn, K, lr, first_order):
    if not first_order:
        return inner_adapt(omega, task, loss_fn, K, lr, create_graph=True)
    adapted = inner_adapt(omega, task, loss_fn, K, lr)
    # value of the adapted weights, gradient of identity w.r.t. omega
    return NetworkParams((n, omega[n] + (adapted[n] - omega[n]).detach()) for n in omega)


def task_losses(
    omega: NetworkParams,
    tasks: Sequence[MetaTask],
    loss_fn: LossFn,
    K: int,
    lr: float,
    first_order: bool = True,
) -> List[Tuple[str, torch.Tensor]]:
    """Per-task validation losses of the adapted weights, sorted by task id."""
    out = []
    for task in _sorted(tasks):
        theta = _adapted_for_objective(omega, task, loss_fn, K, lr, first_order)
        value = loss_fn(theta, task.val)
        if not torch.isfinite(value):
            raise NonFiniteLossError(
                f"task {task.id!r}: non-finite validation loss {float(value.detach())}",
                value=float(value.detach()),
                context={"task": task.id},
            )
        out.append((task.id, value))
    return out


def meta_objective(
    omega: NetworkParams,
    tasks: Sequence[MetaTask],
    loss_fn: LossFn,
    K: int,
    lr: float,
    first_order: bool = True,
) -> torch.Tensor:
    """Sum over tasks of the adapted validation loss.

    Differentiable w.r.t. ``omega``: through the adaptation when
    ``first_order`` is false, else with the inner trajectory treated as a
    constant shift (the gradient at the adapted weights is used directly).
    """
    total = None
    for _, v in task_losses(omega, tasks, loss_fn, K, lr, first_order):
        total = v if total is None else total + v
    return total


def meta_gradient(
    omega: NetworkParams, tasks: Sequence[MetaTask], loss_fn: LossFn, config: MetaConfig
) -> Tuple[NetworkParams, torch.Tensor, List[Tuple[str, float]]]:
    """Outer gradient, objective value and per-task adapted losses."""
    w = NetworkParams((n, t.detach().clone().requires_grad_(True)) for n, t in omega.items())
    per_task = task_losses(w, tasks, loss_fn, config.K, config.inner_lr, config.first_order)
    total = per_task[0][1]
    for _, v in per_task[1:]:
        total = total + v
    names = list(w)
    grads = torch.autograd.grad(total, [w[n] for n in names], allow_unused=True)
    g = NetworkParams(
        (n, gr.detach() if gr is not None else torch.zeros_like(w[n])) for n, gr in zip(names, grads)
    )
    return g, total.detach(), [(tid, float(v.detach())) for tid, v in per_task]


def meta_update(
    omega: NetworkParams, tasks: Sequence[MetaTask], loss_fn: LossFn, config: MetaConfig
) -> NetworkParams:
    """One plain outer gradient step."""
    g, _, _ = meta_gradient(omega, tasks, loss_fn, config)
    return NetworkParams((n, (omega[n].detach() - config.outer_lr * g[n])) for n in omega)


@dataclass
class PretrainResult:
    params: NetworkParams
    history: List[Dict[str, float]] = field(default_factory=list)


def pretrain(
    omega: NetworkParams,
    tasks: Sequence[MetaTask],
    loss_fn: LossFn,
    config: MetaConfig,
) -> PretrainResult:
    """Run ``outer_iters`` outer steps; the final weights are the initialization.

    History rows hold the objective before each step and each task's adapted
    validation loss (column ``loss_<task id>``).
    """
    _sorted(tasks)
    w = NetworkParams((n, t.detach().clone()) for n, t in omega.items())
    adam = None
    if config.outer_optimizer == "adam":
        leaves = [t.requires_grad_(True) for t in w.values()]
        adam = torch.optim.Adam(leaves, lr=config.outer_lr)
    history = []
    for it in range(config.outer_iters):
        g, total, per_task = meta_gradient(w, tasks, loss_fn, config)
        row = {"iteration": it, "meta_objective": float(total)}
        row.update({f"loss_{tid}": v for tid, v in per_task})
        history.append(row)
        if adam is None:
            w = NetworkParams((n, w[n].detach() - config.outer_lr * g[n]) for n in w)
        else:
            for n, t in w.items():
                t.grad = g[n].clone()
            adam.step()
            adam.zero_grad(set_to_none=True)
        log.debug("meta iteration %d: objective %.6f", it, float(total))
    return PretrainResult(w.detach().clone(), history)

from types import SimpleNamespace

import pytest
import sympy as sp
import torch

from taskfusion.errors import ConfigError, NonFiniteLossError
from taskfusion.pmi import (
    MetaConfig,
    MetaTask,
    inner_adapt,
    meta_gradient,
    meta_objective,
    meta_update,
    pretrain,
    task_losses,
)
from taskfusion.search_space import NetworkParams


def quad_loss(params, target):
    return 0.5 * ((params["w"] - target) ** 2).sum()


def omega(value):
    return NetworkParams(w=torch.tensor([value], dtype=torch.float64))


def quad_task(tid, a, b):
    return MetaTask(tid, torch.tensor([a], dtype=torch.float64), torch.tensor([b], dtype=torch.float64))


TASKS = [quad_task("t0", 1.0, 2.0), quad_task("t1", -0.5, 0.25), quad_task("t2", 3.0, 1.5)]


def sympy_gradients(w0, beta, tasks):
    """Full and first-order outer gradients for K = 1 on quadratics."""
    w = sp.Symbol("w")
    b = sp.nsimplify(beta)
    objective, first_order = 0, 0
    for t in tasks:
        a_i, b_i = sp.nsimplify(float(t.train)), sp.nsimplify(float(t.val))
        theta = w - b * (w - a_i)
        objective += sp.Rational(1, 2) * (theta - b_i) ** 2
        first_order += theta - b_i
    value = sp.nsimplify(w0)
    return (
        float(sp.diff(objective, w).subs(w, value)),
        float(first_order.subs(w, value)),
        float(objective.subs(w, value)),
    )


def test_zero_steps_return_omega():
    w = omega(0.7)
    assert torch.equal(inner_adapt(w, TASKS[0], quad_loss, 0, 0.1)["w"], w["w"])


def test_one_unit_step_reaches_train_target():
    assert float(inner_adapt(omega(5.0), TASKS[0], quad_loss, 1, 1.0)["w"]) == 1.0


def test_identical_tasks_scale_objective():
    single = float(meta_objective(omega(0.3), [quad_task("x", 1.0, 2.0)], quad_loss, 2, 0.1))
    many = [quad_task(f"x{i}", 1.0, 2.0) for i in range(4)]
    assert float(meta_objective(omega(0.3), many, quad_loss, 2, 0.1)) == pytest.approx(4 * single, rel=1e-15)


def test_zero_steps_objective_is_multitask_loss():
    w = omega(0.4)
    expected = sum(float(quad_loss(w, t.val)) for t in TASKS)
    assert float(meta_objective(w, TASKS, quad_loss, 0, 0.1)) == pytest.approx(expected, rel=1e-15)


@pytest.mark.parametrize("w0, beta", [(0.0, 0.1), (1.7, 0.3), (-2.2, 0.45)])
def test_outer_gradients_match_symbolic_closed_form(w0, beta):
    full, first, value = sympy_gradients(w0, beta, TASKS)
    g_full, total, _ = meta_gradient(omega(w0), TASKS, quad_loss, MetaConfig(K=1, inner_lr=beta, first_order=False))
    g_first, _, _ = meta_gradient(omega(w0), TASKS, quad_loss, MetaConfig(K=1, inner_lr=beta, first_order=True))
    assert float(total) == pytest.approx(value, rel=1e-12)
    assert abs(float(g_full["w"]) - full) <= 1e-8 * max(abs(full), 1.0)
    assert abs(float(g_first["w"]) - first) <= 1e-8 * max(abs(first), 1.0)
    # the two differ by exactly the inner step's curvature factor -beta * sum(theta_i - b_i)
    assert float(g_full["w"] - g_first["w"]) == pytest.approx(-beta * first, rel=1e-10, abs=1e-12)


def test_outer_loop_reaches_analytic_minimizer():
    beta = 0.3
    tasks = TASKS[:2]
    w = sp.Symbol("w")
    objective = sum(
        sp.Rational(1, 2) * (w - sp.nsimplify(beta) * (w - sp.nsimplify(float(t.train))) - sp.nsimplify(float(t.val))) ** 2
        for t in tasks
    )
    (w_star,) = sp.solve(sp.diff(objective, w), w)
    cfg = MetaConfig(K=1, inner_lr=beta, outer_lr=0.5, outer_iters=200, first_order=False)
    result = pretrain(omega(5.0), tasks, quad_loss, cfg)
    assert float(result.params["w"]) == pytest.approx(float(w_star), abs=1e-10)
    objs = [row["meta_objective"] for row in result.history]
    assert all(b <= a + 1e-14 for a, b in zip(objs, objs[1:]))


def test_single_task_zero_steps_update_is_plain_gradient_step():
    cfg = MetaConfig(K=0, outer_lr=0.2)
    task = TASKS[1]
    updated = meta_update(omega(1.0), [task], quad_loss, cfg)
    assert float(updated["w"]) == pytest.approx(1.0 - 0.2 * (1.0 - 0.25), rel=1e-15)


def test_zero_step_meta_training_equals_multitask_training():
    cfg = MetaConfig(K=0, outer_lr=0.05, outer_iters=25)
    meta = pretrain(omega(2.0), TASKS, quad_loss, cfg).params["w"]
    w = torch.tensor([2.0], dtype=torch.float64)
    for _ in range(25):
        w = w.detach().requires_grad_(True)
        total = None
        for t in sorted(TASKS, key=lambda t: t.id):
            v = quad_loss({"w": w}, t.val)
            total = v if total is None else total + v
        (g,) = torch.autograd.grad(total, w)
        w = w.detach() - 0.05 * g
    assert torch.equal(meta, w)


@pytest.mark.parametrize("first_order", [True, False])
def test_duplicated_task_doubles_its_contribution(first_order):
    cfg = MetaConfig(K=2, inner_lr=0.2, first_order=first_order)
    base, _, _ = meta_gradient(omega(0.5), TASKS, quad_loss, cfg)
    dup = TASKS + [MetaTask("t0-copy", TASKS[0].train, TASKS[0].val)]
    doubled, _, _ = meta_gradient(omega(0.5), dup, quad_loss, cfg)
    alone, _, _ = meta_gradient(omega(0.5), TASKS[:1], quad_loss, cfg)
    assert float(doubled["w"] - base["w"]) == pytest.approx(float(alone["w"]), rel=1e-12)


def test_task_order_does_not_matter():
    cfg = MetaConfig(K=2, inner_lr=0.2)
    g1, v1, p1 = meta_gradient(omega(0.5), TASKS, quad_loss, cfg)
    g2, v2, p2 = meta_gradient(omega(0.5), TASKS[::-1], quad_loss, cfg)
    assert torch.equal(g1["w"], g2["w"]) and torch.equal(v1, v2) and p1 == p2
    assert [tid for tid, _ in task_losses(omega(0.5), TASKS[::-1], quad_loss, 1, 0.1)] == ["t0", "t1", "t2"]


def test_empty_tasks_and_bad_config():
    with pytest.raises(ConfigError):
        meta_objective(omega(0.0), [], quad_loss, 1, 0.1)
    with pytest.raises(ConfigError):
        pretrain(omega(0.0), [], quad_loss, MetaConfig())
    for bad in ({"K": -1}, {"inner_lr": 0.0}, {"outer_lr": -1.0}, {"outer_iters": -1}, {"outer_optimizer": "rms"}):
        with pytest.raises(ConfigError):
            MetaConfig(**bad)


def test_overlapping_splits_rejected():
    train = SimpleNamespace(ids=("p0#0", "p1#0"))
    with pytest.raises(ConfigError, match="p1#0"):
        MetaTask("t", train, SimpleNamespace(ids=("p1#0", "p2#0")))
    MetaTask("t", train, SimpleNamespace(ids=("p2#0",)))


def test_zero_outer_iterations_return_initial_omega():
    w = omega(1.25)
    result = pretrain(w, TASKS, quad_loss, MetaConfig(outer_iters=0))
    assert torch.equal(result.params["w"], w["w"]) and result.history == []


def test_history_and_adam_option():
    cfg = MetaConfig(K=1, inner_lr=0.1, outer_lr=0.1, outer_iters=3, outer_optimizer="adam")
    result = pretrain(omega(0.0), TASKS, quad_loss, cfg)
    assert list(result.history[0]) == ["iteration", "meta_objective", "loss_t0", "loss_t1", "loss_t2"]
    row = result.history[0]
    assert row["meta_objective"] == pytest.approx(row["loss_t0"] + row["loss_t1"] + row["loss_t2"])
    # the first Adam step moves every coordinate by about the learning rate
    sgd = pretrain(omega(0.0), TASKS, quad_loss, MetaConfig(K=1, inner_lr=0.1, outer_lr=0.1, outer_iters=1))
    adam1 = pretrain(omega(0.0), TASKS, quad_loss, MetaConfig(K=1, inner_lr=0.1, outer_lr=0.1, outer_iters=1, outer_optimizer="adam"))
    assert abs(float(adam1.params["w"])) == pytest.approx(0.1, rel=1e-6)
    assert not torch.equal(sgd.params["w"], adam1.params["w"])


def test_non_finite_inner_loss_names_task():
    bad = MetaTask("broken", torch.tensor([float("nan")], dtype=torch.float64), torch.tensor([0.0], dtype=torch.float64))
    with pytest.raises(NonFiniteLossError, match="broken") as info:
        inner_adapt(omega(0.0), bad, quad_loss, 3, 0.1)
    assert info.value.step == 0

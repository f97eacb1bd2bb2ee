import warnings

import numpy as np
import pytest
import torch
from hypothesis import given, settings
from hypothesis import strategies as st

from taskfusion import ias
from taskfusion.errors import ConfigError, DimensionError, IllConditionedWarning, NonFiniteLossError
from taskfusion.ias import (
    GradientBundle,
    SearchConfig,
    compute_bundle,
    fusion_batch_loss,
    implicit_alpha_gradient,
    inner_train,
    search,
    search_objective,
)
from taskfusion.pipeline.data import PatchSet
from taskfusion.search_space import (
    ArchitectureWeights,
    LatencyTable,
    NetworkParams,
    build_fusion_network,
    init_params,
    latency_regularizer,
)

TOY_SPACE = {
    "stem": "none",
    "head": "mean",
    "cells": [{"kind": "SC", "edges": 2, "candidates": ["zero", "skip"]}],
    "latency": {"zero": 0.0, "skip": 1.0},
}


def flat_grad(loss, tensors):
    gs = torch.autograd.grad(loss, tensors, retain_graph=True, allow_unused=True)
    return torch.cat([(g if g is not None else torch.zeros_like(t)).reshape(-1) for g, t in zip(gs, tensors)])


def bundle_for(inner_fn, outer_fn, theta, alpha):
    theta = theta.detach().clone().requires_grad_(True)
    alpha = alpha.detach().clone().requires_grad_(True)
    inner, outer = inner_fn(theta, alpha), outer_fn(theta, alpha)
    return GradientBundle(
        flat_grad(inner, [theta]), flat_grad(outer, [theta]), flat_grad(inner, [alpha]), flat_grad(outer, [alpha])
    )


def exact_hypergradient(inner_fn, outer_fn, theta_star, alpha):
    """Implicit-function-theorem hypergradient from full Hessian blocks."""
    n = theta_star.numel()
    joint = torch.cat([theta_star, alpha]).detach()
    hess = torch.autograd.functional.hessian(lambda z: inner_fn(z[:n], z[n:]), joint)
    h_tt, h_at = hess[:n, :n], hess[n:, :n]
    z = joint.clone().requires_grad_(True)
    g = torch.autograd.grad(outer_fn(z[:n], z[n:]), z)[0]
    return g[n:] - h_at @ torch.linalg.solve(h_tt, g[:n])


def quadratic_instance(rng: np.random.Generator, dim: int):
    """SPD A with the inner solution on an eigenvector of A."""
    q, _ = np.linalg.qr(rng.standard_normal((dim, dim)))
    eig = rng.uniform(0.5, 5.0, dim)
    a = torch.as_tensor(q @ np.diag(eig) @ q.T)
    k = int(rng.integers(dim))
    theta_star = torch.as_tensor(q[:, k] * rng.uniform(0.5, 2.0))
    alpha = a @ theta_star
    return a, alpha, theta_star


def test_scalar_oracle_matches_analytic_hypergradient():
    inner = lambda t, a: 0.5 * ((t - a) ** 2).sum()
    outer = lambda t, a: 0.5 * (t**2).sum()
    for alpha0 in (-1.3, 0.2, 2.5):
        alpha = torch.tensor([alpha0], dtype=torch.float64)
        theta = alpha + 1e-6
        g = implicit_alpha_gradient(bundle_for(inner, outer, theta, alpha), eps=1e-30)
        assert abs(float(g) - alpha0) <= 1e-4
        exact = exact_hypergradient(inner, outer, alpha.clone(), alpha)
        assert float(exact) == pytest.approx(alpha0, abs=1e-12)


def test_safeguard_shrinks_the_correction_near_optimum():
    # G = theta * d^2 / (d^2 + eps) on the scalar problem
    inner = lambda t, a: 0.5 * ((t - a) ** 2).sum()
    outer = lambda t, a: 0.5 * (t**2).sum()
    alpha = torch.tensor([1.0], dtype=torch.float64)
    d = 1e-6
    bundle = bundle_for(inner, outer, alpha + d, alpha)
    for eps in (1e-12, 1e-13, 1e-11):
        with warnings.catch_warnings():
            warnings.simplefilter("ignore", IllConditionedWarning)
            g = float(implicit_alpha_gradient(bundle, eps=eps))
        assert g == pytest.approx((1.0 + d) * d * d / (d * d + eps), rel=1e-6)


@pytest.mark.parametrize("seed", range(5))
def test_spd_instances_with_exact_structure(seed):
    rng = np.random.default_rng(seed)
    a, alpha, theta_star = quadratic_instance(rng, int(rng.integers(1, 6)))
    inner = lambda t, al: 0.5 * t @ a @ t - al @ t
    outer = lambda t, al: 0.5 * t @ t
    theta = theta_star + 1e-9 * theta_star / theta_star.norm()
    bundle = bundle_for(inner, outer, theta, alpha)
    assert float(bundle.theta_inner.norm()) <= 1e-8
    g = implicit_alpha_gradient(bundle, eps=1e-30)
    exact = exact_hypergradient(inner, outer, theta_star, alpha)
    torch.testing.assert_close(exact, torch.linalg.solve(a, theta_star))
    assert float(torch.nn.functional.cosine_similarity(g, exact, dim=0)) >= 0.99


@pytest.mark.parametrize("seed", range(5))
@pytest.mark.parametrize("side", [1.0, -1.0])
def test_least_squares_form_is_exact_when_residual_follows_correction(seed, side):
    # inner written as a residual: 0.5 * ||A^(1/2) theta - A^(-1/2) alpha||^2
    rng = np.random.default_rng(100 + seed)
    dim = int(rng.integers(1, 6))
    m = rng.standard_normal((dim, dim))
    a = torch.as_tensor(m @ m.T + dim * np.eye(dim))
    alpha = torch.as_tensor(rng.standard_normal(dim))
    a_inv = torch.linalg.inv(a)
    inner = lambda t, al: 0.5 * (t @ a @ t) - al @ t + 0.5 * al @ a_inv @ al
    outer = lambda t, al: 0.5 * t @ t
    theta_star = a_inv @ alpha
    exact = a_inv @ theta_star
    theta = theta_star + side * 1e-7 * exact / exact.norm()
    g = implicit_alpha_gradient(bundle_for(inner, outer, theta, alpha), eps=1e-30)
    assert float(torch.nn.functional.cosine_similarity(g, exact, dim=0)) >= 0.99
    torch.testing.assert_close(g, exact, rtol=1e-5, atol=0)


def test_correction_vanishes_for_zero_or_orthogonal_search_gradient():
    a_in, a_s = torch.tensor([1.0, -2.0]), torch.tensor([0.5, 0.25])
    zero = GradientBundle(torch.tensor([1.0, 2.0]), torch.zeros(2), a_in, a_s)
    assert torch.equal(implicit_alpha_gradient(zero), a_s)
    ortho = GradientBundle(torch.tensor([1.0, 0.0]), torch.tensor([0.0, 3.0]), a_in, a_s)
    assert torch.equal(implicit_alpha_gradient(ortho), a_s)


def test_search_loss_without_direct_alpha_dependence():
    b = GradientBundle(torch.tensor([2.0]), torch.tensor([3.0]), torch.tensor([1.0, -1.0]), torch.zeros(2))
    g = implicit_alpha_gradient(b, eps=1e-30)
    torch.testing.assert_close(g, -(6.0 / 4.0) * torch.tensor([1.0, -1.0]))


@settings(max_examples=60, deadline=None)
@given(
    st.lists(st.floats(-1e-7, 1e-7), min_size=3, max_size=3),
    st.lists(st.floats(-1e6, 1e6), min_size=3, max_size=3),
    st.lists(st.floats(-1e6, 1e6), min_size=2, max_size=2),
    st.lists(st.floats(-1e6, 1e6), min_size=2, max_size=2),
)
def test_degenerate_bundles_stay_finite(t_in, t_s, a_in, a_s):
    f = lambda v: torch.tensor(v, dtype=torch.float64)
    bundle = GradientBundle(f(t_in), f(t_s), f(a_in), f(a_s))
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", IllConditionedWarning)
        g = implicit_alpha_gradient(bundle)
    assert torch.isfinite(g).all()


def test_warning_at_inner_optimum_and_bad_eps():
    b = GradientBundle(torch.zeros(3), torch.ones(3), torch.ones(2), torch.ones(2))
    with pytest.warns(IllConditionedWarning):
        g = implicit_alpha_gradient(b)
    assert torch.equal(g, torch.ones(2))
    with pytest.raises(ConfigError):
        implicit_alpha_gradient(b, eps=0.0)


def test_bundle_shape_check():
    with pytest.raises(DimensionError):
        GradientBundle(torch.zeros(3), torch.zeros(4), torch.zeros(2), torch.zeros(2))
    with pytest.raises(DimensionError):
        GradientBundle(torch.zeros(3), torch.zeros(3), torch.zeros(2), torch.zeros(1))


def test_inner_train_quadratic_examples():
    target = torch.tensor([1.5, -0.5])
    params = NetworkParams(w=torch.zeros(2))
    loss = lambda p, step: 0.5 * ((p["w"] - target) ** 2).sum()
    assert torch.equal(inner_train(params, loss, 1, 1.0)["w"], target)
    assert torch.equal(inner_train(params, loss, 5, 0.0)["w"], params["w"])
    assert torch.equal(params["w"], torch.zeros(2))


def test_inner_train_aborts_on_non_finite_loss():
    params = NetworkParams(w=torch.ones(1))
    loss = lambda p, step: p["w"].sum() * (float("nan") if step == 2 else 1.0)
    with pytest.raises(NonFiniteLossError) as info:
        inner_train(params, loss, 5, 0.1)
    assert info.value.step == 2


def _toy_patches(n=8, size=16, seed=0):
    g = torch.Generator().manual_seed(seed)
    a = torch.rand(n, 1, size, size, generator=g)
    b = torch.rand(n, 1, size, size, generator=g)
    return PatchSet(a, b, tuple(f"p{i}#0" for i in range(n)))


def test_inner_train_decreases_fusion_loss_on_toy_space():
    space = {"width": 4, "cells": [{"kind": "SC", "edges": 2, "candidates": ["3-DC", "skip"]}]}
    net, params = build_fusion_network(space, torch.Generator().manual_seed(0))
    alpha = net.init_alpha()
    batch = _toy_patches().tensors()
    values = []

    def loss(p, step):
        v = fusion_batch_loss(net, alpha, p, batch)
        values.append(float(v.detach()))
        return v

    inner_train(params, loss, 20, 1e-2)
    assert all(later < earlier for earlier, later in zip(values[:5], values[1:6]))


def test_search_objective_examples():
    net, params = build_fusion_network(TOY_SPACE)
    x = torch.rand(2, 1, 8, 8)
    alpha = net.init_alpha().one_hot({"cell0.edge0": 1, "cell0.edge1": 1})
    table = LatencyTable({"zero": 0.0, "skip": 1.5})
    assert float(search_objective(net, alpha, params, (x, x), 0.0, table)) == 0.0
    reg = float(latency_regularizer(alpha, table))
    assert reg == pytest.approx(3.0)
    assert float(search_objective(net, alpha, params, (x, x), 2.0, table)) == pytest.approx(6.0)
    y = torch.rand(2, 1, 8, 8)
    plain = float(search_objective(net, net.init_alpha(), params, (x, y), 0.0, table))
    assert float(search_objective(net, net.init_alpha(), params, (x, y), 1.0, table)) > plain
    free = LatencyTable({"zero": 0.0, "skip": 0.0})
    assert float(search_objective(net, alpha, params, (x, y), 5.0, free)) == float(
        search_objective(net, alpha, params, (x, y), 0.0, free)
    )


def test_bundle_has_no_weight_gradient_from_latency():
    space = {"width": 2, "cells": [{"kind": "SC", "edges": 1, "candidates": ["3-DC", "skip"]}]}
    net, params = build_fusion_network(space, torch.Generator().manual_seed(1))
    batch = _toy_patches(2, 8).tensors()
    b0, *_ = compute_bundle(net, net.init_alpha(), params, batch, batch, 0.0, net.config.latency)
    b1, *_ = compute_bundle(net, net.init_alpha(), params, batch, batch, 10.0, net.config.latency)
    assert torch.equal(b0.theta_search, b1.theta_search)
    assert not torch.equal(b0.alpha_search, b1.alpha_search)


def test_search_with_zero_epochs_keeps_alpha():
    net, params = build_fusion_network(TOY_SPACE)
    result = search(net, [_toy_patches()], SearchConfig(epochs=0), net.config.latency, params)
    assert torch.equal(result.alpha.flatten(), net.init_alpha().flatten())
    assert all(i == 0 for _, i in result.architecture.choices)
    assert result.history == []


def _small_search(seed):
    space = {"width": 2, "cells": [{"kind": "SC", "edges": 2, "candidates": ["3-DC", "CA", "skip"]}]}
    net, params = build_fusion_network(space, torch.Generator().manual_seed(seed))
    cfg = SearchConfig(inner_steps=2, epochs=2, batch_size=2, seed=seed, alpha_lr=0.1, inner_lr=0.05)
    return search(net, [_toy_patches(4, 8, 0), _toy_patches(4, 8, 1)], cfg, net.config.latency, params)


def test_search_is_deterministic():
    first, second = _small_search(3), _small_search(3)
    assert first.history == second.history
    assert torch.equal(first.alpha.flatten(), second.alpha.flatten())
    assert [sorted(r) for r in first.history] == [["epoch", "loss_F", "loss_alpha", "reg"]] * 2
    assert not torch.equal(first.alpha.flatten(), _small_search(4).alpha.flatten())


def test_search_aborts_on_non_finite_architecture_gradient(monkeypatch):
    monkeypatch.setattr(ias, "implicit_alpha_gradient", lambda bundle, eps: torch.full_like(bundle.alpha_search, float("inf")))
    with pytest.raises(NonFiniteLossError, match="bundle norms"):
        _small_search(0)


def test_search_config_validation():
    for bad in ({"inner_steps": 0}, {"eps": 0.0}, {"lam": -1.0}, {"epochs": -1}, {"batch_size": 0}):
        with pytest.raises(ConfigError):
            SearchConfig(**bad)
    with pytest.raises(ConfigError):
        search(None, [], SearchConfig(), LatencyTable())
    net, params = build_fusion_network(TOY_SPACE)
    with pytest.raises(ConfigError):
        search(net, [_toy_patches(1)], SearchConfig(), net.config.latency, params)


def test_toy_search_selects_identity_edges():
    net, params = build_fusion_network(TOY_SPACE)
    x = torch.rand(8, 1, 8, 8, generator=torch.Generator().manual_seed(0))
    data = PatchSet(x, x.clone(), tuple(f"p{i}#0" for i in range(8)))
    with pytest.warns(IllConditionedWarning):
        result = search(net, [data], SearchConfig(epochs=3, alpha_lr=0.5, inner_steps=1), net.config.latency, params)
    assert result.architecture.operator("cell0.edge0") == "skip"
    assert result.architecture.operator("cell0.edge1") == "skip"
    assert isinstance(result.alpha, ArchitectureWeights)
    assert init_params(net).numel == 0

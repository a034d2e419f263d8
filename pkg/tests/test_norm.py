import logging

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from ctxnorm import norm
from ctxnorm.errors import DomainError, InternalError, ShapeError
from ctxnorm.gmm import GmmModel
from ctxnorm.net import AdamW
from ctxnorm.norm import (BnState, ContextNorm, ContextNormBase, ContextParamTable, acn_backward,
                          acn_base_forward, acn_forward, acn_inference_aggregate, bn_backward,
                          bn_forward, general_transform, mn_backward, mn_forward,
                          per_context_inference)
from ctxnorm.tensor_core import channel_moments, channel_vectors


def num_grad(f, x, h=1e-5):
    g = np.zeros_like(x)
    for i in np.ndindex(x.shape):
        old = x[i]
        x[i] = old + h
        fp = f()
        x[i] = old - h
        fm = f()
        x[i] = old
        g[i] = (fp - fm) / (2 * h)
    return g


def rel(a, b):
    return np.max(np.abs(a - b) / np.maximum(np.maximum(np.abs(a), np.abs(b)), 1e-6))


def random_table(rng, t, c):
    return ContextParamTable.from_variances(rng.normal(size=(t, c)), rng.uniform(0.3, 3.0, (t, c)))


# --- batch normalization -------------------------------------------------

def test_bn_constant_input_gives_zeros():
    out, _ = bn_forward(np.full((4, 2, 3), 2.5), BnState(2))
    assert np.all(out == 0.0)


def test_bn_hand_values():
    out, _ = bn_forward(np.array([[1.0], [2.0], [3.0]]), BnState(1, epsilon=0.0))
    np.testing.assert_allclose(out[:, 0], [-1.2247, 0.0, 1.2247], atol=1e-4)


def test_bn_post_conditions(rng):
    x = rng.normal(size=(8, 3, 5)) * 3 + 1
    out, _ = bn_forward(x, BnState(3))
    m, mo = channel_moments(x), channel_moments(out)
    assert np.all(np.abs(mo.mean) <= 1e-9)
    np.testing.assert_allclose(mo.var, m.var / (m.var + 1e-5), atol=1e-6)


def test_bn_running_stats_and_eval(rng):
    st_ = BnState(2)
    x = rng.normal(size=(16, 2)) + 3
    bn_forward(x, st_)
    np.testing.assert_allclose(st_.running_mean, 0.1 * x.mean(0))
    out, _ = bn_forward(x, st_, train=False)
    np.testing.assert_allclose(out, (x - st_.running_mean) / np.sqrt(st_.running_var + 1e-5))


def test_bn_needs_two_positions():
    with pytest.raises(DomainError):
        bn_forward(np.ones((1, 3)), BnState(3))


def test_bn_backward_constant_grad_is_zero(rng):
    x = rng.normal(size=(5, 3, 2))
    _, cache = bn_forward(x, BnState(3))
    np.testing.assert_allclose(bn_backward(np.ones_like(x), cache), 0.0, atol=1e-12)


def test_bn_backward_finite_diff(rng):
    x = rng.normal(size=(2, 3, 4))
    w = rng.normal(size=x.shape)
    _, cache = bn_forward(x, BnState(3))
    g = bn_backward(w, cache)
    ng = num_grad(lambda: float((bn_forward(x, BnState(3))[0] * w).sum()), x)
    assert rel(g, ng) < 1e-5
    np.testing.assert_allclose(g.sum(axis=(0, 2)), 0.0, atol=1e-9)


# --- grouped transform ---------------------------------------------------

def test_general_single_group_is_bn(rng):
    x = rng.normal(size=(6, 3, 4))
    np.testing.assert_allclose(general_transform(x), bn_forward(x, BnState(3))[0], atol=1e-12)


def test_general_singleton_groups_give_zeros(rng):
    x = rng.normal(size=(3, 2, 4))
    out = general_transform(x, np.arange(12).reshape(3, 4))
    assert np.all(out == 0.0)


def test_general_two_groups():
    x = np.array([1.0, 3.0, 10.0, 30.0]).reshape(4, 1)
    eps = 1e-5
    out = general_transform(x, np.array([[0], [0], [1], [1]]), eps)
    np.testing.assert_allclose(out[:2, 0], np.array([-1, 1]) / np.sqrt(1 + eps / 1.0))
    np.testing.assert_allclose(out[2:, 0], np.array([-1, 1]) / np.sqrt(1 + eps / 100.0))


def test_group_helpers(rng):
    x = rng.normal(size=(2, 4, 3))
    inst = general_transform(x, norm.instance_groups(x.shape))
    np.testing.assert_allclose(inst.mean(axis=2), 0.0, atol=1e-12)
    lay = general_transform(x, norm.layer_groups(x.shape))
    np.testing.assert_allclose(lay.mean(axis=(1, 2)), 0.0, atol=1e-12)
    grp = general_transform(x, norm.group_groups(x.shape, 2))
    np.testing.assert_allclose(grp[:, :2].mean(axis=(1, 2)), 0.0, atol=1e-12)


# --- mixture normalization -----------------------------------------------

def test_mn_single_component_is_bn(rng):
    x = rng.normal(size=(10, 3))
    m = GmmModel([1.0], [x.mean(0)], [x.var(0)])
    np.testing.assert_allclose(mn_forward(x, m), general_transform(x), atol=1e-9)


def test_mn_hard_split():
    rng = np.random.default_rng(3)
    x = np.concatenate([rng.normal(-50, 1, (6, 1)), rng.normal(50, 1, (6, 1))])
    m = GmmModel([0.25, 0.75], [[-50.0], [50.0]], [[1.0], [1.0]])
    out = mn_forward(x, m)
    np.testing.assert_allclose(out[:6], general_transform(x[:6]) / np.sqrt(0.25), atol=1e-9)
    np.testing.assert_allclose(out[6:], general_transform(x[6:]) / np.sqrt(0.75), atol=1e-9)


def test_mn_backward_finite_diff(rng):
    x = rng.normal(size=(4, 2, 3))
    m = GmmModel([0.4, 0.6], [[-0.5, 0.2], [0.6, -0.3]], [[0.8, 1.2], [1.0, 0.7]])
    w = rng.normal(size=x.shape)
    _, cache = mn_forward(x, m, return_cache=True)
    g = mn_backward(w, cache)
    ng = num_grad(lambda: float((mn_forward(x, m) * w).sum()), x)
    assert rel(g, ng) < 1e-5


def test_mn_drops_zero_mass_component(caplog):
    x = np.array([[0.0], [1.0], [2.0]])
    m = GmmModel([0.5, 0.5], [[1.0], [1e6]], [[1.0], [1e-6]])
    with caplog.at_level(logging.WARNING):
        out = mn_forward(x, m)
    assert np.all(np.isfinite(out)) and "dropping degenerate" in caplog.text


def test_mn_shape_mismatch():
    with pytest.raises(ShapeError):
        mn_forward(np.zeros((3, 2)), GmmModel([1.0], [[0.0]], [[1.0]]))


# --- ACN ------------------------------------------------------------------

def test_acn_zero_when_input_is_mean(rng):
    table = random_table(rng, 3, 2)
    ctx = np.array([0, 2, 1, 2])
    x = np.repeat(table.mu[ctx][:, :, None], 5, axis=2)
    out, _ = acn_forward(x, ctx, table)
    assert np.all(out == 0.0)


def test_acn_hand_value():
    table = ContextParamTable.from_variances([[1.0]], [[4.0]], epsilon=0.0)
    out, _ = acn_forward(np.array([[3.0]]), [0], table)
    assert out[0, 0] == pytest.approx(1.0, abs=1e-12)


def test_acn_contexts_differ_only_when_params_differ():
    table = ContextParamTable.from_variances([[0.0], [0.0], [1.0]], [[1.0], [1.0], [1.0]])
    x = np.array([[2.0], [2.0], [2.0]])
    out, _ = acn_forward(x, [0, 1, 2], table)
    assert out[0, 0] == out[1, 0] and out[0, 0] != out[2, 0]


def test_acn_per_context_is_affine(rng):
    table = random_table(rng, 2, 3)
    x = rng.normal(size=(6, 3, 2))
    ctx = np.array([0, 1, 1, 0, 1, 0])
    out, _ = acn_forward(x, ctx, table)
    sel = ctx == 1
    scale = 1.0 / np.sqrt(table.var[1] + table.epsilon)
    expected = (x[sel] - table.mu[1][None, :, None]) * scale[None, :, None]
    np.testing.assert_array_equal(out[sel], expected)


def test_acn_backward_unit_examples():
    table = ContextParamTable.from_variances([[0.0]], [[1.0]], epsilon=0.0)
    _, cache = acn_forward(np.array([[0.7]]), [0], table)
    _, gmu, _ = acn_backward(np.ones((1, 1)), cache)
    assert gmu[0, 0] == pytest.approx(-1.0, abs=1e-6)
    x = np.repeat(table.mu[[0, 0]][:, :, None], 3, axis=2)
    _, cache = acn_forward(x, [0, 0], table)
    _, _, gvar = acn_backward(np.ones_like(x), cache)
    assert np.all(gvar == 0.0)


def test_acn_variance_gradient_sign():
    # d/dvar of (x - mu)/sqrt(var + eps) is negative for x > mu
    table = ContextParamTable.from_variances([[0.0]], [[1.0]], epsilon=0.0)
    _, cache = acn_forward(np.array([[2.0]]), [0], table)
    _, _, gvar = acn_backward(np.ones((1, 1)), cache)
    assert gvar[0, 0] == pytest.approx(-1.0)


def test_acn_backward_finite_diff(rng):
    table = random_table(rng, 3, 2)
    x = rng.normal(size=(5, 2, 3))
    ctx = np.array([0, 1, 2, 1, 0])
    w = rng.normal(size=x.shape)
    mu, var = table.mu.copy(), table.var.copy()

    def loss():
        t = ContextParamTable.from_variances(mu, var, var_floor=0.0)
        return float((acn_forward(x, ctx, t)[0] * w).sum())

    _, cache = acn_forward(x, ctx, table)
    gin, gmu, gvar = acn_backward(w, cache)
    assert rel(gin, num_grad(loss, x)) < 1e-5
    assert rel(gmu, num_grad(loss, mu)) < 1e-5
    assert rel(gvar, num_grad(loss, var)) < 1e-5


def test_acn_context_validation(rng):
    table = random_table(rng, 2, 2)
    with pytest.raises(DomainError):
        acn_forward(np.zeros((2, 2)), [0, 2], table)
    with pytest.raises(ShapeError):
        acn_forward(np.zeros((2, 3)), [0, 1], table)


def test_acn_backward_rejects_foreign_cache(rng):
    with pytest.raises(InternalError):
        acn_backward(np.zeros((2, 2)), {"nope": 1})


def test_table_positivity_after_steps(rng):
    layer = ContextNorm(3, 2)
    opt = AdamW(lr=0.5, weight_decay=0.0)
    for _ in range(50):
        layer.grads["s"][...] = rng.normal(size=(2, 3)) * 100
        opt.step([("s", layer.params["s"], layer.grads["s"])])
    assert np.all(layer.table.var > 0)


def test_table_serialization(rng):
    t = random_table(rng, 2, 3)
    back = ContextParamTable.from_dict(t.to_dict())
    np.testing.assert_array_equal(back.var, t.var)


def test_acn_descent_step():
    for seed in range(20):
        rng = np.random.default_rng(seed)
        layer = ContextNorm(3, 1)
        layer.table.mu[...] = rng.normal(size=(1, 3))
        x = rng.normal(size=(8, 3)) * 2 + 1
        target = rng.normal(size=(8, 3))

        def loss():
            out, cache = layer.forward(x, np.zeros(8, dtype=int))
            return 0.5 * float(((out - target) ** 2).sum()), out - target, cache

        before, g, cache = loss()
        layer.zero_grad()
        layer.backward(g, cache)
        AdamW(lr=1e-4, weight_decay=0.0).step(
            [(n, layer.params[n], layer.grads[n]) for n in layer.params])
        assert loss()[0] < before


def test_acn_base_examples():
    t, c = 3, 2
    w_mu = np.arange(6.0).reshape(t, c)
    b_mu = np.array([0.5, -0.5])
    mu, var = acn_base_forward(np.eye(t)[1], w_mu, b_mu, np.zeros((t, c)), np.zeros(c))
    np.testing.assert_array_equal(mu, w_mu[1] + b_mu)
    np.testing.assert_allclose(var, np.log(2.0), atol=1e-15)
    w_var = np.zeros((t, c))
    w_var[2] = 1.0
    _, v = acn_base_forward(np.eye(t), w_mu * 0, b_mu, w_var, np.zeros(c))
    assert np.array_equal(v[0], v[1]) and not np.array_equal(v[0], v[2])
    with pytest.raises(DomainError):
        acn_base_forward(np.array([0.5, 0.5, 0.0]), w_mu, b_mu, w_var, np.zeros(c))


def test_acn_base_layer_finite_diff(rng):
    layer = ContextNormBase(2, 3)
    for name in layer.params:
        layer.params[name][...] = rng.normal(size=layer.params[name].shape) * 0.5
    x = rng.normal(size=(6, 2))
    ctx = np.array([0, 1, 2, 2, 1, 0])
    w = rng.normal(size=x.shape)

    def loss():
        return float((layer.forward(x, ctx)[0] * w).sum())

    layer.zero_grad()
    _, cache = layer.forward(x, ctx)
    layer.backward(w, cache)
    for name, p in layer.params.items():
        assert rel(layer.grads[name], num_grad(loss, p)) < 1e-5, name


# --- inference ---------------------------------------------------------

def brute_aggregate(x, table):
    """Position-by-position evaluation of the collective context transform."""
    n, c = x.shape
    t, eps = table.t, table.epsilon
    out = np.zeros_like(x)
    lam = np.full(t, 1.0 / t)
    dens = np.zeros((n, t))
    for i in range(n):
        for r in range(t):
            d = np.prod([np.exp(-0.5 * (x[i, j] - table.mu[r, j]) ** 2 / table.var[r, j])
                         / np.sqrt(2 * np.pi * table.var[r, j]) for j in range(c)])
            dens[i, r] = lam[r] * d
    tau = dens / dens.sum(axis=1, keepdims=True)
    for r in range(t):
        that = tau[:, r] / tau[:, r].sum()
        mean = sum(that[j] * x[j] for j in range(n))
        v = x - mean
        var = sum(that[j] * v[j] ** 2 for j in range(n))
        out += np.sqrt(t) * tau[:, r][:, None] * v / np.sqrt(var + eps)
    return out


def test_aggregate_single_context_is_bn(rng):
    x = rng.normal(size=(7, 3))
    table = random_table(rng, 1, 3)
    np.testing.assert_allclose(acn_inference_aggregate(x, table), general_transform(x), atol=1e-9)


def test_aggregate_equals_mn_with_uniform_weights(rng):
    x = rng.normal(size=(9, 2, 2))
    table = random_table(rng, 3, 2)
    m = GmmModel(np.full(3, 1 / 3), table.mu, table.var)
    np.testing.assert_allclose(acn_inference_aggregate(x, table), mn_forward(x, m), atol=1e-9)


def test_aggregate_brute_force(rng):
    x = rng.normal(size=(6, 2))
    table = random_table(rng, 3, 2)
    np.testing.assert_allclose(acn_inference_aggregate(x, table), brute_aggregate(x, table),
                               atol=1e-9)


def test_per_context_inference(rng):
    table = random_table(rng, 2, 3)
    x = rng.normal(size=(6, 3))
    ctx = np.array([0, 1, 0, 1, 1, 0])
    a = per_context_inference(x, ctx, table)
    assert np.array_equal(a, acn_forward(x, ctx, table)[0])
    assert np.array_equal(a, per_context_inference(x, ctx, table))


def test_per_context_moment_matching(rng):
    x = np.concatenate([rng.normal(5, 2, (40, 2)), rng.normal(-3, 0.5, (40, 2))])
    ctx = np.repeat([0, 1], 40)
    mu = np.stack([x[ctx == r].mean(0) for r in range(2)])
    var = np.stack([x[ctx == r].var(0) for r in range(2)])
    out = per_context_inference(x, ctx, ContextParamTable.from_variances(mu, var))
    np.testing.assert_allclose(out[ctx == 0].mean(0), 0.0, atol=1e-9)


def test_context_layer_aggregate_mode(rng):
    layer = ContextNorm(2, 2, inference="aggregate")
    x = rng.normal(size=(5, 2))
    out, cache = layer.forward(x, None, train=False)
    np.testing.assert_allclose(out, acn_inference_aggregate(x, layer.table))
    with pytest.raises(InternalError):
        layer.backward(np.ones_like(x), cache)


def test_layer_cache_ownership(rng):
    a, b = ContextNorm(2, 2), ContextNorm(2, 2)
    x = rng.normal(size=(3, 2))
    _, cache = a.forward(x, [0, 1, 0])
    with pytest.raises(InternalError):
        b.backward(np.ones_like(x), cache)


@settings(max_examples=40, deadline=None)
@given(st.integers(0, 10_000), st.integers(2, 6), st.integers(1, 3))
def test_mn_single_component_property(seed, n, c):
    x = np.random.default_rng(seed).normal(size=(n, c)) * 5
    m = GmmModel([1.0], [np.zeros(c)], [np.ones(c)])
    np.testing.assert_allclose(mn_forward(x, m), general_transform(x), atol=1e-9)

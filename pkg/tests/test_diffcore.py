import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from magjoint import diffcore as dc
from magjoint.errors import FormatVersionError, ShapeMismatch


def grad_of(fn, *values):
    ts = [dc.Tensor(np.array(v, dtype=float), requires_grad=True) for v in values]
    out = fn(*ts)
    dc.backward(out)
    return out, [t.grad for t in ts]


def numeric_grad(f, x, h=1e-6):
    x = np.array(x, dtype=float)
    g = np.zeros_like(x)
    for i in np.ndindex(x.shape):
        e = np.zeros_like(x)
        e[i] = h
        g[i] = (f(x + e) - f(x - e)) / (2 * h)
    return g


def test_scalar_primitives():
    out, (ga, gb) = grad_of(lambda a, b: a * b + a, 2.0, 3.0)
    assert out.item() == 8.0
    assert ga.item() == 4.0 and gb.item() == 2.0
    _, (g,) = grad_of(dc.tanh, 0.0)
    assert g.item() == 1.0
    out, (g,) = grad_of(dc.sigmoid, 0.0)
    assert out.item() == 0.5 and g.item() == 0.25
    _, (g,) = grad_of(dc.exp, 0.0)
    assert g.item() == 1.0
    _, (g,) = grad_of(dc.log, 2.0)
    assert g.item() == 0.5
    _, (ga, gb) = grad_of(lambda a, b: a / b, 1.0, 2.0)
    assert ga.item() == 0.5 and gb.item() == -0.25


def test_reused_node_accumulates():
    _, (g,) = grad_of(lambda p: p * p, 3.0)
    assert g.item() == 6.0


def test_unreachable_leaf_gets_exact_zero():
    a = dc.Tensor(np.ones(3), requires_grad=True)
    b = dc.Tensor(np.ones(3), requires_grad=True)
    dc.backward(dc.tsum(a * 2.0))
    np.testing.assert_array_equal(a.grad, 2.0 * np.ones(3))
    assert b.grad is None or np.all(b.grad == 0.0)
    store = dc.ParamStore()
    store.add("used", np.ones(2))
    store.add("unused", np.ones(2))
    store.zero_grad()
    dc.backward(dc.tsum(store["used"]))
    np.testing.assert_array_equal(store["unused"].grad, np.zeros(2))


def test_composite_graph_matches_numpy():
    rng = np.random.default_rng(0)
    W, x, b = rng.standard_normal((4, 3)), rng.standard_normal((5, 4)), rng.standard_normal(3)

    def plain(W):
        z = np.tanh(x @ W + b)
        return np.sum(np.log1p(np.exp(z)) * z**2)

    Wt = dc.Tensor(W, requires_grad=True)
    z = dc.tanh(dc.as_tensor(x) @ Wt + b)
    loss = dc.tsum(dc.softplus(z) * dc.square(z))
    dc.backward(loss)
    assert loss.item() == pytest.approx(plain(W), rel=1e-13)
    np.testing.assert_allclose(Wt.grad, numeric_grad(plain, W), rtol=1e-6, atol=1e-9)


def test_shape_ops_gradients():
    rng = np.random.default_rng(1)
    a = rng.standard_normal((2, 3, 4))

    def plain(a):
        s = np.concatenate([a[:, 1:, :], a[:, :1, :] * 2], axis=1)
        st_ = np.stack([s, s**2], axis=0).reshape(2, -1)
        return np.sum(st_.mean(axis=1, keepdims=True) * 3) + np.sum(a[0, [0, 0, 2], 1])

    t = dc.Tensor(a, requires_grad=True)
    s = dc.concat([t[:, 1:, :], t[:, :1, :] * 2.0], axis=1)
    stk = dc.reshape(dc.stack([s, dc.square(s)], axis=0), (2, -1))
    loss = dc.tsum(dc.mean(stk, axis=1, keepdims=True) * 3.0) + dc.tsum(t[0, [0, 0, 2], 1])
    dc.backward(loss)
    assert loss.item() == pytest.approx(plain(a), rel=1e-13)
    np.testing.assert_allclose(t.grad, numeric_grad(plain, a), rtol=1e-6, atol=1e-9)


def test_broadcast_gradients_are_reduced():
    store = dc.ParamStore()
    rng = np.random.default_rng(2)
    store.add("w", rng.standard_normal((1, 3)))
    store.add("b", rng.standard_normal(3))
    store.add("s", rng.standard_normal(()))
    store.add("M", rng.standard_normal((2, 3, 3)))
    x = rng.standard_normal((2, 4, 3))

    def loss():
        h = dc.tanh(dc.as_tensor(x) * store["w"] + store["b"] - store["s"])
        h = h @ store["M"]
        return dc.tsum(dc.sqrt(dc.square(h) + 1.0)) + dc.tsum(dc.reciprocal(dc.exp(h) + 2.0))

    res = dc.gradcheck(loss, store, directions=3)
    assert res.max_rel_err < 1e-7
    for name in store:
        assert store[name].grad is None or store[name].grad.shape == store[name].shape


def test_matvec_and_reflected_ops():
    rng = np.random.default_rng(3)
    m, v = rng.standard_normal((3, 4)), rng.standard_normal(4)
    mt = dc.Tensor(m, requires_grad=True)
    out = dc.matvec(mt, v)
    np.testing.assert_allclose(out.value, m @ v)
    r = (np.ones((2, 3)) @ mt) - 1.0
    r = 2.0 / (3.0 - r * 0.0)
    assert isinstance(r, dc.Tensor)


def test_no_grad_builds_no_graph():
    a = dc.Tensor(np.ones(2), requires_grad=True)
    with dc.no_grad():
        b = a * 3.0
    assert not b.requires_grad


def test_extreme_inputs_stay_finite():
    x = np.array([-1e6, -800.0, -50.0, 0.0, 50.0, 800.0, 1e6])
    t = dc.Tensor(x, requires_grad=True)
    loss = dc.tsum(dc.sigmoid(t) + dc.tanh(t) + dc.softplus(t) * 1e-6)
    dc.backward(loss)
    assert np.isfinite(loss.value) and np.all(np.isfinite(t.grad))
    e = dc.exp(dc.Tensor(np.array([1e6])))
    assert np.all(np.isfinite(e.value))


def test_adam_first_step_moves_by_lr():
    store = dc.ParamStore()
    store.add("p", np.array([1.0, -2.0, 0.5]))
    store["p"].grad = np.array([3.0, -0.1, 1e-3])
    dc.adam_step(store, lr=0.01)
    # bias correction makes the first step lr * sign(g) up to eps
    np.testing.assert_allclose(store["p"].value, [0.99, -1.99, 0.49], atol=1e-7)


def test_adam_zero_gradient_is_a_no_op():
    store = dc.ParamStore()
    store.add("p", np.array([1.0, 2.0]))
    store.zero_grad()
    dc.adam_step(store, lr=0.1)
    np.testing.assert_array_equal(store["p"].value, [1.0, 2.0])


def test_adam_matches_reference_sequence():
    rng = np.random.default_rng(4)
    grads = rng.standard_normal((5, 3))
    store = dc.ParamStore()
    store.add("p", np.zeros(3))
    p, m, v = np.zeros(3), np.zeros(3), np.zeros(3)
    b1, b2, lr, eps = 0.9, 0.999, 0.05, 1e-8
    for k, g in enumerate(grads, 1):
        store["p"].grad = g.copy()
        dc.adam_step(store, lr=lr)
        m = b1 * m + (1 - b1) * g
        v = b2 * v + (1 - b2) * g * g
        p = p - lr * (m / (1 - b1**k)) / (np.sqrt(v / (1 - b2**k)) + eps)
    np.testing.assert_allclose(store["p"].value, p, rtol=1e-14, atol=1e-15)


def test_adam_clip_norm_scales_gradient():
    a, b = dc.ParamStore(), dc.ParamStore()
    for s in (a, b):
        s.add("p", np.zeros(2))
    a["p"].grad = np.array([30.0, 40.0])
    b["p"].grad = np.array([3.0, 4.0])
    dc.adam_step(a, lr=0.1, clip_norm=5.0)
    dc.adam_step(b, lr=0.1)
    np.testing.assert_allclose(a["p"].value, b["p"].value, rtol=1e-12)


def test_gradcheck_detects_wrong_gradient():
    store = dc.ParamStore()
    store.add("p", np.array([0.3, -0.2]))
    good = dc.gradcheck(lambda: dc.tsum(dc.square(store["p"])), store)
    assert good.max_rel_err < 1e-8

    def broken():
        # value of p**2 but the gradient of p**2 / 2
        p = store["p"]
        ghost = dc.Tensor(p.value * p.value / 2)
        return dc.tsum(dc.square(p) * 0.5 + ghost)

    assert dc.gradcheck(broken, store).max_rel_err > 0.1


def test_params_round_trip(tmp_path):
    rng = np.random.default_rng(5)
    store = dc.ParamStore()
    store.add("W", rng.standard_normal((3, 4)) * 1e-3)
    store.add("b", rng.standard_normal(4))
    store.add("s", np.array(np.pi))
    path = tmp_path / "p.txt"
    dc.save_params(path, store, {"kind": "test", "window": 5})
    values, meta = dc.load_params(path)
    assert meta == {"kind": "test", "window": "5"}
    for k in store:
        np.testing.assert_array_equal(values[k], store[k].value)
    fresh = dc.ParamStore()
    fresh.add("W", np.zeros((3, 4)))
    fresh.add("b", np.zeros(4))
    fresh.add("s", np.zeros(()))
    fresh.load_state_dict(values)
    np.testing.assert_array_equal(fresh["W"].value, store["W"].value)


def test_shape_mismatch_on_load():
    store = dc.ParamStore()
    store.add("W", np.zeros((2, 2)))
    with pytest.raises(ShapeMismatch):
        store.load_state_dict({"W": np.zeros((3, 2))})


def test_params_version_check(tmp_path):
    path = tmp_path / "p.txt"
    dc.save_params(path, {"a": np.ones(2)})
    path.write_text(path.read_text().replace("v1", "v2"))
    with pytest.raises(FormatVersionError):
        dc.load_params(path)


@settings(max_examples=50, deadline=None)
@given(st.lists(st.floats(-5, 5, allow_nan=False), min_size=1, max_size=8), st.floats(-5, 5))
def test_linear_combination_gradient(xs, c):
    x = dc.Tensor(np.array(xs), requires_grad=True)
    loss = dc.tsum(x * c + x)
    dc.backward(loss)
    np.testing.assert_allclose(x.grad, np.full(len(xs), c + 1.0))

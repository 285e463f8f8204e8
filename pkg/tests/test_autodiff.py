import copy

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from pyramid_nerf.autodiff import (
    ROW_BLOCK,
    ActivationOp,
    ConstantOp,
    FunctionOp,
    LinearOp,
    MSELossOp,
    ParameterStore,
    activation,
    activation_backward,
    blocked_matmul,
    finite_diff_check,
    linear_backward,
    linear_layer,
    mse_loss,
    mse_loss_backward,
)
from pyramid_nerf.field import LevelHead


def test_linear_identity():
    assert np.array_equal(linear_layer(np.array([1.0, 2, 3]), np.eye(3), np.zeros(3)), [1, 2, 3])


def test_linear_hand_example():
    out = linear_layer(np.array([2.0, 3.0]), np.array([[1.0, 1.0], [0.0, 2.0]]), np.array([0.5, 0.0]))
    assert np.allclose(out, [5.5, 6.0], rtol=0, atol=1e-15)


def test_linear_hand_example_gradient():
    W = np.array([[1.0, 1.0], [0.0, 2.0]])
    op = FunctionOp(
        lambda i, p: linear_layer(i["x"], p["W"], p["b"]),
        lambda i, p, g: ({"x": p["W"].T @ g}, {"W": np.outer(g, i["x"]), "b": g}),
    )
    err = finite_diff_check(op, {"x": np.array([2.0, 3.0])}, {"W": W, "b": np.array([0.5, 0.0])})
    assert err < 1e-6


def test_linear_shape_error_names_both_shapes():
    with pytest.raises(ValueError, match=r"\(2, 3\).*\(4,\)|\(4,\).*\(2, 3\)"):
        linear_layer(np.ones(4), np.ones((2, 3)), np.zeros(2))


def test_activation_examples():
    assert np.array_equal(activation("relu", np.array([-1.0, 0, 2])), [0, 0, 2])
    assert activation("sigmoid", 0.0) == 0.5
    assert activation("truncated_exp", 20.0) == np.exp(15.0)


def test_truncated_exp_gradient_respects_clamp():
    g = activation_backward("truncated_exp", np.array([14.0, 16.0]), np.ones(2))
    assert g[0] == np.exp(14.0) and g[1] == 0.0


def test_unknown_activation():
    with pytest.raises(ValueError):
        activation("tanh", np.zeros(2))


def test_mse_examples():
    a = np.random.default_rng(0).random((5, 3))
    assert mse_loss(a, a) == 0.0
    assert mse_loss(np.array([[1.0, 0, 0]]), np.zeros((1, 3))) == 1.0
    with pytest.raises(ValueError):
        mse_loss(np.zeros((0, 3)), np.zeros((0, 3)))
    with pytest.raises(ValueError):
        mse_loss(np.zeros((2, 3)), np.zeros((3, 3)))


def test_mse_backward_closed_form():
    p, t = np.array([[1.0, 2, 3], [0, 0, 1]]), np.zeros((2, 3))
    assert np.array_equal(mse_loss_backward(p, t), 2 * p / 2)


def test_constant_op_error_is_exactly_zero():
    assert finite_diff_check(ConstantOp(3.0), {"x": np.ones(4)}, {"w": np.ones(2)}) == 0.0


def test_finite_diff_rejects_non_finite_forward():
    op = FunctionOp(lambda i, p: 1.0 / i["x"], lambda i, p, g: ({"x": -g / i["x"] ** 2}, {}))
    with np.errstate(divide="ignore"), pytest.raises(FloatingPointError):
        finite_diff_check(op, {"x": np.array([0.0, 2.0])}, {})


@pytest.mark.parametrize("probe", range(10))
def test_every_op_passes_gradient_check(probe):
    r = np.random.default_rng(probe)
    x = r.standard_normal((4, 5))
    x[np.abs(x) < 0.05] = 0.3  # keep relu away from its kink
    assert finite_diff_check(LinearOp(), {"x": x}, {"weights": r.standard_normal((5, 3)),
                                                    "bias": r.standard_normal(3)}, rng=r) < 1e-6
    for kind in ("relu", "sigmoid", "exp", "truncated_exp"):
        assert finite_diff_check(ActivationOp(kind), {"x": x}, {}, rng=r) < 1e-6
    assert finite_diff_check(MSELossOp(), {"pred": r.random((6, 3)), "target": r.random((6, 3))}, {},
                             rng=r) < 1e-6


def _head_op(head, store):
    names = store.names()

    def fwd(i, p):
        store.values[:] = np.concatenate([p[n].ravel() for n in names])
        s, c, _ = head.forward(i["feats"], i["sh"])
        return np.concatenate([s[:, None], c], axis=1)

    def bwd(i, p, g):
        store.values[:] = np.concatenate([p[n].ravel() for n in names])
        store.zero_grads()
        _, _, cache = head.forward(i["feats"], i["sh"])
        d_feats = head.backward(cache, g[:, 0], g[:, 1:])
        return {"feats": d_feats}, {n: store.grad(n).copy() for n in names}

    return FunctionOp(fwd, bwd)


@pytest.mark.parametrize("dtype,tol", [(np.float64, 1e-6), (np.float32, 1e-4)])
def test_full_head_gradient(dtype, tol):
    r = np.random.default_rng(5)
    store = ParameterStore(np.float64)
    head = LevelHead(store, "h", 6, r)
    inputs = {"feats": r.standard_normal((3, 6)), "sh": r.standard_normal((3, 16))}
    if dtype == np.float32:
        # probe at a point exactly representable in 32 bits
        store.values[:] = store.values.astype(np.float32)
        inputs = {k: v.astype(np.float32).astype(np.float64) for k, v in inputs.items()}
    params = {n: store[n].copy() for n in store.names()}
    op = _head_op(head, store)
    if dtype == np.float32:
        # 32-bit backward against 64-bit central differences of the same function
        store32 = store.astype(np.float32)
        twin = copy.copy(head)
        twin.store = store32
        op32 = _head_op(twin, store32)
        op = FunctionOp(op.forward, lambda i, p, g: op32.backward(
            {k: v.astype(np.float32) for k, v in i.items()},
            {k: v.astype(np.float32) for k, v in p.items()}, g.astype(np.float32)))
    err = finite_diff_check(op, inputs, params, max_coords=20, skip=("sh",), rng=r)
    assert err < tol


def test_backward_accumulates():
    r = np.random.default_rng(2)
    store = ParameterStore(np.float64)
    head = LevelHead(store, "h", 4, r)
    feats, sh = r.standard_normal((5, 4)), r.standard_normal((5, 16))
    ds, dc = r.standard_normal(5), r.standard_normal((5, 3))
    _, _, cache = head.forward(feats, sh)
    head.backward(cache, ds, dc)
    head.backward(cache, ds, dc)
    twice = store.grads.copy()
    store.zero_grads()
    head.backward(cache, 2 * ds, 2 * dc)
    assert np.allclose(twice, store.grads, rtol=1e-12, atol=1e-14)


def test_zero_grads_without_backward():
    store = ParameterStore()
    store.add("a", np.ones((2, 3)))
    store.grads[:] = 5
    store.zero_grads()
    assert not np.any(store.grads)


@given(st.lists(st.tuples(st.text("abcdef", min_size=1, max_size=4), st.integers(1, 6)), max_size=8,
                unique_by=lambda t: t[0]))
def test_store_segments_are_disjoint_and_cover(segments):
    store = ParameterStore()
    for name, n in segments:
        store.add(name, np.full(n, float(n)))
    assert store.values.shape == store.grads.shape == (store.size,)
    covered = np.zeros(store.size, dtype=int)
    for name, n in segments:
        covered[store.span(name)] += 1
        assert np.all(store[name] == n)
    assert np.all(covered == 1)


def test_duplicate_segment_rejected():
    store = ParameterStore()
    store.add("w", np.zeros(2))
    with pytest.raises(ValueError):
        store.add("w", np.zeros(2))


@given(st.integers(1, 3 * ROW_BLOCK), st.integers(0, 3 * ROW_BLOCK - 1))
def test_blocked_matmul_rows_do_not_depend_on_batch(n, pick):
    r = np.random.default_rng(n)
    x = r.standard_normal((n, 31)).astype(np.float32)
    W = r.standard_normal((31, 128)).astype(np.float32)
    i = pick % n
    assert np.array_equal(blocked_matmul(x, W)[i], blocked_matmul(x[i:i + 1], W)[0])
    assert np.allclose(blocked_matmul(x, W), x @ W, rtol=1e-5, atol=1e-4)


def test_linear_backward_shapes_for_vector_input():
    gx, gw, gb = linear_backward(np.ones(3), np.ones((3, 2)), np.ones(2))
    assert gx.shape == (3,) and gw.shape == (3, 2) and gb.shape == (2,)

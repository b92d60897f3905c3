from __future__ import annotations

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from anticipation import diffcalc as dc
from anticipation.diffcalc import Tensor


def _param(shape, rng, scale=1.0):
    return Tensor(rng.normal(0, scale, shape), requires_grad=True)


def _naive_conv(x, w, stride):
    n, h, wd, cin = x.shape
    kh, kw, _, cout = w.shape
    ho, wo = (h - kh) // stride + 1, (wd - kw) // stride + 1
    out = np.zeros((n, ho, wo, cout))
    for b in range(n):
        for i in range(ho):
            for j in range(wo):
                patch = x[b, i * stride:i * stride + kh, j * stride:j * stride + kw, :]
                for o in range(cout):
                    out[b, i, j, o] = np.sum(patch * w[:, :, :, o])
    return out


def test_leaky_relu_values():
    y = dc.forward_op("leaky_relu", [Tensor(np.array([-1.0, 2.0]))])
    np.testing.assert_allclose(y.data, [-0.2, 2.0])


def test_identity_kernel_conv():
    rng = np.random.default_rng(0)
    x = rng.normal(size=(2, 5, 6, 1))
    y = dc.conv2d(Tensor(x), Tensor(np.ones((1, 1, 1, 1))), stride=1)
    np.testing.assert_array_equal(y.data, x)


def test_conv_shape_matches_loop_oracle():
    rng = np.random.default_rng(1)
    x = rng.normal(size=(1, 16, 16, 1))
    w = rng.normal(size=(4, 4, 1, 8))
    y = dc.conv2d(Tensor(x), Tensor(w), stride=2)
    assert y.shape == (1, 7, 7, 8)
    np.testing.assert_allclose(y.data, _naive_conv(x, w, 2), atol=1e-12)


def test_conv_transpose_is_adjoint_of_conv():
    rng = np.random.default_rng(2)
    x = rng.normal(size=(2, 10, 10, 3))
    w = rng.normal(size=(4, 4, 3, 5))
    y = rng.normal(size=(2, 4, 4, 5))
    lhs = np.sum(dc.conv2d(Tensor(x), Tensor(w), stride=2).data * y)
    # conv_transpose takes weights laid out (kh, kw, Cin_of_transpose, Cout_of_transpose)
    wt = np.transpose(w, (0, 1, 3, 2))
    rhs = np.sum(dc.conv_transpose2d(Tensor(y), Tensor(wt), stride=2).data * x)
    assert lhs == pytest.approx(rhs, rel=1e-12)


def test_shape_mismatch_names_op_and_shapes():
    with pytest.raises(dc.ShapeError, match=r"conv2d.*\(1, 8, 8, 2\).*\(3, 3, 1, 4\)"):
        dc.conv2d(Tensor(np.zeros((1, 8, 8, 2))), Tensor(np.zeros((3, 3, 1, 4))))
    with pytest.raises(dc.ShapeError, match="matmul"):
        dc.matmul(Tensor(np.zeros((2, 3))), Tensor(np.zeros((4, 5))))


def test_sigmoid_and_square_derivatives():
    x = Tensor(np.array([0.0]), requires_grad=True)
    dc.backward(dc.sum_(dc.sigmoid(x)))
    assert x.grad[0] == pytest.approx(0.25)
    x = Tensor(np.array([3.0]), requires_grad=True)
    dc.backward(dc.sum_(x * x))
    assert x.grad[0] == pytest.approx(6.0)


def test_backward_twice_raises():
    x = Tensor(np.array([1.0, 2.0]), requires_grad=True)
    loss = dc.sum_(x * x)
    dc.backward(loss)
    with pytest.raises(dc.GraphConsumedError):
        dc.backward(loss)


def test_backward_needs_scalar():
    x = Tensor(np.ones(3), requires_grad=True)
    with pytest.raises(dc.ShapeError):
        dc.backward(x * 2.0)


def test_graph_topological_and_unique():
    x = Tensor(np.ones(2), requires_grad=True)
    y = x * x
    z = dc.sum_(y + y)
    g = dc.Graph.from_root(z)
    ids = [id(n) for n in g.nodes]
    assert len(ids) == len(set(ids))
    pos = {id(n): i for i, n in enumerate(g.nodes)}
    for n in g.nodes:
        for p in n._parents:
            assert pos[id(p)] < pos[id(n)]


def test_gradcheck_linear_layer():
    rng = np.random.default_rng(3)
    x = Tensor(rng.normal(size=(4, 5)))
    w, b = _param((5, 3), rng), _param((3,), rng)
    rep = dc.grad_check(lambda: dc.sum_(dc.square(dc.dense(x, w, b))), [w, b], step=1e-5)
    assert rep.passed
    assert rep.max_rel_err < 1e-7


def test_gradcheck_conv_leaky_stack():
    rng = np.random.default_rng(4)
    x = Tensor(rng.normal(size=(2, 12, 12, 2)))
    w1, b1 = _param((4, 4, 2, 3), rng, 0.3), _param((3,), rng, 0.1)
    w2 = _param((4, 4, 3, 2), rng, 0.3)

    def fn():
        h = dc.leaky_relu(dc.conv2d(dc.pad2d(x, 1), w1, b1, stride=2))
        y = dc.conv_transpose2d(h, w2, stride=2)
        return dc.mean(dc.square(dc.tanh(dc.crop2d(y, 1))))

    rep = dc.grad_check(fn, [w1, b1, w2], step=1e-5, max_coords=20)
    assert rep.passed, rep


def test_gradcheck_empty_params_pass():
    rep = dc.grad_check(lambda: dc.sum_(Tensor(np.ones(2))), [])
    assert rep.passed and rep.blocks == []


def test_gradcheck_reports_nonfinite():
    w = Tensor(np.array([0.0]), requires_grad=True)
    rep = dc.grad_check(lambda: dc.sum_(dc.log(w)), [w])
    assert not rep.passed
    assert rep.failures and "log" in rep.failures[0]


def test_sparse_apply_matches_dense():
    import scipy.sparse as sp

    rng = np.random.default_rng(5)
    x = _param((2, 4, 4, 3), rng)
    mats = [sp.random(16, 16, density=0.3, random_state=i, format="csr") for i in range(2)]
    chans = np.array([True, False, True])
    y = dc.sparse_apply(x, mats, chans)
    for b in range(2):
        flat = x.data[b].reshape(16, 3)
        exp = flat.copy()
        exp[:, chans] = mats[b] @ flat[:, chans]
        np.testing.assert_allclose(y.data[b].reshape(16, 3), exp)
    rep = dc.grad_check(lambda: dc.sum_(dc.square(dc.sparse_apply(x, mats, chans))), [x], step=1e-6)
    assert rep.passed


def test_box_filter_matches_loop():
    rng = np.random.default_rng(6)
    x = rng.normal(size=(1, 9, 8, 2))
    y = dc.box_filter(Tensor(x), 3).data
    exp = np.array([[[x[0, i:i + 3, j:j + 3, c].mean() for c in range(2)] for j in range(6)] for i in range(7)])
    np.testing.assert_allclose(y[0], exp, atol=1e-12)


def test_float32_stays_float32():
    x = Tensor(np.ones((2, 2), dtype=np.float32), requires_grad=True)
    y = (x * 0.5 + 1.0) / 2.0 - 0.1
    assert y.dtype == np.float32


_UNARY = {
    "sigmoid": dc.sigmoid,
    "tanh": dc.tanh,
    "exp": dc.exp,
    "square": dc.square,
    "leaky_relu": dc.leaky_relu,
    "log_sq": lambda t: dc.log(dc.square(t) + 1.0),
}


@settings(max_examples=100, deadline=None)
@given(
    op=st.sampled_from(sorted(_UNARY)),
    shape=st.lists(st.integers(1, 4), min_size=1, max_size=3),
    seed=st.integers(0, 10_000),
)
def test_unary_ops_match_finite_differences(op, shape, seed):
    rng = np.random.default_rng(seed)
    x = _param(tuple(shape), rng)
    c = Tensor(rng.normal(size=tuple(shape)))
    rep = dc.grad_check(lambda: dc.sum_(_UNARY[op](x) * c), [x], step=1e-6)
    assert rep.passed, (op, rep)


@settings(max_examples=40, deadline=None)
@given(seed=st.integers(0, 10_000), a=st.floats(-3, 3), b=st.floats(-3, 3))
def test_gradient_linearity(seed, a, b):
    rng = np.random.default_rng(seed)
    w = _param((3, 2), rng)
    x = Tensor(rng.normal(size=(4, 3)))

    def f():
        return dc.sum_(dc.tanh(dc.matmul(x, w)))

    def g():
        return dc.mean(dc.square(dc.matmul(x, w)))

    grads = []
    for fn in (f, g):
        w.grad = None
        dc.backward(fn())
        grads.append(w.grad.copy())
    w.grad = None
    dc.backward(f() * a + g() * b)
    np.testing.assert_allclose(w.grad, a * grads[0] + b * grads[1], atol=1e-10)


@settings(max_examples=20, deadline=None)
@given(seed=st.integers(0, 10_000))
def test_forward_deterministic(seed):
    def run():
        rng = np.random.default_rng(seed)
        x = Tensor(rng.normal(size=(1, 8, 8, 2)))
        w = Tensor(rng.normal(size=(4, 4, 2, 3)))
        return dc.leaky_relu(dc.conv2d(dc.pad2d(x, 1), w, stride=2)).data

    assert np.array_equal(run(), run())

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from gradcheck import RTOL, check, projector
from mcunmix import ndgraph as ng


def _loop_corr1d(x, ker):
    # direct definition: out[o, r, p] = sum_c sum_t ker[o, c, t] x[c, r, p + t - k//2]
    c_out, c_in, k = ker.shape
    _, R, P = x.shape
    out = np.zeros((c_out, R, P))
    for o in range(c_out):
        for c in range(c_in):
            for r in range(R):
                for p in range(P):
                    for t in range(k):
                        q = p + t - k // 2
                        if 0 <= q < P:
                            out[o, r, p] += ker[o, c, t] * x[c, r, q]
    return out


def _loop_corr2d(x, ker):
    c_out, c_in, k, _ = ker.shape
    _, H, W = x.shape
    out = np.zeros((c_out, H, W))
    h = k // 2
    for o in range(c_out):
        for c in range(c_in):
            for i in range(H):
                for j in range(W):
                    for a in range(k):
                        for b in range(k):
                            ii, jj = i + a - h, j + b - h
                            if 0 <= ii < H and 0 <= jj < W:
                                out[o, i, j] += ker[o, c, a, b] * x[c, ii, jj]
    return out


# ---------------------------------------------------------------- matmul

def test_matmul_identity():
    a = ng.const(np.eye(2))
    b = ng.const([[1.0, 2.0], [3.0, 4.0]])
    np.testing.assert_array_equal(ng.matmul(a, b).data, [[1, 2], [3, 4]])


def test_matmul_row_by_column():
    assert ng.matmul(ng.const([[1.0, 2.0]]), ng.const([[3.0], [4.0]])).data.tolist() == [[11.0]]


def test_matmul_shape_error_names_both_shapes():
    with pytest.raises(ng.GraphError, match=r"\(2, 3\).*\(2, 3\)"):
        ng.matmul(ng.const(np.zeros((2, 3))), ng.const(np.zeros((2, 3))))


def test_matmul_gradient_of_sum():
    rng = np.random.default_rng(0)
    arrays = {"a": rng.normal(size=(3, 4)), "b": rng.normal(size=(4, 2))}
    err = check(lambda v: ng.total(ng.matmul(v["a"], v["b"])), arrays)
    assert err < 1e-5


# ---------------------------------------------------------------- convolutions

def test_conv1d_delta_is_identity():
    x = np.random.default_rng(1).normal(size=(1, 3, 9))
    out = ng.conv1d(ng.const(x), ng.const(np.array([[[0.0, 1.0, 0.0]]])))
    np.testing.assert_array_equal(out.data, x)


def test_conv1d_hand_sum():
    out = ng.conv1d(ng.const([[[1.0, 2.0, 3.0]]]), ng.const([[[1.0, 1.0, 1.0]]]))
    np.testing.assert_array_equal(out.data[0, 0], [3.0, 6.0, 5.0])


def test_conv1d_matches_dense_operator():
    rng = np.random.default_rng(2)
    x = rng.normal(size=(1, 1, 7))
    ker = rng.normal(size=(1, 1, 3))
    # dense Toeplitz matrix built entry by entry
    D = np.zeros((7, 7))
    for p in range(7):
        for t in range(3):
            q = p + t - 1
            if 0 <= q < 7:
                D[p, q] = ker[0, 0, t]
    out = ng.conv1d(ng.const(x), ng.const(ker)).data[0, 0]
    np.testing.assert_allclose(out, D @ x[0, 0], atol=1e-12, rtol=0)


def test_conv1d_matches_loop_definition_multichannel():
    rng = np.random.default_rng(3)
    x, ker = rng.normal(size=(3, 2, 8)), rng.normal(size=(4, 3, 5))
    np.testing.assert_allclose(ng.conv1d(ng.const(x), ng.const(ker)).data,
                               _loop_corr1d(x, ker), atol=1e-12)


def test_conv2d_delta_is_identity():
    x = np.random.default_rng(4).normal(size=(1, 5, 6))
    ker = np.zeros((1, 1, 3, 3))
    ker[0, 0, 1, 1] = 1.0
    np.testing.assert_array_equal(ng.conv2d(ng.const(x), ng.const(ker)).data, x)


def test_conv2d_ones_on_constant_interior():
    c = 1.7
    out = ng.conv2d(ng.const(np.full((1, 5, 5), c)), ng.const(np.ones((1, 1, 3, 3)))).data[0]
    np.testing.assert_allclose(out[1:-1, 1:-1], 9 * c, rtol=1e-15)
    assert out[0, 0] == pytest.approx(4 * c)


def test_conv2d_matches_dense_operator():
    rng = np.random.default_rng(5)
    x = rng.normal(size=(1, 4, 4))
    ker = rng.normal(size=(1, 1, 3, 3))
    D = np.zeros((16, 16))
    for i in range(4):
        for j in range(4):
            for a in range(3):
                for b in range(3):
                    ii, jj = i + a - 1, j + b - 1
                    if 0 <= ii < 4 and 0 <= jj < 4:
                        D[i * 4 + j, ii * 4 + jj] = ker[0, 0, a, b]
    out = ng.conv2d(ng.const(x), ng.const(ker)).data.ravel()
    np.testing.assert_allclose(out, D @ x.ravel(), atol=1e-12, rtol=0)


def test_conv2d_matches_loop_definition_multichannel():
    rng = np.random.default_rng(6)
    x, ker = rng.normal(size=(2, 5, 4)), rng.normal(size=(3, 2, 3, 3))
    np.testing.assert_allclose(ng.conv2d(ng.const(x), ng.const(ker)).data,
                               _loop_corr2d(x, ker), atol=1e-12)


@pytest.mark.parametrize("op,shape_x,shape_k", [
    (ng.conv1d, (1, 2, 6), (1, 1, 4)),
    (ng.conv2d, (1, 4, 4), (1, 1, 2, 2)),
])
def test_even_kernel_rejected(op, shape_x, shape_k):
    with pytest.raises(ng.GraphError, match="odd"):
        op(ng.const(np.zeros(shape_x)), ng.const(np.zeros(shape_k)))


def test_conv_channel_mismatch():
    with pytest.raises(ng.GraphError):
        ng.conv1d(ng.const(np.zeros((2, 1, 5))), ng.const(np.zeros((1, 3, 3))))


@settings(max_examples=25, deadline=None)
@given(seed=st.integers(0, 2**32 - 1), a=st.floats(-3, 3), b=st.floats(-3, 3))
def test_linearity(seed, a, b):
    rng = np.random.default_rng(seed)
    k1 = rng.normal(size=(2, 3, 3))
    x1, y1 = rng.normal(size=(3, 2, 7)), rng.normal(size=(3, 2, 7))
    f1 = lambda x: ng.conv1d(ng.const(x), ng.const(k1)).data  # noqa: E731
    np.testing.assert_allclose(f1(a * x1 + b * y1), a * f1(x1) + b * f1(y1), atol=1e-10)
    k2 = rng.normal(size=(2, 3, 3, 3))
    x2, y2 = rng.normal(size=(3, 4, 5)), rng.normal(size=(3, 4, 5))
    f2 = lambda x: ng.conv2d(ng.const(x), ng.const(k2)).data  # noqa: E731
    np.testing.assert_allclose(f2(a * x2 + b * y2), a * f2(x2) + b * f2(y2), atol=1e-10)
    M = rng.normal(size=(3, 4))
    x3, y3 = rng.normal(size=(4, 2)), rng.normal(size=(4, 2))
    f3 = lambda x: ng.matmul(ng.const(M), ng.const(x)).data  # noqa: E731
    np.testing.assert_allclose(f3(a * x3 + b * y3), a * f3(x3) + b * f3(y3), atol=1e-10)


# ---------------------------------------------------------------- pointwise

def test_soft_threshold_definition():
    out = ng.soft_threshold(ng.const([1.2, -0.3, -2.0]), 0.5).data
    np.testing.assert_allclose(out, [0.7, 0.0, -1.5], rtol=1e-15)


def test_soft_threshold_zero_is_identity():
    x = np.random.default_rng(7).normal(size=20)
    np.testing.assert_array_equal(ng.soft_threshold(ng.const(x), 0.0).data, x)


def test_soft_threshold_gradients():
    x = ng.param([1.2, -0.8, 0.1])
    z = ng.param(0.5)
    ng.total(ng.soft_threshold(x, z)).backward()
    np.testing.assert_array_equal(x.grad, [1.0, 1.0, 0.0])
    assert float(z.grad) == 0.0  # -sign(1.2) - sign(-0.8)
    x, z = ng.param([1.2, 0.9, -0.1]), ng.param(0.5)
    ng.total(ng.soft_threshold(x, z)).backward()
    assert float(z.grad) == -2.0


def test_shift_relu_definition():
    np.testing.assert_allclose(ng.shift_relu(ng.const([1.0, 0.2, -1.0]), 0.5).data, [0.5, 0.0, 0.0])


def test_softmax_normalisation():
    rng = np.random.default_rng(8)
    for _ in range(10):
        s = ng.softmax(ng.const(rng.normal(scale=5, size=(5, 7))), axis=0).data
        assert np.all(s > 0)
        np.testing.assert_allclose(s.sum(axis=0), 1.0, atol=1e-12)


def test_sigmoid_gradient_at_zero():
    x = ng.param(0.0)
    ng.sigmoid(x).backward()
    assert float(x.grad) == 0.25


def test_sigmoid_extremes_finite():
    s = ng.sigmoid(ng.const([-800.0, 800.0])).data
    assert np.all(np.isfinite(s)) and s[0] == 0.0 and s[1] == 1.0


# ---------------------------------------------------------------- backward contract

def test_backward_sum_gives_ones():
    x = ng.param(np.zeros((2, 3, 4)))
    ng.total(x).backward()
    np.testing.assert_array_equal(x.grad, np.ones((2, 3, 4)))


def test_backward_nonscalar_rejected():
    x = ng.param(np.zeros(3))
    with pytest.raises(ng.GraphError, match="scalar"):
        ng.relu(x).backward()


def test_backward_twice_rejected():
    x = ng.param(np.ones(3))
    loss = ng.sum_squares(x)
    loss.backward()
    with pytest.raises(ng.GraphError, match="already"):
        loss.backward()


def test_shared_node_gradient_accumulates():
    x = ng.param(np.array([2.0, -1.0]))
    y = ng.sigmoid(x)
    loss = ng.inner(y, y) + ng.total(y)
    loss.backward()
    s = 1 / (1 + np.exp(-x.data))
    np.testing.assert_allclose(x.grad, (2 * s + 1) * s * (1 - s), rtol=1e-14)


def test_three_layer_composition_gradcheck():
    rng = np.random.default_rng(9)
    arrays = {"x": rng.normal(size=(2, 3, 6)), "k1": rng.normal(size=(3, 2, 3)),
              "k2": rng.normal(size=(1, 3, 3)), "m": rng.normal(size=(3, 3))}
    w = projector(rng, (1, 3, 6))

    def build(v):
        h = ng.sigmoid(ng.conv1d(v["x"], v["k1"]))
        h = ng.mix(v["m"], h, axis=1)
        return ng.inner(ng.conv1d(h, v["k2"]), w)

    assert check(build, arrays) < RTOL


def test_determinism():
    rng = np.random.default_rng(10)
    x, k = rng.normal(size=(3, 6, 6)), rng.normal(size=(4, 3, 3, 3))
    a = ng.conv2d(ng.const(x), ng.const(k)).data
    b = ng.conv2d(ng.const(x.copy()), ng.const(k.copy())).data
    assert a.tobytes() == b.tobytes()


# ---------------------------------------------------------------- per-op finite differences

def _away_from(x, z, gap=1e-3):
    """Push entries of ``x`` so that ``|x| - z`` and ``x - z`` avoid the kinks."""
    for kink in (z, -z):
        close = np.abs(x - kink) < gap
        x[close] += 10 * gap
    return x


OPS = {
    "add": lambda rng: ({"a": rng.normal(size=(3, 4)), "b": rng.normal(size=(3, 4))},
                        lambda v, w: ng.inner(ng.add(v["a"], v["b"]), w), (3, 4)),
    "sub": lambda rng: ({"a": rng.normal(size=(3, 4)), "b": rng.normal(size=(3, 4))},
                        lambda v, w: ng.inner(ng.sub(v["a"], v["b"]), w), (3, 4)),
    "mul": lambda rng: ({"a": rng.normal(size=(3, 4)), "b": rng.normal(size=(3, 4))},
                        lambda v, w: ng.inner(ng.mul(v["a"], v["b"]), w), (3, 4)),
    "neg": lambda rng: ({"a": rng.normal(size=(5,))}, lambda v, w: ng.inner(ng.neg(v["a"]), w), (5,)),
    "scale": lambda rng: ({"x": rng.normal(size=(2, 3)), "s": rng.normal(size=())},
                          lambda v, w: ng.inner(ng.scale(v["x"], v["s"]), w), (2, 3)),
    "matmul": lambda rng: ({"a": rng.normal(size=(3, 4)), "b": rng.normal(size=(4, 2))},
                           lambda v, w: ng.inner(ng.matmul(v["a"], v["b"]), w), (3, 2)),
    "mix": lambda rng: ({"m": rng.normal(size=(3, 3)), "x": rng.normal(size=(2, 3, 4))},
                        lambda v, w: ng.inner(ng.mix(v["m"], v["x"], 1), w), (2, 3, 4)),
    "conv1d": lambda rng: ({"x": rng.normal(size=(2, 2, 6)), "k": rng.normal(size=(3, 2, 3))},
                           lambda v, w: ng.inner(ng.conv1d(v["x"], v["k"]), w), (3, 2, 6)),
    "conv2d": lambda rng: ({"x": rng.normal(size=(2, 4, 5)), "k": rng.normal(size=(2, 2, 3, 3))},
                           lambda v, w: ng.inner(ng.conv2d(v["x"], v["k"]), w), (2, 4, 5)),
    "relu": lambda rng: ({"x": _away_from(rng.normal(size=(4, 3)), 0.0)},
                         lambda v, w: ng.inner(ng.relu(v["x"]), w), (4, 3)),
    "sigmoid": lambda rng: ({"x": rng.normal(size=(4, 3))},
                            lambda v, w: ng.inner(ng.sigmoid(v["x"]), w), (4, 3)),
    "softmax": lambda rng: ({"x": rng.normal(size=(4, 3))},
                            lambda v, w: ng.inner(ng.softmax(v["x"], axis=0), w), (4, 3)),
    "soft_threshold": lambda rng: ({"x": _away_from(rng.normal(size=(4, 3)), 0.3), "z": np.array(0.3)},
                                   lambda v, w: ng.inner(ng.soft_threshold(v["x"], v["z"]), w), (4, 3)),
    "shift_relu": lambda rng: ({"x": _away_from(rng.normal(size=(4, 3)), 0.2), "z": np.array(0.2)},
                               lambda v, w: ng.inner(ng.shift_relu(v["x"], v["z"]), w), (4, 3)),
    "reshape": lambda rng: ({"x": rng.normal(size=(2, 6))},
                            lambda v, w: ng.inner(ng.reshape(v["x"], (3, 4)), w), (3, 4)),
    "transpose": lambda rng: ({"x": rng.normal(size=(2, 5))},
                              lambda v, w: ng.inner(ng.transpose(v["x"]), w), (5, 2)),
    "total": lambda rng: ({"x": rng.normal(size=(3, 3))}, lambda v, w: ng.total(v["x"]), None),
    "sum_squares": lambda rng: ({"x": rng.normal(size=(3, 3))}, lambda v, w: ng.sum_squares(v["x"]), None),
    "inner": lambda rng: ({"a": rng.normal(size=(3, 2)), "b": rng.normal(size=(3, 2))},
                          lambda v, w: ng.inner(v["a"], v["b"]), None),
}


@pytest.mark.parametrize("name", sorted(OPS))
def test_op_gradients_five_instances(name):
    for seed in range(5):
        rng = np.random.default_rng(1000 + seed)
        arrays, build, out_shape = OPS[name](rng)
        w = projector(rng, out_shape) if out_shape else None
        assert check(lambda v: build(v, w), arrays) < RTOL, f"{name} instance {seed}"


@settings(max_examples=100, deadline=None)
@given(seed=st.integers(0, 2**32 - 1), name=st.sampled_from(sorted(OPS)))
def test_op_gradients_random_points(seed, name):
    rng = np.random.default_rng(seed)
    arrays, build, out_shape = OPS[name](rng)
    w = projector(rng, out_shape) if out_shape else None
    assert check(lambda v: build(v, w), arrays) < RTOL


def test_thresholds_propagate_nan():
    x = ng.const(np.array([np.nan, -1.0, 2.0]))
    for out in (ng.relu(x), ng.soft_threshold(x, 0.5), ng.shift_relu(x, 0.5)):
        assert np.isnan(out.data[0]) and np.all(np.isfinite(out.data[1:]))

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from cvfnet import tensor as T
from cvfnet.errors import ConfigurationError, ContractError, DimensionError
from cvfnet.gradcheck import check_gradients
from cvfnet.tensor import Tensor

TOL = 1e-4


def rng(seed=0):
    return np.random.default_rng(seed)


def conv_loops(x, k, b, stride, pad):
    """Direct nested-loop cross-correlation."""
    c, h, w = x.shape
    kk, _, kh, kw = k.shape
    xp = np.pad(x, ((0, 0), (pad, pad), (pad, pad)))
    ho = (h + 2 * pad - kh) // stride + 1
    wo = (w + 2 * pad - kw) // stride + 1
    out = np.zeros((kk, ho, wo))
    for o in range(kk):
        for i in range(ho):
            for j in range(wo):
                acc = b[o]
                for ci in range(c):
                    for di in range(kh):
                        for dj in range(kw):
                            acc += k[o, ci, di, dj] * xp[ci, i * stride + di, j * stride + dj]
                out[o, i, j] = acc
    return out


# -- forward oracles ---------------------------------------------------------

@pytest.mark.parametrize("stride,pad,ksize", [(1, 1, 3), (2, 1, 3), (1, 0, 1), (2, 0, 1), (1, 2, 5), (2, 0, 3)])
def test_conv2d_matches_loops(stride, pad, ksize):
    r = rng(stride * 10 + pad)
    x = r.standard_normal((3, 7, 9))
    k = r.standard_normal((4, 3, ksize, ksize))
    b = r.standard_normal(4)
    got = T.conv2d(Tensor(x), Tensor(k), Tensor(b), stride=stride, padding=pad).data
    np.testing.assert_allclose(got, conv_loops(x, k, b, stride, pad), rtol=0, atol=1e-12)


def test_linear_matches_loops():
    r = rng(1)
    x, w, b = r.standard_normal((5, 4)), r.standard_normal((4, 3)), r.standard_normal(3)
    ref = np.array([[b[j] + sum(x[i, k] * w[k, j] for k in range(4)) for j in range(3)] for i in range(5)])
    np.testing.assert_allclose(T.linear(Tensor(x), Tensor(w), Tensor(b)).data, ref, rtol=0, atol=1e-12)


def test_linear_shape_error_names_axis():
    with pytest.raises(DimensionError, match="axis 1"):
        T.linear(Tensor(np.zeros((2, 3))), Tensor(np.zeros((4, 5))))


def test_add_shape_error():
    with pytest.raises(DimensionError, match="axis 1"):
        T.add(Tensor(np.zeros((2, 3))), Tensor(np.zeros((2, 4))))


def test_conv_rejects_even_kernel():
    with pytest.raises(ConfigurationError):
        T.conv2d(Tensor(np.zeros((1, 4, 4))), Tensor(np.zeros((1, 1, 2, 2))))


def test_backward_needs_scalar():
    x = Tensor(np.ones(3), requires_grad=True)
    with pytest.raises(ContractError):
        T.backward(T.mul_scalar(x, 2.0))


def test_softmax_rows_sum_to_one():
    x = rng(2).standard_normal((4, 6)) * 30
    s = T.softmax(Tensor(x), axis=1).data
    np.testing.assert_allclose(s.sum(axis=1), 1.0, atol=1e-12)


def test_sigmoid_extreme_inputs_finite():
    s = T.sigmoid_np(np.array([-800.0, 0.0, 800.0]))
    np.testing.assert_array_equal(s, [0.0, 0.5, 1.0])


def test_bilinear_sample_at_pixel_centres_is_exact():
    x = rng(3).standard_normal((2, 4, 5))
    coords = np.array([[0, 0], [4, 3], [2, 1]], dtype=float)
    out = T.bilinear_sample(Tensor(x), coords).data
    np.testing.assert_allclose(out, x[:, [0, 3, 1], [0, 4, 2]].T, atol=1e-12)


def test_bilinear_sample_midpoint():
    x = np.arange(4.0).reshape(1, 2, 2)
    out = T.bilinear_sample(Tensor(x), np.array([[0.5, 0.5]])).data
    assert out[0, 0] == pytest.approx(1.5, abs=1e-12)


def test_bilinear_resize_identity_and_corners():
    x = rng(4).standard_normal((2, 3, 5))
    np.testing.assert_array_equal(T.bilinear_resize(Tensor(x), 3, 5).data, x)
    up = T.bilinear_resize(Tensor(x), 6, 10).data
    np.testing.assert_allclose(up[:, [0, -1]][:, :, [0, -1]], x[:, [0, -1]][:, :, [0, -1]], atol=1e-12)


def test_gather_rows_bounds():
    with pytest.raises(IndexError):
        T.gather_rows(Tensor(np.zeros((3, 2))), [0, 3])


# -- gradients -----------------------------------------------------------------

def away_from_zero(a, margin=0.05):
    return np.where(np.abs(a) < margin, np.sign(a + 1e-12) * margin, a)


GRAD_CASES = {
    "add": (lambda a, b: T.add(a, b), [(3, 4), (3, 4)]),
    "mul": (lambda a, b: T.mul(a, b), [(3, 4), (3, 4)]),
    "mul_scalar": (lambda a: T.mul_scalar(a, -1.7), [(5,)]),
    "relu": (lambda a: T.relu(a), [(4, 5)]),
    "sigmoid": (lambda a: T.sigmoid(a), [(4, 5)]),
    "softmax": (lambda a: T.softmax(a, axis=1), [(3, 6)]),
    "sum": (lambda a: T.sum(a), [(3, 4)]),
    "mean": (lambda a: T.mean(a), [(3, 4)]),
    "reshape": (lambda a: T.reshape(a, (6, 2)), [(3, 4)]),
    "transpose": (lambda a: T.transpose(a, (2, 0, 1)), [(2, 3, 4)]),
    "concat": (lambda a, b: T.concat([a, b], axis=1), [(2, 3), (2, 5)]),
    "where": (lambda a, b: T.where(np.array([[True, False, True]] * 2), a, b), [(2, 3), (2, 3)]),
    "gather_rows": (lambda a: T.gather_rows(a, [2, 0, 2, 1]), [(3, 4)]),
    "scatter_rows": (lambda a: T.scatter_rows(a, [1, 4, 1, 0, 4], 6), [(5, 3)]),
    "linear": (lambda x, w, b: T.linear(x, w, b), [(4, 3), (3, 5), (5,)]),
    "conv2d_s1": (lambda x, k, b: T.conv2d(x, k, b, 1, 1), [(2, 5, 6), (3, 2, 3, 3), (3,)]),
    "conv2d_s2": (lambda x, k, b: T.conv2d(x, k, b, 2, 1), [(2, 6, 7), (3, 2, 3, 3), (3,)]),
    "conv2d_1x1": (lambda x, k: T.conv2d(x, k), [(3, 4, 4), (2, 3, 1, 1)]),
    "bilinear_resize": (lambda x: T.bilinear_resize(x, 5, 7), [(2, 3, 4)]),
    "bilinear_sample": (lambda x: T.bilinear_sample(x, np.array([[0.3, 1.2], [2.9, 0.0], [1.5, 2.5]])),
                        [(2, 3, 4)]),
}


@pytest.mark.parametrize("name", sorted(GRAD_CASES))
def test_gradients_match_finite_differences(name):
    fn, shapes = GRAD_CASES[name]
    r = rng(sum(map(ord, name)))
    inputs = [away_from_zero(r.standard_normal(s)) for s in shapes]
    errs = check_gradients(fn, inputs, eps=1e-5)
    assert max(errs) < TOL, errs


def test_gradient_accumulates_over_shared_use():
    x = Tensor(np.array([1.0, 2.0, 3.0]), requires_grad=True)
    T.backward(T.sum(T.mul(x, x)))
    np.testing.assert_allclose(x.grad, 2 * x.data)


def test_no_grad_builds_no_graph():
    x = Tensor(np.ones(3), requires_grad=True)
    with T.no_grad():
        y = T.mul_scalar(x, 2.0)
    assert not y.requires_grad and y.is_leaf


def test_long_chain_does_not_recurse():
    x = Tensor(np.ones(2), requires_grad=True)
    y = x
    for _ in range(5000):
        y = T.mul_scalar(y, 1.0)
    T.backward(T.sum(y))
    np.testing.assert_array_equal(x.grad, [1.0, 1.0])


# -- scatter / gather properties ---------------------------------------------

def scatter_oracle(x, idx, m):
    """Dict-based last-write oracle."""
    table = {}
    for i, d in enumerate(idx):
        table[int(d)] = x[i]
    out = np.zeros((m,) + x.shape[1:])
    for d, row in table.items():
        out[d] = row
    return out


@settings(max_examples=60, deadline=None)
@given(st.integers(1, 30), st.integers(1, 12), st.integers(0, 10_000))
def test_scatter_matches_dict_oracle(n, m, seed):
    r = rng(seed)
    x = r.standard_normal((n, 3))
    idx = r.integers(0, m, size=n)
    np.testing.assert_array_equal(T.scatter_rows(Tensor(x), idx, m).data, scatter_oracle(x, idx, m))


@settings(max_examples=40, deadline=None)
@given(st.integers(1, 20), st.integers(1, 10), st.integers(0, 10_000))
def test_scatter_gather_adjoint_on_winners(n, m, seed):
    # <scatter(x), y> == <x, gather(y) masked to winners>
    r = rng(seed)
    x = r.standard_normal((n, 2))
    y = r.standard_normal((m, 2))
    idx = r.integers(0, m, size=n)
    win = np.zeros(n, dtype=bool)
    win[T.last_write_winners(idx)] = True
    lhs = np.sum(T.scatter_rows(Tensor(x), idx, m).data * y)
    rhs = np.sum(x * (T.gather_rows(Tensor(y), idx).data * win[:, None]))
    assert lhs == pytest.approx(rhs, abs=1e-12)


@settings(max_examples=40, deadline=None)
@given(st.integers(1, 20), st.integers(1, 10), st.integers(0, 10_000))
def test_scatter_without_collisions_inverts_gather(n, m, seed):
    r = rng(seed)
    m = max(m, n)
    idx = r.permutation(m)[:n]
    x = r.standard_normal((n, 2))
    back = T.gather_rows(T.scatter_rows(Tensor(x), idx, m), idx).data
    np.testing.assert_array_equal(back, x)


def test_scatter_rejects_bad_index_and_reduce():
    with pytest.raises(IndexError):
        T.scatter_rows(Tensor(np.zeros((2, 1))), [0, 5], 3)
    with pytest.raises(ConfigurationError):
        T.scatter_rows(Tensor(np.zeros((2, 1))), [0, 1], 3, reduce="mean")

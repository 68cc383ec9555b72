import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from resgcn import tensor as T
from resgcn.checkpoint import read_parameters, save_parameters
from resgcn.errors import DimensionError, StateError, UsageError
from resgcn.gradcheck import check_gradients, numerical_grad, relative_error
from resgcn.tensor import Parameter, RunningStats, Tape, Tensor


def naive_matmul(a, b):
    m, k = a.shape
    _, n = b.shape
    out = np.zeros((m, n))
    for i in range(m):
        for j in range(n):
            for q in range(k):
                out[i, j] += a[i, q] * b[q, j]
    return out


def naive_conv(x, w, stride, pad):
    n, c, t, v = x.shape
    o, _, k, _ = w.shape
    xp = np.zeros((n, c, t + 2 * pad, v))
    xp[:, :, pad : pad + t] = x
    t_out = (t + 2 * pad - k) // stride + 1
    y = np.zeros((n, o, t_out, v))
    for b in range(n):
        for oc in range(o):
            for ti in range(t_out):
                for vi in range(v):
                    acc = 0.0
                    for ic in range(c):
                        for q in range(k):
                            acc += w[oc, ic, q, 0] * xp[b, ic, ti * stride + q, vi]
                    y[b, oc, ti, vi] = acc
    return y


# --- matmul -------------------------------------------------------------------

def test_matmul_identity():
    b = np.array([[1.0, 2.0], [3.0, 4.0]])
    assert np.array_equal(T.matmul(Tensor(np.eye(2)), Tensor(b)).data, b)


def test_matmul_projector():
    out = T.matmul(Tensor([[1.0, 0.0], [0.0, 0.0]]), Tensor([[5.0, 6.0], [7.0, 8.0]]))
    assert np.array_equal(out.data, [[5.0, 6.0], [0.0, 0.0]])


def test_matmul_random_vs_triple_loop():
    rng = np.random.default_rng(1)
    a, b = rng.normal(size=(3, 4)), rng.normal(size=(4, 2))
    np.testing.assert_allclose(T.matmul(Tensor(a), Tensor(b)).data, naive_matmul(a, b), rtol=0, atol=1e-12)


def test_matmul_shape_error_names_shapes():
    with pytest.raises(DimensionError, match=r"\(2, 3\).*\(2, 3\)"):
        T.matmul(Tensor(np.ones((2, 3))), Tensor(np.ones((2, 3))))


# --- conv2d ---------------------------------------------------------------------

def test_conv_identity_kernel():
    y = T.conv2d(Tensor(np.ones((1, 1, 5, 1))), Tensor(np.ones((1, 1, 1, 1))), 1, 0)
    assert np.array_equal(y.data, np.ones((1, 1, 5, 1)))


def test_conv_discrete_derivative():
    x = np.arange(5.0).reshape(1, 1, 5, 1)
    k = np.zeros(9)
    k[0], k[1] = 1.0, -1.0
    w = k.reshape(1, 1, 9, 1)
    y = T.conv2d(Tensor(x), Tensor(w), 1, 4).data[0, 0, :, 0]
    # sliding-window oracle over the zero-padded ramp
    xp = np.concatenate([np.zeros(4), np.arange(5.0), np.zeros(4)])
    expect = np.array([sum(k[q] * xp[t + q] for q in range(9)) for t in range(5)])
    assert np.array_equal(y, expect)
    # windows fully inside the ramp see x[t] - x[t+1] = -1
    assert np.all(y[4:] == -1.0)


def test_conv_stride_shape():
    y = T.conv2d(Tensor(np.zeros((1, 2, 10, 3))), Tensor(np.zeros((4, 2, 9, 1))), 2, 4)
    assert y.shape == (1, 4, 5, 3)


def test_conv_kernel_too_large():
    with pytest.raises(DimensionError):
        T.conv2d(Tensor(np.zeros((1, 1, 3, 1))), Tensor(np.zeros((1, 1, 9, 1))), 1, 2)


@pytest.mark.parametrize("stride,pad,k", [(1, 4, 9), (2, 4, 9), (1, 0, 1), (2, 0, 1), (2, 1, 3)])
def test_conv_matches_naive(stride, pad, k):
    rng = np.random.default_rng(stride * 10 + k)
    x, w = rng.normal(size=(2, 3, 11, 4)), rng.normal(size=(5, 3, k, 1))
    np.testing.assert_allclose(T.conv2d(Tensor(x), Tensor(w), stride, pad).data,
                               naive_conv(x, w, stride, pad), atol=1e-12)


@pytest.mark.parametrize("stride,pad,k", [(1, 4, 9), (2, 4, 9), (2, 0, 1)])
def test_conv_gradients(stride, pad, k):
    rng = np.random.default_rng(3)
    x = Parameter(rng.normal(size=(2, 2, 10, 3)))
    w = Parameter(rng.normal(size=(3, 2, k, 1)))
    r = rng.normal(size=T.conv2d(x, w, stride, pad).shape)
    errs = check_gradients(lambda: T.sum_(T.conv2d(x, w, stride, pad) * r), [x, w])
    assert max(errs) < 1e-6


# --- graph conv -----------------------------------------------------------------------

def test_graph_conv_matches_einsum_and_fd():
    rng = np.random.default_rng(4)
    x = Parameter(rng.normal(size=(2, 3, 4, 5)))
    w = Parameter(rng.normal(size=(3, 2, 3)))
    a = Parameter(rng.normal(size=(3, 5, 5)))
    ref = np.einsum("doc,nctv,dvw->notw", w.data, x.data, a.data)
    np.testing.assert_allclose(T.graph_conv(x, w, a).data, ref, atol=1e-12)
    r = rng.normal(size=ref.shape)
    assert max(check_gradients(lambda: T.sum_(T.graph_conv(x, w, a) * r), [x, w, a])) < 1e-6


# --- batchnorm ---------------------------------------------------------------------

def _bn(x, gamma=1.0, beta=0.0, training=True, stats=None):
    c = x.shape[1]
    stats = stats or RunningStats(c)
    return T.batchnorm(Tensor(x), Tensor(np.full(c, gamma)), Tensor(np.full(c, beta)), training, stats)


def test_batchnorm_normalizes():
    x = np.random.default_rng(0).normal(3.0, 5.0, size=(4, 3, 6, 5))
    y = _bn(x).data
    assert np.abs(y.mean(axis=(0, 2, 3))).max() < 1e-10
    assert np.abs(y.var(axis=(0, 2, 3)) - 1).max() < 1e-6


def test_batchnorm_constant_channel_gives_beta():
    x = np.full((2, 2, 3, 4), 7.0)
    assert np.allclose(_bn(x, beta=0.5).data, 0.5, atol=0, rtol=0)


def test_batchnorm_affine():
    x = np.random.default_rng(1).normal(size=(8, 2, 10, 5))
    x = (x - x.mean(axis=(0, 2, 3), keepdims=True)) / x.std(axis=(0, 2, 3), keepdims=True)
    y = _bn(x, gamma=2.0, beta=3.0).data
    assert np.abs(y.mean(axis=(0, 2, 3)) - 3).max() < 1e-6
    # epsilon sits inside the square root, so unit-variance input comes out at 2/sqrt(1+eps)
    assert np.abs(y.std(axis=(0, 2, 3)) - 2 / np.sqrt(1 + 1e-5)).max() < 1e-6


def test_batchnorm_eval_requires_stats():
    with pytest.raises(StateError):
        _bn(np.ones((2, 1, 2, 2)), training=False)


def test_batchnorm_running_stats_and_eval_purity():
    rng = np.random.default_rng(2)
    x = rng.normal(2.0, 3.0, size=(4, 2, 5, 3))
    stats = RunningStats(2)
    _bn(x, stats=stats)
    mu = x.mean(axis=(0, 2, 3))
    var = x.var(axis=(0, 2, 3), ddof=1)
    np.testing.assert_allclose(stats.mean, 0.1 * mu, atol=1e-12)
    np.testing.assert_allclose(stats.var, 0.9 + 0.1 * var, atol=1e-12)
    z = rng.normal(size=(3, 2, 4, 3))
    a = _bn(z, training=False, stats=stats).data
    b = _bn(z, training=False, stats=stats).data
    assert np.array_equal(a, b)
    expect = (z - stats.mean[None, :, None, None]) / np.sqrt(stats.var[None, :, None, None] + 1e-5)
    np.testing.assert_allclose(a, expect, atol=1e-12)


def test_batchnorm_gradients_train_mode():
    rng = np.random.default_rng(5)
    x = Parameter(rng.normal(size=(3, 2, 4, 3)))
    g = Parameter(rng.normal(size=2))
    b = Parameter(rng.normal(size=2))
    r = rng.normal(size=x.shape)
    stats = RunningStats(2)
    errs = check_gradients(lambda: T.sum_(T.batchnorm(x, g, b, True, stats) * r), [x, g, b])
    assert max(errs) < 1e-6


# --- small ops --------------------------------------------------------------------

def test_softmax_uniform():
    assert np.allclose(T.softmax(Tensor(np.zeros(5)), 0).data, 0.2, rtol=0, atol=1e-15)


def test_relu_values():
    assert np.array_equal(T.relu(Tensor([-1.0, 0.0, 2.0])).data, [0.0, 0.0, 2.0])


def test_mean_pool_arithmetic():
    assert T.mean_pool(Tensor([[1.0, 3.0], [5.0, 7.0]]), (0, 1)).item() == 4.0


def test_broadcast_error():
    with pytest.raises(DimensionError):
        T.add(Tensor(np.ones((2, 3))), Tensor(np.ones((4, 3))))


def test_concat_error():
    with pytest.raises(DimensionError):
        T.concat([Tensor(np.ones((2, 3))), Tensor(np.ones((3, 2)))], axis=0)


finite = st.floats(-50, 50, allow_nan=False, width=64)


@settings(max_examples=40, deadline=None)
@given(arrays(np.float64, (3, 6), elements=finite), st.floats(-100, 100), st.sampled_from([0, 1]))
def test_softmax_shift_invariance(x, c, axis):
    a = T.softmax(Tensor(x), axis).data
    b = T.softmax(Tensor(x + c), axis).data
    assert np.abs(a - b).max() < 1e-9
    assert np.abs(a.sum(axis=axis) - 1).max() < 1e-9


@settings(max_examples=40, deadline=None)
@given(st.lists(st.integers(1, 4), min_size=1, max_size=4), st.integers(0, 2), st.integers(0, 10**6))
def test_concat_slice_roundtrip(sizes, axis, seed):
    rng = np.random.default_rng(seed)
    xs = []
    for s in sizes:
        shape = [2, 3, 2]
        shape[axis] = s
        xs.append(rng.normal(size=shape))
    cat = T.concat([Tensor(x) for x in xs], axis)
    start = 0
    for x in xs:
        idx = [slice(None)] * 3
        idx[axis] = slice(start, start + x.shape[axis])
        assert np.array_equal(cat[tuple(idx)].data, x)
        start += x.shape[axis]


# --- tape / backward ------------------------------------------------------------------

def test_backward_linear_exact():
    x = np.random.default_rng(0).normal(size=(3, 4))
    w = Parameter(np.ones((3, 4)))
    with Tape() as tape:
        T.backward(T.sum_(w * Tensor(x)), tape)
    assert np.array_equal(w.grad, x)


def test_backward_relu_gate():
    w = Parameter([-1.0, 2.0, -3.0, 4.0])
    with Tape() as tape:
        T.backward(T.sum_(T.relu(w)), tape)
    assert np.array_equal(w.grad, [0.0, 1.0, 0.0, 1.0])


def test_backward_two_layer_net_fd():
    rng = np.random.default_rng(7)
    x = Tensor(rng.normal(size=(5, 4)))
    w1, w2 = Parameter(rng.normal(size=(4, 6))), Parameter(rng.normal(size=(6, 3)))
    b1 = Parameter(rng.normal(size=6))

    def loss():
        h = T.relu(T.matmul(x, w1) + b1)
        return T.mean_pool(T.softmax(T.matmul(h, w2), 1) * T.matmul(h, w2))

    assert max(check_gradients(loss, [w1, w2, b1])) < 1e-6


def test_backward_requires_scalar():
    w = Parameter(np.ones(3))
    with Tape() as tape:
        y = w * 2.0
        with pytest.raises(UsageError):
            T.backward(y, tape)


def test_tape_replays_in_reverse():
    w = Parameter(np.ones(3))
    with Tape() as tape:
        loss = T.sum_(T.relu(w * 2.0) + w)
        T.backward(loss, tape)
    assert tape.ops() == ["mul", "relu", "add", "sum"]
    assert tape.visited == [3, 2, 1, 0]


def test_no_recording_outside_tape():
    w = Parameter(np.ones(3))
    y = T.sum_(w * 2.0)
    assert not y.requires_grad


def test_zero_grad_and_shape():
    w = Parameter(np.ones((2, 3)))
    with Tape() as tape:
        T.backward(T.sum_(w * w), tape)
    assert w.grad.shape == w.shape and w.grad.any()
    w.zero_grad()
    assert np.all(w.grad == 0.0)


def test_gradient_accumulates_over_reuse():
    w = Parameter([1.0, 2.0])
    with Tape() as tape:
        T.backward(T.sum_(w * w + w), tape)
    assert np.array_equal(w.grad, 2 * w.data + 1)


@settings(max_examples=15, deadline=None)
@given(st.integers(0, 10**6))
def test_random_composite_graph_gradients(seed):
    rng = np.random.default_rng(seed)
    x = Tensor(rng.normal(size=(2, 3, 6, 4)))
    w = Parameter(rng.normal(size=(3, 3, 3, 1)))
    gw = Parameter(rng.normal(size=(2, 3, 3)))
    a = Parameter(np.abs(rng.normal(size=(2, 4, 4))))
    g, b = Parameter(rng.normal(size=3) + 2), Parameter(rng.normal(size=3))
    stats = RunningStats(3)

    def loss():
        h = T.conv2d(x, w, 1, 1)
        h = T.batchnorm(h, g, b, True, stats)
        h = T.graph_conv(T.relu(h) + h * 0.1, gw, a)
        p = T.softmax(T.mean_pool(h, (2, 3)), 1)
        return T.sum_(p * T.mean_pool(h, (2, 3)))

    assert max(check_gradients(loss, [w, gw, a, g, b])) < 1e-5


def test_numerical_grad_restores_values():
    p = Parameter(np.arange(4.0))
    before = p.data.copy()
    numerical_grad(lambda: T.sum_(p * p), p)
    assert np.array_equal(p.data, before)


def test_relative_error_floor():
    assert relative_error(np.array([0.0]), np.array([0.0]))[0] == 0.0


# --- checkpoint file ------------------------------------------------------------------

def test_rgcn1_roundtrip(tmp_path):
    from resgcn.nn import BatchNorm, Conv, Module

    class Tiny(Module):
        def __init__(self):
            rng = np.random.default_rng(0)
            self.conv = Conv(2, 3, rng, 3)
            self.bn = BatchNorm(3)

    m = Tiny()
    m.bn.stats.reset()
    path = tmp_path / "w.rgcn"
    save_parameters(m, path)
    raw = path.read_bytes()
    assert raw[:5] == b"RGCN1"
    recs = read_parameters(path)
    assert list(recs) == ["conv.weight", "bn.gamma", "bn.beta", "bn.stats.mean", "bn.stats.var"]
    assert np.array_equal(recs["conv.weight"][1], m.conv.weight.data)
    # payload is little-endian float64 in manifest order
    tail = np.frombuffer(raw[-8 * 3 :], dtype="<f8")
    assert np.array_equal(tail, np.ones(3))

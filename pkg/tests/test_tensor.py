import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from metaprune import functional as F
from metaprune import kernels
from metaprune.functional import BNState
from metaprune.tensor import ShapeError, Tensor, no_grad

from conftest import check_op


def conv_loops(x, w, stride, pad):
    """Direct nested-loop cross-correlation, the reference for conv2d."""
    n, c, h, wd = x.shape
    co, ci, kh, kw = w.shape
    xp = np.pad(x, ((0, 0), (0, 0), (pad, pad), (pad, pad)))
    ho = (h + 2 * pad - kh) // stride + 1
    wo = (wd + 2 * pad - kw) // stride + 1
    out = np.zeros((n, co, ho, wo))
    for b in range(n):
        for o in range(co):
            for i in range(ho):
                for j in range(wo):
                    patch = xp[b, :, i * stride:i * stride + kh, j * stride:j * stride + kw]
                    out[b, o, i, j] = np.sum(patch * w[o])
    return out


def depthwise_loops(x, w, stride, pad):
    n, c, h, wd = x.shape
    kh, kw = w.shape[2:]
    xp = np.pad(x, ((0, 0), (0, 0), (pad, pad), (pad, pad)))
    ho = (h + 2 * pad - kh) // stride + 1
    wo = (wd + 2 * pad - kw) // stride + 1
    out = np.zeros((n, c, ho, wo))
    for b in range(n):
        for ch in range(c):
            for i in range(ho):
                for j in range(wo):
                    out[b, ch, i, j] = np.sum(xp[b, ch, i * stride:i * stride + kh, j * stride:j * stride + kw] * w[ch, 0])
    return out


def matmul_loops(a, b):
    out = np.zeros((a.shape[0], b.shape[1]))
    for i in range(a.shape[0]):
        for j in range(b.shape[1]):
            out[i, j] = sum(a[i, k] * b[k, j] for k in range(a.shape[1]))
    return out


@pytest.fixture(params=kernels.available_backends())
def backend(request):
    previous = kernels.backend()
    kernels.use_backend(request.param)
    yield request.param
    kernels.use_backend(previous)


CONV_CASES = [(1, 1, 0), (3, 1, 1), (3, 2, 1), (3, 2, 0), (1, 2, 0), (2, 1, 0), (5, 1, 2)]


@pytest.mark.parametrize("k,stride,pad", CONV_CASES)
def test_conv2d_matches_loops(backend, rng, k, stride, pad):
    x = rng.standard_normal((2, 3, 7, 6))
    w = rng.standard_normal((4, 3, k, k))
    got = F.conv2d(Tensor(x), Tensor(w), stride, pad).data
    np.testing.assert_allclose(got, conv_loops(x, w, stride, pad), rtol=1e-12, atol=1e-12)


@pytest.mark.parametrize("k,stride,pad", CONV_CASES)
def test_depthwise_matches_loops(backend, rng, k, stride, pad):
    x = rng.standard_normal((2, 3, 7, 6))
    w = rng.standard_normal((3, 1, k, k))
    got = F.depthwise_conv2d(Tensor(x), Tensor(w), stride, pad).data
    np.testing.assert_allclose(got, depthwise_loops(x, w, stride, pad), rtol=1e-12, atol=1e-12)


def test_matmul_matches_loops(rng):
    a, b = rng.standard_normal((4, 5)), rng.standard_normal((5, 3))
    np.testing.assert_allclose(F.matmul(Tensor(a), Tensor(b)).data, matmul_loops(a, b), rtol=1e-12)


def test_conv_identity_kernel_is_identity(rng):
    x = rng.standard_normal((2, 3, 5, 5))
    w = np.zeros((3, 3, 3, 3))
    for c in range(3):
        w[c, c, 1, 1] = 1.0
    np.testing.assert_array_equal(F.conv2d(Tensor(x), Tensor(w), 1, 1).data, x)


def test_conv_output_extent_floors():
    y = F.conv2d(Tensor(np.ones((1, 1, 224, 224))), Tensor(np.ones((1, 1, 3, 3))), stride=2, pad=1)
    assert y.shape == (1, 1, 112, 112)


@pytest.mark.parametrize(
    "xshape,wshape,stride,pad",
    [((1, 3, 5, 5), (2, 4, 3, 3), 1, 0), ((1, 1, 2, 2), (1, 1, 3, 3), 1, 0), ((1, 1, 4, 4), (1, 1, 3, 3), 0, 0), ((3, 4), (1, 3, 1, 1), 1, 0)],
)
def test_conv_shape_errors(xshape, wshape, stride, pad):
    with pytest.raises(ShapeError):
        F.conv2d(Tensor(np.ones(xshape)), Tensor(np.ones(wshape)), stride, pad)


def test_depthwise_shape_error():
    with pytest.raises(ShapeError):
        F.depthwise_conv2d(Tensor(np.ones((1, 3, 5, 5))), Tensor(np.ones((4, 1, 3, 3))))


@pytest.mark.parametrize("k,stride,pad", CONV_CASES)
def test_backends_agree_forward_and_backward(rng, k, stride, pad):
    if len(kernels.available_backends()) < 2:
        pytest.skip("compiled kernels not built")
    x = rng.standard_normal((2, 3, 8, 7))
    w = rng.standard_normal((4, 3, k, k))
    wd = rng.standard_normal((3, 1, k, k))
    results = {}
    for name in ("cython", "python"):
        kernels.use_backend(name)
        xt, wt, wdt = Tensor(x, requires_grad=True), Tensor(w, requires_grad=True), Tensor(wd, requires_grad=True)
        y = F.conv2d(xt, wt, stride, pad)
        z = F.depthwise_conv2d(xt, wdt, stride, pad)
        (F.sum_all(y * y) + F.sum_all(z * z)).backward()
        results[name] = (y.data, z.data, xt.grad, wt.grad, wdt.grad)
    kernels.use_backend("cython")
    for a, b in zip(*results.values()):
        np.testing.assert_allclose(a, b, rtol=1e-12, atol=1e-12)


def test_use_backend_rejects_unknown():
    with pytest.raises(ValueError):
        kernels.use_backend("fortran")


def test_conv_gradients_small(backend):
    g = np.random.default_rng(7)
    for k, stride, pad in CONV_CASES:
        x, w = g.standard_normal((2, 2, 5, 5)), g.standard_normal((3, 2, k, k))
        assert check_op(lambda a, b: F.conv2d(a, b, stride, pad), [x, w], g) < 1e-4
        wd = g.standard_normal((2, 1, k, k))
        assert check_op(lambda a, b: F.depthwise_conv2d(a, b, stride, pad), [x, wd], g) < 1e-4


# ---------------------------------------------------------------- tape semantics


def test_gradient_accumulates_over_reuse():
    x = Tensor(np.array([1.0, 2.0, 3.0]), requires_grad=True)
    y = F.sum_all(x * x + x)
    y.backward()
    np.testing.assert_allclose(x.grad, 2 * x.data + 1)


def test_leaf_grads_accumulate_across_backward_calls():
    x = Tensor(np.array([1.0, -2.0]), requires_grad=True)
    F.sum_all(x * x).backward()
    F.sum_all(x * x).backward()
    np.testing.assert_allclose(x.grad, 4 * x.data)


def test_double_backward_refused():
    x = Tensor(np.ones(3), requires_grad=True)
    y = F.sum_all(x * x)
    y.backward()
    with pytest.raises(RuntimeError, match="double backward"):
        y.backward()


def test_backward_without_seed_needs_scalar():
    x = Tensor(np.ones(3), requires_grad=True)
    with pytest.raises(RuntimeError):
        (x * x).backward()


def test_no_grad_records_nothing():
    x = Tensor(np.ones(3), requires_grad=True)
    with no_grad():
        y = x * x
    assert y.entry is None and not y.requires_grad


def test_diamond_graph():
    x = Tensor(np.array(2.0), requires_grad=True)
    a = x * x
    b = a * x
    c = a + b  # x^2 + x^3
    c.backward()
    assert x.grad == pytest.approx(2 * 2.0 + 3 * 4.0)


def test_crop_gradient_zero_outside(rng):
    w = Tensor(rng.standard_normal((6, 5, 3, 3)), requires_grad=True)
    c = F.crop(w, 4, 2)
    assert c.shape == (4, 2, 3, 3)
    F.sum_all(c * Tensor(rng.standard_normal(c.shape))).backward()
    assert np.all(w.grad[4:] == 0) and np.all(w.grad[:, 2:] == 0)
    assert np.all(w.grad[:4, :2] != 0)


@pytest.mark.parametrize("sizes", [(0,), (7,), (3, 6), (1, 1, 1, 1, 1)])
def test_crop_rejects_bad_sizes(sizes):
    with pytest.raises(ShapeError):
        F.crop(Tensor(np.ones((6, 5, 3, 3))), *sizes)


def test_cross_entropy_uniform_logits():
    loss, pred = F.softmax_cross_entropy(Tensor(np.zeros((4, 10))), [0, 1, 2, 3])
    assert loss.item() == pytest.approx(np.log(10))
    assert pred.shape == (4,)


def test_cross_entropy_stable_for_large_logits():
    loss, _ = F.softmax_cross_entropy(Tensor(np.array([[1000.0, 0.0]])), [0])
    assert loss.item() == pytest.approx(0.0, abs=1e-12)


# ---------------------------------------------------------------- batch norm


def test_batchnorm_train_normalizes(rng):
    x = rng.normal(3.0, 2.0, size=(8, 4, 5, 5))
    y = F.batchnorm(Tensor(x), Tensor(np.ones(4)), Tensor(np.zeros(4)), None, training=True).data
    np.testing.assert_allclose(y.mean(axis=(0, 2, 3)), 0, atol=1e-12)
    np.testing.assert_allclose(y.var(axis=(0, 2, 3)), 1, atol=1e-4)


def test_batchnorm_running_update(rng):
    x = rng.normal(1.0, 1.0, size=(16, 3))
    st = BNState.fresh(3)
    F.batchnorm(Tensor(x), Tensor(np.ones(3)), Tensor(np.zeros(3)), st, training=True)
    np.testing.assert_allclose(st.running_mean, 0.1 * x.mean(0))
    np.testing.assert_allclose(st.running_var, 0.9 + 0.1 * x.var(0, ddof=1))


def test_batchnorm_cumulative_average(rng):
    st = BNState.fresh(2)
    batches = [rng.normal(i, 1.0, size=(10, 2)) for i in range(4)]
    for b in batches:
        F.batchnorm(Tensor(b), Tensor(np.ones(2)), Tensor(np.zeros(2)), st, training=True, momentum=None)
    np.testing.assert_allclose(st.running_mean, np.mean([b.mean(0) for b in batches], axis=0))
    np.testing.assert_allclose(st.running_var, np.mean([b.var(0, ddof=1) for b in batches], axis=0))


def test_bnstate_crop_writes_through(rng):
    st = BNState.fresh(6)
    view = st.crop(4)
    F.batchnorm(Tensor(rng.standard_normal((5, 4))), Tensor(np.ones(4)), Tensor(np.zeros(4)), view, training=True)
    assert np.all(st.running_mean[:4] != 0) and np.all(st.running_mean[4:] == 0)


def test_batchnorm_eval_needs_state():
    with pytest.raises(ValueError):
        F.batchnorm(Tensor(np.ones((2, 3))), Tensor(np.ones(3)), Tensor(np.zeros(3)), None, training=False)


# ---------------------------------------------------------------- properties


@settings(max_examples=50, deadline=None)
@given(
    st.integers(1, 3), st.integers(1, 3), st.integers(3, 7), st.integers(1, 3),
    st.integers(1, 2), st.integers(0, 1), st.integers(0, 2**31 - 1),
)
def test_conv_is_linear_in_input(n, c, h, k, stride, pad, seed):
    g = np.random.default_rng(seed)
    if h + 2 * pad < k:
        return
    x1, x2 = g.standard_normal((2, n, c, h, h))
    w = Tensor(g.standard_normal((2, c, k, k)))
    a, b = g.standard_normal(2)
    lhs = F.conv2d(Tensor(a * x1 + b * x2), w, stride, pad).data
    rhs = a * F.conv2d(Tensor(x1), w, stride, pad).data + b * F.conv2d(Tensor(x2), w, stride, pad).data
    np.testing.assert_allclose(lhs, rhs, rtol=1e-9, atol=1e-9)


@settings(max_examples=50, deadline=None)
@given(st.integers(1, 4), st.integers(1, 4), st.integers(1, 3), st.integers(1, 3), st.integers(0, 2**31 - 1))
def test_conv_adjoint_identity(n, c, co, k, seed):
    """<conv(x), g> == <x, dx(g)>: the backward pass is the exact adjoint."""
    g = np.random.default_rng(seed)
    x = Tensor(g.standard_normal((n, c, 6, 6)), requires_grad=True)
    w = Tensor(g.standard_normal((co, c, k, k)))
    y = F.conv2d(x, w, 1, k // 2)
    gy = g.standard_normal(y.shape)
    y.backward(gy)
    assert np.sum(y.data * gy) == pytest.approx(np.sum(x.data * x.grad), rel=1e-10)


@settings(max_examples=50, deadline=None)
@given(st.lists(st.integers(1, 5), min_size=1, max_size=4), st.integers(0, 2**31 - 1))
def test_crop_is_leading_subblock(extents, seed):
    g = np.random.default_rng(seed)
    w = g.standard_normal(extents)
    sizes = [int(g.integers(1, e + 1)) for e in extents]
    out = F.crop(Tensor(w), *sizes).data
    np.testing.assert_array_equal(out, w[tuple(slice(0, s) for s in sizes)])


@settings(max_examples=50, deadline=None)
@given(st.integers(1, 6), st.integers(2, 9), st.integers(0, 2**31 - 1))
def test_softmax_gradient_rows_sum_to_zero(n, k, seed):
    g = np.random.default_rng(seed)
    logits = Tensor(g.standard_normal((n, k)) * 3, requires_grad=True)
    loss, _ = F.softmax_cross_entropy(logits, g.integers(0, k, size=n))
    loss.backward()
    np.testing.assert_allclose(logits.grad.sum(axis=1), 0, atol=1e-12)


def test_sgd_step_matches_formula():
    p = Tensor(np.array([1.0, -1.0]), requires_grad=True)
    p.grad = np.array([0.5, 0.5])
    opt = F.SGD([p], lr=0.1, momentum=0.9, weight_decay=0.01)
    opt.step()
    np.testing.assert_allclose(p.data, [1.0 - 0.1 * (0.5 + 0.01), -1.0 - 0.1 * (0.5 - 0.01)])
    p.grad = np.array([0.0, 0.0])
    before = p.data.copy()
    opt.step()
    v = 0.9 * np.array([0.51, 0.49]) + 0.01 * before
    np.testing.assert_allclose(p.data, before - 0.1 * v)

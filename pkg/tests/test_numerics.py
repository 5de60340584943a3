import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from eqprop import numerics as nm


@pytest.fixture(params=nm.available_backends())
def backend(request):
    old = nm.backend()
    nm.set_backend(request.param)
    yield request.param
    nm.set_backend(old)


def conv_loops(w, x, bias, pad):
    """Direct summation reference for a single example."""
    co, ci, f, _ = w.shape
    xp = np.pad(x, ((0, 0), (pad, pad), (pad, pad)))
    ho, wo = xp.shape[1] - f + 1, xp.shape[2] - f + 1
    y = np.zeros((co, ho, wo))
    for c in range(co):
        for h in range(ho):
            for ww in range(wo):
                acc = bias[c]
                for i in range(ci):
                    for j in range(f):
                        for k in range(f):
                            acc += w[c, i, j, k] * xp[i, j + h, k + ww]
                y[c, h, ww] = acc
    return y


def test_conv_scalar(backend):
    y = nm.conv2d(np.array([[[[2.0]]]]), np.array([[[3.0]]]), np.array([0.0]))
    assert y.shape == (1, 1, 1) and y[0, 0, 0] == 6.0


def test_conv_identity_kernel(backend):
    rng = np.random.default_rng(0)
    x = rng.standard_normal((3, 6, 5))
    w = np.zeros((3, 3, 3, 3))
    for c in range(3):
        w[c, c, 1, 1] = 1.0
    np.testing.assert_array_equal(nm.conv2d(w, x, np.zeros(3), pad=1), x)


@pytest.mark.parametrize("pad", [0, 1])
def test_conv_matches_loop_oracle(backend, pad):
    rng = np.random.default_rng(1)
    w = rng.standard_normal((2, 2, 3, 3))
    x = rng.standard_normal((2, 5, 5))
    b = rng.standard_normal(2)
    np.testing.assert_allclose(nm.conv2d(w, x, b, pad), conv_loops(w, x, b, pad), rtol=1e-12, atol=1e-12)


def test_conv_batched_equals_per_example(backend):
    rng = np.random.default_rng(2)
    w = rng.standard_normal((4, 3, 3, 3))
    xs = rng.standard_normal((5, 3, 7, 6))
    batched = nm.conv2d(w, xs, pad=1)
    for i in range(5):
        np.testing.assert_array_equal(batched[i], nm.conv2d(w, xs[i], pad=1))


def test_conv_shape_errors():
    with pytest.raises(nm.ShapeError, match="C_in"):
        nm.conv2d(np.zeros((1, 2, 3, 3)), np.zeros((3, 5, 5)))
    with pytest.raises(nm.ShapeError, match="larger"):
        nm.conv2d(np.zeros((1, 1, 5, 5)), np.zeros((1, 3, 3)))
    with pytest.raises(nm.ShapeError, match="bias"):
        nm.conv2d(np.zeros((2, 1, 1, 1)), np.zeros((1, 3, 3)), np.zeros(3))


def test_transpose_scalar(backend):
    out = nm.conv2d_transpose(np.array([[[[2.0]]]]), np.array([[[5.0]]]))
    assert out.shape == (1, 1, 1) and out[0, 0, 0] == 10.0


def test_transpose_zero(backend):
    w = np.random.default_rng(3).standard_normal((2, 3, 3, 3))
    out = nm.conv2d_transpose(w, np.zeros((2, 4, 4)), pad=1)
    assert out.shape == (3, 4, 4) and not out.any()


@settings(max_examples=30, deadline=None)
@given(
    seed=st.integers(0, 2**31 - 1),
    f=st.integers(1, 4),
    pad=st.integers(0, 2),
    ci=st.integers(1, 3),
    co=st.integers(1, 3),
)
def test_adjoint_identity(seed, f, pad, ci, co):
    rng = np.random.default_rng(seed)
    h = f + rng.integers(0, 5)
    w_ = f + rng.integers(0, 5)
    w = rng.standard_normal((co, ci, f, f))
    x = rng.standard_normal((2, ci, h, w_))
    y = rng.standard_normal(nm.conv2d(w, x, pad=pad).shape)
    for name in nm.available_backends():
        nm.set_backend(name)
        lhs = nm.gdot(nm.conv2d(w, x, pad=pad), y)
        rhs = nm.gdot(x, nm.conv2d_transpose(w, y, pad=pad))
        assert abs(lhs - rhs) <= 1e-10 * max(1.0, abs(lhs))


def test_weight_grad_is_kernel_adjoint(backend):
    rng = np.random.default_rng(4)
    w = rng.standard_normal((3, 2, 3, 3))
    x = rng.standard_normal((4, 2, 6, 6))
    g = rng.standard_normal((4, 3, 6, 6))
    dw = nm.conv2d_weight_grad(x, g, pad=1)
    # <g, conv(w, x)> is linear in w, so its gradient is exact
    np.testing.assert_allclose(nm.gdot(dw, w), nm.gdot(g, nm.conv2d(w, x, pad=1)), rtol=1e-12)


def test_maxpool_basic(backend):
    y, ind = nm.maxpool(np.array([[[1.0, 2.0], [3.0, 4.0]]]), 2)
    assert y[0, 0, 0] == 4.0
    rows, cols = nm.index_offsets(ind, 2)
    assert (rows[0, 0, 0], cols[0, 0, 0]) == (1, 1)


def test_maxpool_tie_first_occurrence(backend):
    y, ind = nm.maxpool(np.full((2, 4, 4), 7.0), 2)
    assert np.all(y == 7.0) and np.all(ind == 0)
    x = np.zeros((1, 2, 2))
    x[0, 0, 1] = x[0, 1, 0] = 5.0
    _, ind = nm.maxpool(x, 2)
    assert ind[0, 0, 0] == 1


def test_maxpool_brute_force(backend):
    rng = np.random.default_rng(5)
    x = rng.standard_normal((1, 4, 4))
    y, ind = nm.maxpool(x, 2)
    for h in range(2):
        for w in range(2):
            win = x[0, 2 * h:2 * h + 2, 2 * w:2 * w + 2]
            assert y[0, h, w] == win.max()
            i, j = divmod(int(ind[0, h, w]), 2)
            assert win[i, j] == win.max()


def test_maxpool_floor_semantics(backend):
    x = np.arange(25.0).reshape(1, 5, 5)
    y, ind = nm.maxpool(x, 2)
    assert y.shape == (1, 2, 2)
    back = nm.unpool(y, ind, (5, 5), 2)
    assert back.shape == (1, 5, 5) and not back[:, 4, :].any() and not back[:, :, 4].any()


def test_unpool_example(backend):
    y, ind = nm.maxpool(np.array([[[1.0, 2.0], [3.0, 4.0]]]), 2)
    np.testing.assert_array_equal(nm.unpool(y, ind, (2, 2), 2), [[[0.0, 0.0], [0.0, 4.0]]])
    assert not nm.unpool(np.zeros_like(y), ind, (2, 2), 2).any()


def test_unpool_bad_indices():
    with pytest.raises(IndexError):
        nm.unpool(np.ones((1, 1, 1)), np.array([[[4]]], dtype=np.int8), (2, 2), 2)
    with pytest.raises(nm.ShapeError):
        nm.unpool(np.ones((1, 1, 1)), np.zeros((1, 2, 1), dtype=np.int8), (2, 2), 2)


@settings(max_examples=30, deadline=None)
@given(seed=st.integers(0, 2**31 - 1), f=st.integers(2, 3))
def test_pool_unpool_round_trip(seed, f):
    rng = np.random.default_rng(seed)
    # a permutation gives a strict maximum in every window
    x = rng.permutation(2 * 3 * (2 * f) * (3 * f)).reshape(2, 3, 2 * f, 3 * f).astype(float)
    for name in nm.available_backends():
        nm.set_backend(name)
        y, ind = nm.maxpool(x, f)
        up = nm.unpool(y, ind, x.shape, f)
        y2, ind2 = nm.maxpool(up + (up == 0) * -1e9, f)
        np.testing.assert_array_equal(y2, y)
        np.testing.assert_array_equal(ind2, ind)
        np.testing.assert_array_equal(nm.pool_gather(x, ind, f), y)


def test_gather_is_unpool_adjoint(backend):
    rng = np.random.default_rng(6)
    x = rng.standard_normal((2, 3, 6, 6))
    _, ind = nm.maxpool(x, 2)
    y = rng.standard_normal((2, 3, 3, 3))
    z = rng.standard_normal(x.shape)
    assert np.isclose(nm.gdot(nm.unpool(y, ind, x.shape, 2), z), nm.gdot(y, nm.pool_gather(z, ind, 2)))


def test_backends_agree():
    if len(nm.available_backends()) < 2:
        pytest.skip("compiled backend not built")
    rng = np.random.default_rng(7)
    x = rng.standard_normal((3, 4, 10, 10))
    w = rng.standard_normal((5, 4, 3, 3))
    g = rng.standard_normal((3, 5, 10, 10))
    out = {}
    for name in nm.available_backends():
        nm.set_backend(name)
        y, ind = nm.maxpool(x, 2)
        out[name] = (nm.conv2d(w, x, pad=1), nm.conv2d_transpose(w, g, pad=1),
                     nm.conv2d_weight_grad(x, g, pad=1), y, ind)
    for a, b in zip(out["python"], out["compiled"]):
        np.testing.assert_allclose(a, b, rtol=1e-12, atol=1e-12)


def test_hard_sigmoid_values():
    assert nm.hard_sigmoid(0.0) == 0.0
    assert nm.hard_sigmoid(1.0) == 0.5
    assert nm.hard_sigmoid(3.0) == 1.0
    assert nm.hard_sigmoid(-1.0) == 0.0


@given(st.floats(-1e6, 1e6), st.floats(-1e6, 1e6))
def test_hard_sigmoid_properties(a, b):
    lo, hi = min(a, b), max(a, b)
    assert 0.0 <= nm.hard_sigmoid(lo) <= nm.hard_sigmoid(hi) <= 1.0


def test_hard_sigmoid_slope():
    x = np.linspace(0.01, 1.99, 50)
    np.testing.assert_allclose((nm.hard_sigmoid(x + 1e-3) - nm.hard_sigmoid(x)) / 1e-3, 0.5, rtol=1e-9)
    np.testing.assert_array_equal(nm.hard_sigmoid_grad([0.0, 1.0, 2.0, -1.0, 3.0]), [0, 0.5, 0, 0, 0])


def test_softmax_examples():
    np.testing.assert_array_equal(nm.softmax([0.0, 0.0]), [0.5, 0.5])
    out = nm.softmax([1000.0, 0.0])
    assert np.all(np.isfinite(out)) and abs(out[0] - 1.0) <= 1e-12 and out[1] <= 1e-12


def test_softmax_matches_naive():
    z = np.random.default_rng(8).uniform(-5, 5, 10)
    naive = np.exp(z) / np.exp(z).sum()
    np.testing.assert_allclose(nm.softmax(z), naive, rtol=1e-13)


@given(st.lists(st.floats(-50, 50), min_size=1, max_size=12), st.floats(-100, 100))
def test_softmax_properties(z, c):
    p = nm.softmax(z)
    assert np.all(p > 0) and abs(p.sum() - 1.0) <= 1e-12
    np.testing.assert_allclose(nm.softmax(np.array(z) + c), p, atol=1e-12)


def test_gdot():
    rng = np.random.default_rng(9)
    a, b = rng.standard_normal((2, 3, 4, 5))
    assert nm.gdot(a, a) >= 0 and np.isclose(nm.gdot(a, a), np.linalg.norm(a) ** 2)
    assert nm.gdot(a, np.zeros_like(a)) == 0.0
    ref = sum(a[i, j, k] * b[i, j, k] for i in range(3) for j in range(4) for k in range(5))
    assert np.isclose(nm.gdot(a, b), ref, rtol=1e-13)
    with pytest.raises(nm.ShapeError):
        nm.gdot(a, b[:2])


def test_determinism(backend):
    rng = np.random.default_rng(10)
    w = rng.standard_normal((4, 3, 3, 3))
    x = rng.standard_normal((2, 3, 8, 8))
    a = nm.conv2d(w, x, pad=1)
    b = nm.conv2d(w, x, pad=1)
    assert a.tobytes() == b.tobytes()

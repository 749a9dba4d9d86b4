import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from bevfuse import autodiff as ad
from bevfuse.errors import ConfigError, NumericsError, ShapeError, UsageError


def test_tensor_shape_matches_buffer(rng):
    t = ad.Tensor(rng.normal(size=(3, 5)).astype(np.float32))
    assert t.shape == (3, 5)
    assert t.data.size == 15
    assert t.dtype == np.float32
    # float64 buffers pass through untouched (gradient-check mode)
    assert ad.Tensor(np.zeros(2)).dtype == np.float64
    # non-float input converts to the training dtype
    assert ad.Tensor([1, 2, 3]).dtype == np.float32


def test_tensor_rejects_non_finite():
    with pytest.raises(NumericsError):
        ad.Tensor(np.array([1.0, np.inf]))
    with pytest.raises(NumericsError):
        ad.Tensor(np.array([np.nan]))


# -- matmul ------------------------------------------------------------------

def test_matmul_identity():
    a = np.array([[1.0, 2.0], [3.0, 4.0]])
    out = ad.matmul(ad.constant(np.eye(2)), ad.constant(a))
    np.testing.assert_array_equal(out.data, a.astype(np.float32))


def test_matmul_zero_annihilator():
    out = ad.matmul(ad.constant([[1.0, 2.0]]), ad.constant([[0.0], [0.0]]))
    np.testing.assert_array_equal(out.data, [[0.0]])


def test_matmul_against_triple_loop(rng):
    a = rng.normal(size=(5, 4))
    b = rng.normal(size=(4, 3))
    expected = np.zeros((5, 3))
    for i in range(5):
        for j in range(3):
            for k in range(4):
                expected[i, j] += a[i, k] * b[k, j]
    out = ad.matmul(ad.constant(a, np.float64), ad.constant(b, np.float64))
    np.testing.assert_allclose(out.data, expected, rtol=1e-6)


def test_matmul_shape_error_reports_both_shapes():
    with pytest.raises(ShapeError) as err:
        ad.matmul(ad.constant(np.ones((2, 3))), ad.constant(np.ones((2, 3))))
    assert "(2, 3)" in str(err.value)


# -- conv2d ------------------------------------------------------------------

def test_conv2d_identity_kernel(rng):
    x = rng.normal(size=(2, 5, 5)).astype(np.float32)
    w = np.zeros((2, 2, 1, 1), dtype=np.float32)
    w[0, 0, 0, 0] = 1.0
    w[1, 1, 0, 0] = 1.0
    out = ad.conv2d(ad.constant(x), ad.constant(w), 1, 0)
    np.testing.assert_array_equal(out.data, x)


def test_conv2d_zero_kernel(rng):
    x = rng.normal(size=(3, 4, 4))
    out = ad.conv2d(ad.constant(x), ad.constant(np.zeros((2, 3, 3, 3))), 1, 1)
    assert not out.data.any()


def test_conv2d_against_six_loop(rng):
    x = rng.normal(size=(1, 5, 5))
    w = rng.normal(size=(2, 1, 3, 3))
    stride, pad = 1, 1
    xp = np.pad(x, ((0, 0), (pad, pad), (pad, pad)))
    expected = np.zeros((2, 5, 5))
    for f in range(2):
        for i in range(5):
            for j in range(5):
                acc = 0.0
                for c in range(1):
                    for u in range(3):
                        for v in range(3):
                            acc += xp[c, i * stride + u, j * stride + v] * w[f, c, u, v]
                expected[f, i, j] = acc
    out = ad.conv2d(ad.constant(x, np.float64), ad.constant(w, np.float64), stride, pad)
    np.testing.assert_allclose(out.data, expected, rtol=1e-6)


def test_conv2d_non_integral_output_is_config_error():
    x = ad.constant(np.ones((1, 6, 6)))
    w = ad.constant(np.ones((1, 1, 3, 3)))
    with pytest.raises(ConfigError):
        ad.conv2d(x, w, stride=2, padding=1)


def test_conv2d_even_kernel_rejected():
    with pytest.raises(ConfigError):
        ad.conv2d(ad.constant(np.ones((1, 4, 4))), ad.constant(np.ones((1, 1, 2, 2))), 1, 0)


# -- softmax -----------------------------------------------------------------

def test_softmax_uniform():
    out = ad.softmax(ad.constant([0.0, 0.0, 0.0]))
    np.testing.assert_allclose(out.data, [1 / 3] * 3, atol=1e-7)


def test_softmax_single_element():
    out = ad.softmax(ad.constant([[7.0]]))
    np.testing.assert_array_equal(out.data, [[1.0]])


def test_softmax_large_values_no_overflow():
    out = ad.softmax(ad.constant([1000.0, 0.0], np.float64))
    np.testing.assert_allclose(out.data, [1.0, 0.0], atol=1e-12)


@settings(deadline=None, max_examples=50)
@given(st.lists(st.floats(min_value=-50, max_value=50), min_size=1, max_size=24),
       st.integers(min_value=2, max_value=4))
def test_softmax_rows_sum_to_one(values, rows):
    data = np.tile(np.asarray(values, dtype=np.float32), (rows, 1))
    data += np.linspace(0, 1, rows, dtype=np.float32)[:, None]
    out = ad.softmax(ad.constant(data), axis=-1)
    np.testing.assert_allclose(out.data.sum(axis=-1), np.ones(rows), atol=1e-6)


# -- bilinear sampling ---------------------------------------------------------

def test_bilinear_lattice_point(rng):
    fmap = rng.normal(size=(3, 5, 6)).astype(np.float32)
    out = ad.bilinear_sample(ad.constant(fmap), np.array([[2.0, 3.0]]))
    np.testing.assert_allclose(out.data[0], fmap[:, 2, 3], rtol=1e-6)


def test_bilinear_midpoint():
    fmap = np.zeros((1, 1, 2), dtype=np.float32)
    fmap[0, 0, 1] = 1.0
    out = ad.bilinear_sample(ad.constant(fmap), np.array([[0.0, 0.5]]))
    np.testing.assert_allclose(out.data, [[0.5]])


def test_bilinear_against_four_corner_sum(rng):
    fmap = rng.normal(size=(4, 7, 9))
    r, c = 3.37, 5.81
    r0, c0 = int(r), int(c)
    fr, fc = r - r0, c - c0
    expected = (
        fmap[:, r0, c0] * (1 - fr) * (1 - fc)
        + fmap[:, r0, c0 + 1] * (1 - fr) * fc
        + fmap[:, r0 + 1, c0] * fr * (1 - fc)
        + fmap[:, r0 + 1, c0 + 1] * fr * fc
    )
    out = ad.bilinear_sample(ad.constant(fmap, np.float64), np.array([[r, c]]))
    np.testing.assert_allclose(out.data[0], expected, rtol=1e-12)


def test_bilinear_clamps_to_border(rng):
    fmap = rng.normal(size=(2, 4, 4)).astype(np.float32)
    out = ad.bilinear_sample(ad.constant(fmap), np.array([[-3.0, -3.0], [10.0, 10.0]]))
    np.testing.assert_allclose(out.data[0], fmap[:, 0, 0], rtol=1e-6)
    np.testing.assert_allclose(out.data[1], fmap[:, 3, 3], rtol=1e-6)


# -- focal loss ----------------------------------------------------------------

def _focal_reference(pred, target, alpha=2.0, beta=4.0):
    total = 0.0
    n_pos = max(1, int((target == 1.0).sum()))
    for p, t in zip(pred.ravel(), target.ravel()):
        if t == 1.0:
            total += (1 - p) ** alpha * np.log(p)
        else:
            total += (1 - t) ** beta * p ** alpha * np.log(1 - p)
    return -total / n_pos


def test_focal_near_perfect_peak():
    target = np.zeros((1, 3, 3), dtype=np.float32)
    target[0, 1, 1] = 1.0
    pred = np.full((1, 3, 3), 1e-7, dtype=np.float32)
    pred[0, 1, 1] = 1.0 - 1e-7
    loss = ad.focal_loss(ad.constant(pred), ad.constant(target))
    assert float(loss.data) < 1e-5


def test_focal_empty_target_uniform_low_pred():
    target = np.zeros((1, 4, 4), dtype=np.float32)
    pred = np.full((1, 4, 4), 1e-7, dtype=np.float32)
    loss = ad.focal_loss(ad.constant(pred), ad.constant(target))
    assert float(loss.data) < 1e-4


def test_focal_matches_per_pixel_formula(rng):
    pred = rng.uniform(0.01, 0.99, (1, 4, 4))
    target = rng.uniform(0.0, 0.9, (1, 4, 4))
    target[0, 0, 1] = 1.0
    target[0, 2, 3] = 1.0
    loss = ad.focal_loss(ad.constant(pred, np.float64), ad.constant(target, np.float64))
    np.testing.assert_allclose(float(loss.data), _focal_reference(pred, target), rtol=1e-9)


# -- backward ------------------------------------------------------------------

def test_backward_of_sum_is_ones(rng):
    x = ad.parameter(rng.normal(size=(3, 4)))
    with ad.Tape() as tape:
        loss = ad.sum_all(x)
    grads = ad.backward(tape, loss)
    np.testing.assert_array_equal(grads[x], np.ones((3, 4), dtype=np.float32))


def test_backward_of_square_sum():
    x = ad.parameter(np.array([1.0, 2.0]))
    with ad.Tape() as tape:
        loss = ad.sum_all(ad.mul(x, x))
    grads = ad.backward(tape, loss)
    np.testing.assert_allclose(grads[x], [2.0, 4.0])


def test_backward_requires_scalar_loss(rng):
    x = ad.parameter(rng.normal(size=(3,)))
    with ad.Tape() as tape:
        y = ad.mul(x, x)
    with pytest.raises(UsageError):
        ad.backward(tape, y)


def test_backward_visits_each_entry_once():
    x = ad.parameter(np.array([1.0, 2.0]))
    with ad.Tape() as tape:
        y = ad.mul(x, x)
        z = ad.add(y, y)
        loss = ad.sum_all(z)
    counts = []
    for entry in tape.entries:
        inner = entry.backward
        holder = [0]

        def counted(g, inner=inner, holder=holder):
            holder[0] += 1
            return inner(g)

        entry.backward = counted
        counts.append(holder)
    grads = ad.backward(tape, loss)
    assert [h[0] for h in counts] == [1, 1, 1]
    np.testing.assert_allclose(grads[x], [4.0, 8.0])


def test_backward_is_bitwise_deterministic(rng):
    x = ad.parameter(rng.normal(size=(4, 4)))
    w = ad.parameter(rng.normal(size=(4, 4)))

    def run():
        with ad.Tape() as tape:
            h = ad.relu(ad.matmul(x, w))
            loss = ad.sum_all(ad.mul(h, h))
        g = ad.backward(tape, loss)
        return g[x].copy(), g[w].copy()

    gx1, gw1 = run()
    gx2, gw2 = run()
    assert gx1.tobytes() == gx2.tobytes()
    assert gw1.tobytes() == gw2.tobytes()


def test_non_finite_op_output_raises():
    big = ad.constant(np.exp(np.array([700.0])))
    with np.errstate(over="ignore"):
        with pytest.raises(NumericsError):
            ad.mul(big, big)


# -- misc ops -------------------------------------------------------------------

def test_concat_and_split_gradients(rng):
    a = ad.parameter(rng.normal(size=(2, 3)))
    b = ad.parameter(rng.normal(size=(1, 3)))
    with ad.Tape() as tape:
        loss = ad.sum_all(ad.mul(ad.concat([a, b], axis=0), ad.constant(np.full((3, 3), 2.0))))
    grads = ad.backward(tape, loss)
    np.testing.assert_allclose(grads[a], np.full((2, 3), 2.0))
    np.testing.assert_allclose(grads[b], np.full((1, 3), 2.0))


def test_max_axis_routes_gradient_to_first_max():
    x = ad.parameter(np.array([[1.0, 3.0, 3.0]]))
    with ad.Tape() as tape:
        loss = ad.sum_all(ad.max_axis(x, axis=1))
    grads = ad.backward(tape, loss)
    np.testing.assert_array_equal(grads[x], [[0.0, 1.0, 0.0]])


def test_scatter_duplicate_coords_rejected(rng):
    from bevfuse.errors import InternalError

    feats = ad.constant(rng.normal(size=(2, 3)))
    with pytest.raises(InternalError):
        ad.scatter_to_grid(feats, np.array([1, 1]), np.array([2, 2]), 4, 4)


def test_avgpool_halves_exactly(rng):
    x = rng.normal(size=(1, 4, 4))
    out = ad.avgpool2x2(ad.constant(x, np.float64))
    np.testing.assert_allclose(out.data[0, 0, 0], x[0, :2, :2].mean(), rtol=1e-12)


def test_upsample_then_pool_is_identity(rng):
    x = rng.normal(size=(2, 3, 3))
    out = ad.avgpool2x2(ad.upsample_nearest2(ad.constant(x, np.float64)))
    np.testing.assert_allclose(out.data, x, rtol=1e-12)

"""Autodiff core: forward semantics, gradients, determinism."""

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from dspm import diffcore as dc
from dspm.errors import DimensionError, NonFiniteError


def test_conv2d_identity_kernel():
    rng = np.random.default_rng(0)
    x = dc.Array(rng.standard_normal((3, 6, 7)))
    k = dc.Array(np.ones((3, 3, 1, 1)) * np.eye(3)[:, :, None, None])
    out = dc.conv2d(x, k)
    np.testing.assert_allclose(out.data, x.data, rtol=1e-6)


def test_conv2d_box_filter_on_constant():
    x = dc.Array(np.full((1, 5, 5), 2.5))
    k = dc.Array(np.full((1, 1, 3, 3), 1.0 / 9.0))
    out = dc.conv2d(x, k)
    np.testing.assert_allclose(out.data[0, 1:-1, 1:-1], 2.5, rtol=1e-6)


def test_conv2d_matches_finite_differences():
    rng = np.random.default_rng(7)
    x = dc.Array(rng.standard_normal((2, 3, 5, 5)), requires_grad=True, dtype=np.float64)
    w = dc.Array(rng.standard_normal((4, 3, 3, 3)) * 0.5, requires_grad=True, dtype=np.float64)
    hw = dc.Array(rng.standard_normal((2, 4, 5, 5)), dtype=np.float64)
    err = dc.finite_difference_check(lambda a, b: dc.reduce_sum(dc.mul(dc.conv2d(a, b), hw)), [x, w])
    assert err < 1e-3


def test_conv2d_shape_mismatch():
    x = dc.Array(np.zeros((2, 4, 4)))
    w = dc.Array(np.zeros((1, 3, 3, 3)))
    with pytest.raises(DimensionError):
        dc.conv2d(x, w)


def test_bilinear_sample_lattice_identity():
    rng = np.random.default_rng(1)
    m = dc.Array(rng.standard_normal((2, 4, 5)))
    ys, xs = np.mgrid[0:4, 0:5]
    coords = dc.Array(np.stack([xs, ys]).astype(np.float32))
    out = dc.bilinear_sample(m, coords)
    np.testing.assert_allclose(out.data, m.data, rtol=1e-6)


def test_bilinear_sample_midpoint():
    m = dc.Array(np.array([[[2.0, 4.0]]]))
    coords = dc.Array(np.array([[[0.5]], [[0.0]]]))
    out = dc.bilinear_sample(m, coords)
    assert out.data[0, 0, 0] == pytest.approx(3.0)


def test_bilinear_sample_border_clamp():
    m = dc.Array(np.arange(12, dtype=np.float32).reshape(1, 3, 4))
    coords = dc.Array(np.array([[[-5.0]], [[-5.0]]]))
    out = dc.bilinear_sample(m, coords)
    assert out.data[0, 0, 0] == pytest.approx(m.data[0, 0, 0])


def test_backward_square():
    x = dc.Array(3.0, requires_grad=True)
    y = dc.mul(x, x)
    dc.backward(y)
    assert x.grad == pytest.approx(6.0)


def test_backward_leaky_relu_negative_branch():
    x = dc.Array(-2.0, requires_grad=True)
    y = dc.leaky_relu(x, slope=0.1)
    dc.backward(y)
    assert x.grad == pytest.approx(0.1)


def test_backward_rejects_non_scalar():
    x = dc.Array(np.zeros(3), requires_grad=True)
    with pytest.raises(ValueError):
        dc.backward(dc.mul(x, 2.0))


def test_composite_graph_gradcheck():
    rng = np.random.default_rng(11)
    x = dc.Array(rng.standard_normal((1, 2, 6, 6)), requires_grad=True, dtype=np.float64)
    w = dc.Array(rng.standard_normal((3, 2, 3, 3)) * 0.4, requires_grad=True, dtype=np.float64)
    gam = dc.Array(np.ones(3), requires_grad=True, dtype=np.float64)
    bet = dc.Array(np.zeros(3), requires_grad=True, dtype=np.float64)
    rm, rv = np.zeros(3), np.ones(3)

    def fn(a, b, g, c):
        y = dc.batch_norm(dc.conv2d(a, b), g, c, rm.copy(), rv.copy(), training=True)
        return dc.reduce_sum(dc.softmax(y, axis=1))

    err = dc.finite_difference_check(fn, [x, w, gam, bet], max_entries=40)
    assert err < 1e-3


def test_gradcheck_suite_all_primitives_pass():
    rows = dc.gradcheck_suite(seed=3, instances=2)
    failed = [(n, e) for n, e, ok in rows if not ok]
    assert not failed, f"gradient failures: {failed}"


def test_gradcheck_suite_catches_injected_fault():
    dc._FAULT_INJECTION = True
    try:
        rows = dc.gradcheck_suite(seed=3, instances=1)
    finally:
        dc._FAULT_INJECTION = False
    assert any(not ok for _, _, ok in rows)


@given(st.integers(min_value=0, max_value=2 ** 31 - 1))
@settings(max_examples=25, deadline=None)
def test_softmax_rows_are_distributions(seed):
    rng = np.random.default_rng(seed)
    x = dc.Array(rng.standard_normal((4, 6)) * 5.0)
    y = dc.softmax(x, axis=1).data
    assert (y >= 0).all()
    np.testing.assert_allclose(y.sum(axis=1), 1.0, atol=1e-6)


def test_backward_is_deterministic():
    def run():
        rng = np.random.default_rng(5)
        x = dc.Array(rng.standard_normal((2, 3, 8, 8)).astype(np.float32), requires_grad=True)
        w = dc.Array(rng.standard_normal((4, 3, 3, 3)).astype(np.float32) * 0.3, requires_grad=True)
        y = dc.conv2d(x, w, stride=2, padding=1)
        loss = dc.reduce_sum(dc.mul(dc.softmax(y, axis=1), y))
        dc.backward(loss)
        return x.grad.copy(), w.grad.copy(), loss.data.copy()

    a = run()
    b = run()
    for u, v in zip(a, b):
        assert np.array_equal(u, v)


def test_nan_detection():
    x = dc.Array(np.array([1.0, 0.0]))
    with pytest.raises(NonFiniteError):
        dc.log(x)  # log(0) = -inf


def test_upsample_nearest_shape_and_values():
    x = dc.Array(np.arange(6, dtype=np.float32).reshape(1, 2, 3))
    y = dc.upsample2x_nearest(x)
    assert y.data.shape == (1, 4, 6)
    assert y.data[0, 0, 0] == y.data[0, 1, 1] == x.data[0, 0, 0]


def test_upsample_bilinear_constant_preserved():
    x = dc.Array(np.full((2, 3, 4), 1.7, dtype=np.float32))
    y = dc.upsample2x_bilinear(x)
    np.testing.assert_allclose(y.data, 1.7, rtol=1e-6)


def test_batch_norm_inference_uses_running_stats():
    x = dc.Array(np.random.default_rng(0).standard_normal((2, 3, 4, 4)).astype(np.float32))
    gam = dc.Array(np.ones(3, dtype=np.float32))
    bet = dc.Array(np.zeros(3, dtype=np.float32))
    rm = np.array([1.0, -1.0, 0.5])
    rv = np.array([4.0, 1.0, 0.25])
    y = dc.batch_norm(x, gam, bet, rm, rv, training=False)
    expect = (x.data - rm.reshape(1, 3, 1, 1)) / np.sqrt(rv.reshape(1, 3, 1, 1) + 1e-5)
    np.testing.assert_allclose(y.data, expect.astype(np.float32), atol=1e-5)


def test_batch_norm_training_updates_running_stats():
    rng = np.random.default_rng(2)
    x = dc.Array(rng.standard_normal((4, 2, 3, 3)).astype(np.float32) + 2.0)
    gam = dc.Array(np.ones(2, dtype=np.float32))
    bet = dc.Array(np.zeros(2, dtype=np.float32))
    rm = np.zeros(2)
    rv = np.ones(2)
    dc.batch_norm(x, gam, bet, rm, rv, training=True, momentum=0.9)
    batch_mean = x.data.mean(axis=(0, 2, 3))
    np.testing.assert_allclose(rm, 0.1 * batch_mean, rtol=1e-5)


def test_no_grad_suppresses_graph():
    x = dc.Array(2.0, requires_grad=True)
    with dc.no_grad():
        y = dc.mul(x, x)
    assert not y.requires_grad and y._backward is None


def test_select_argmax_picks_best_and_routes_grad():
    v = dc.Array(np.array([[[1.0]], [[5.0]], [[3.0]]]), requires_grad=True)
    s = dc.Array(np.array([[[0.0]], [[-1.0]], [[2.0]]]))
    out = dc.select_argmax(v, s)
    assert out.data[0, 0] == pytest.approx(3.0)
    dc.backward(dc.reduce_sum(out))
    np.testing.assert_allclose(v.grad.ravel(), [0.0, 0.0, 1.0])

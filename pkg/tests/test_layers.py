import itertools

import numpy as np
import pytest

from errors import ShapeError
from layers import (
    batchnorm_backward,
    batchnorm_forward,
    conv2d_backward,
    conv2d_forward,
    conv_geometry,
    dense_backward,
    dense_forward,
    depthwise_backward,
    depthwise_forward,
    gap_backward,
    gap_forward,
    relu6_forward,
    relu6_regions,
    sigmoid_backward,
    sigmoid_forward,
)
from network import numerical_gradient


@pytest.fixture
def rng():
    return np.random.default_rng(5)


def _all_coords(array, limit=40, seed=0):
    coords = list(itertools.product(*[range(s) for s in array.shape]))
    if len(coords) > limit:
        picks = np.random.default_rng(seed).choice(len(coords), size=limit, replace=False)
        coords = [coords[i] for i in sorted(picks)]
    return coords


def _assert_grad(fn, array, analytic, tol=1e-6):
    numeric = numerical_gradient(fn, array, _all_coords(array), eps=1e-6)
    for idx, value in numeric.items():
        assert value == pytest.approx(analytic[idx], rel=tol, abs=tol)


def _naive_conv(x, w, stride, pads):
    pt, pb, pl, pr = pads
    xp = np.pad(x, ((0, 0), (0, 0), (pt, pb), (pl, pr)))
    n, _, hp, wp = xp.shape
    o, _, k, _ = w.shape
    ho, wo = (hp - k) // stride + 1, (wp - k) // stride + 1
    out = np.zeros((n, o, ho, wo))
    for b, oc, i, j in itertools.product(range(n), range(o), range(ho), range(wo)):
        out[b, oc, i, j] = np.sum(xp[b, :, i * stride:i * stride + k, j * stride:j * stride + k] * w[oc])
    return out


# ============================================================================
# GEOMETRY
# ============================================================================

def test_same_padding_geometry():
    assert conv_geometry(7, 8, 3, 2, "same") == (4, 4, (1, 1, 0, 1))
    assert conv_geometry(8, 8, 1, 1, "same") == (8, 8, (0, 0, 0, 0))
    assert conv_geometry(7, 7, 3, 1, "valid") == (5, 5, (0, 0, 0, 0))


def test_valid_padding_rejects_small_input():
    with pytest.raises(ShapeError):
        conv_geometry(2, 2, 3, 1, "valid")


# ============================================================================
# CONVOLUTIONS
# ============================================================================

def test_conv2d_matches_direct_sum(rng):
    x = rng.normal(size=(2, 3, 7, 8))
    w = rng.normal(size=(4, 3, 3, 3))
    out, _ = conv2d_forward(x, w, stride=2, padding="same")
    _, _, pads = conv_geometry(7, 8, 3, 2, "same")
    assert np.allclose(out, _naive_conv(x, w, 2, pads))


def test_conv2d_gradients(rng):
    x = rng.normal(size=(2, 3, 5, 6))
    w = rng.normal(size=(4, 3, 3, 3))
    b = rng.normal(size=4)
    r = rng.normal(size=(2, 4, 3, 3))

    def loss():
        return float(np.sum(conv2d_forward(x, w, b, stride=2)[0] * r))

    _, cache = conv2d_forward(x, w, b, stride=2)
    dx, dw, db = conv2d_backward(r, cache)
    _assert_grad(loss, x, dx)
    _assert_grad(loss, w, dw)
    _assert_grad(loss, b, db)


def test_conv2d_rejects_wrong_channels(rng):
    with pytest.raises(ShapeError):
        conv2d_forward(rng.normal(size=(1, 2, 4, 4)), rng.normal(size=(4, 3, 1, 1)))


def test_depthwise_matches_per_channel_conv(rng):
    x = rng.normal(size=(2, 3, 6, 6))
    w = rng.normal(size=(3, 1, 3, 3))
    out, _ = depthwise_forward(x, w, stride=1)
    for c in range(3):
        ref = _naive_conv(x[:, c:c + 1], w[c:c + 1], 1, (1, 1, 1, 1))
        assert np.allclose(out[:, c:c + 1], ref)


def test_depthwise_gradients(rng):
    x = rng.normal(size=(2, 3, 5, 5))
    w = rng.normal(size=(3, 1, 3, 3))
    r = rng.normal(size=(2, 3, 3, 3))

    def loss():
        return float(np.sum(depthwise_forward(x, w, stride=2)[0] * r))

    _, cache = depthwise_forward(x, w, stride=2)
    dx, dw, db = depthwise_backward(r, cache)
    assert db is None
    _assert_grad(loss, x, dx)
    _assert_grad(loss, w, dw)


# ============================================================================
# BATCH NORM
# ============================================================================

def test_batchnorm_train_gradients(rng):
    x = rng.normal(size=(3, 4, 3, 3))
    gamma = rng.uniform(0.5, 1.5, size=4)
    beta = rng.normal(size=4)
    r = rng.normal(size=x.shape)
    zeros, ones = np.zeros(4), np.ones(4)

    def loss():
        return float(np.sum(batchnorm_forward(x, gamma, beta, zeros, ones, train=True)[0] * r))

    _, cache, stats = batchnorm_forward(x, gamma, beta, zeros, ones, train=True)
    assert np.allclose(stats[0], x.mean(axis=(0, 2, 3)))
    dx, dgamma, dbeta = batchnorm_backward(r, cache)
    _assert_grad(loss, x, dx, tol=1e-5)
    _assert_grad(loss, gamma, dgamma)
    _assert_grad(loss, beta, dbeta)


def test_batchnorm_infer_uses_running_stats(rng):
    x = rng.normal(size=(2, 3, 2, 2))
    gamma, beta = rng.normal(size=3), rng.normal(size=3)
    mean, var = rng.normal(size=3), rng.uniform(0.5, 2.0, size=3)
    out, _, stats = batchnorm_forward(x, gamma, beta, mean, var, eps=1e-5)
    expected = gamma[None, :, None, None] * (x - mean[None, :, None, None]) / np.sqrt(
        var[None, :, None, None] + 1e-5) + beta[None, :, None, None]
    assert stats is None
    assert np.allclose(out, expected)


def test_batchnorm_handles_flat_features(rng):
    x = rng.normal(size=(5, 3))
    out, _, _ = batchnorm_forward(x, np.ones(3), np.zeros(3), np.zeros(3), np.ones(3), train=True)
    assert np.allclose(out.mean(axis=0), 0.0, atol=1e-12)


# ============================================================================
# ELEMENTWISE / HEAD
# ============================================================================

def test_relu6_clips_and_reports_regions():
    x = np.array([-1.0, 0.5, 6.0, 7.0])
    out, _ = relu6_forward(x)
    assert out.tolist() == [0.0, 0.5, 6.0, 6.0]
    assert relu6_regions(x).tolist() == [0, 1, 2, 2]


def test_gap_gradient_spreads_evenly(rng):
    x = rng.normal(size=(2, 3, 4, 5))
    out, shape = gap_forward(x)
    assert out.shape == (2, 3)
    dx = gap_backward(np.ones((2, 3)), shape)
    assert np.allclose(dx, 1.0 / 20.0)


def test_dense_gradients(rng):
    x = rng.normal(size=(4, 6))
    w = rng.normal(size=(6, 3))
    b = rng.normal(size=3)
    r = rng.normal(size=(4, 3))

    def loss():
        return float(np.sum(dense_forward(x, w, b)[0] * r))

    _, cache = dense_forward(x, w, b)
    dx, dw, db = dense_backward(r, cache)
    _assert_grad(loss, x, dx)
    _assert_grad(loss, w, dw)
    _assert_grad(loss, b, db)


def test_sigmoid_is_stable_at_extremes():
    out, _ = sigmoid_forward(np.array([-1000.0, 0.0, 1000.0], dtype=np.float32))
    assert np.all(np.isfinite(out))
    assert 0.0 < out[0] < 1e-30
    assert out[1] == pytest.approx(0.5)
    assert out[2] < 1.0


def test_sigmoid_gradient(rng):
    x = rng.normal(size=(3, 4))
    r = rng.normal(size=(3, 4))

    def loss():
        return float(np.sum(sigmoid_forward(x)[0] * r))

    _, out = sigmoid_forward(x)
    _assert_grad(loss, x, sigmoid_backward(r, out))

"""
Per-layer forward/backward kernels on NCHW (or NF) numpy arrays.

Each `*_forward` returns (output, cache); the matching `*_backward` takes the
upstream gradient and that cache. Kernels are dtype-preserving, so the same
code runs in float32 for training and float64 for gradient checks.
"""

import logging
from typing import Optional, Tuple

import numpy as np

from errors import ShapeError

logger = logging.getLogger(__name__)

Pads = Tuple[int, int, int, int]


# ============================================================================
# PADDING
# ============================================================================

def _same_axis(size: int, kernel: int, stride: int) -> Tuple[int, int, int]:
    out = -(-size // stride)
    total = max((out - 1) * stride + kernel - size, 0)
    return out, total // 2, total - total // 2


def conv_geometry(h: int, w: int, kernel: int, stride: int, padding: str) -> Tuple[int, int, Pads]:
    """Output size and (top, bottom, left, right) zero padding."""
    if padding == "same":
        ho, pt, pb = _same_axis(h, kernel, stride)
        wo, pl, pr = _same_axis(w, kernel, stride)
        return ho, wo, (pt, pb, pl, pr)
    if padding == "valid":
        ho = (h - kernel) // stride + 1
        wo = (w - kernel) // stride + 1
        if ho < 1 or wo < 1:
            raise ShapeError(f"input {h}x{w} smaller than kernel {kernel} with valid padding")
        return ho, wo, (0, 0, 0, 0)
    raise ShapeError(f"unknown padding '{padding}'")


def _pad(x: np.ndarray, pads: Pads) -> np.ndarray:
    pt, pb, pl, pr = pads
    if not any(pads):
        return x
    return np.pad(x, ((0, 0), (0, 0), (pt, pb), (pl, pr)))


def _window(xp: np.ndarray, i: int, j: int, stride: int, ho: int, wo: int) -> np.ndarray:
    return xp[:, :, i:i + stride * (ho - 1) + 1:stride, j:j + stride * (wo - 1) + 1:stride]


def _check_4d(x: np.ndarray, channels: int, what: str) -> None:
    if x.ndim != 4:
        raise ShapeError(f"{what} expects a 4-D NCHW input, got shape {x.shape}")
    if x.shape[1] != channels:
        raise ShapeError(f"{what} expects {channels} input channels, got {x.shape[1]}")


# ============================================================================
# CONVOLUTIONS
# ============================================================================

def conv2d_forward(
    x: np.ndarray,
    w: np.ndarray,
    b: Optional[np.ndarray] = None,
    stride: int = 1,
    padding: str = "same",
) -> Tuple[np.ndarray, tuple]:
    """Dense convolution; w has shape (out, in, k, k)."""
    out_c, in_c, kh, kw = w.shape
    _check_4d(x, in_c, "conv2d")
    n, _, h, wd = x.shape
    ho, wo, pads = conv_geometry(h, wd, kh, stride, padding)
    xp = _pad(x, pads)
    out = np.zeros((n, out_c, ho, wo), dtype=x.dtype)
    for i in range(kh):
        for j in range(kw):
            patch = _window(xp, i, j, stride, ho, wo)
            out += np.tensordot(patch, w[:, :, i, j], axes=([1], [1])).transpose(0, 3, 1, 2)
    if b is not None:
        out += b[None, :, None, None]
    return out, (x.shape, xp, w, stride, pads, b is not None)


def conv2d_backward(dout: np.ndarray, cache: tuple) -> Tuple[np.ndarray, np.ndarray, Optional[np.ndarray]]:
    xshape, xp, w, stride, pads, has_bias = cache
    _, _, kh, kw = w.shape
    ho, wo = dout.shape[2:]
    dxp = np.zeros_like(xp)
    dw = np.zeros_like(w)
    for i in range(kh):
        for j in range(kw):
            patch = _window(xp, i, j, stride, ho, wo)
            dw[:, :, i, j] = np.tensordot(dout, patch, axes=([0, 2, 3], [0, 2, 3]))
            dxp[:, :, i:i + stride * (ho - 1) + 1:stride, j:j + stride * (wo - 1) + 1:stride] += (
                np.tensordot(dout, w[:, :, i, j], axes=([1], [0])).transpose(0, 3, 1, 2)
            )
    pt, _, pl, _ = pads
    dx = dxp[:, :, pt:pt + xshape[2], pl:pl + xshape[3]]
    db = dout.sum(axis=(0, 2, 3)) if has_bias else None
    return np.ascontiguousarray(dx), dw, db


def depthwise_forward(
    x: np.ndarray,
    w: np.ndarray,
    b: Optional[np.ndarray] = None,
    stride: int = 1,
    padding: str = "same",
) -> Tuple[np.ndarray, tuple]:
    """Per-channel convolution; w has shape (C, 1, k, k)."""
    channels, _, kh, kw = w.shape
    _check_4d(x, channels, "depthwise_conv2d")
    n, _, h, wd = x.shape
    ho, wo, pads = conv_geometry(h, wd, kh, stride, padding)
    xp = _pad(x, pads)
    out = np.zeros((n, channels, ho, wo), dtype=x.dtype)
    for i in range(kh):
        for j in range(kw):
            out += _window(xp, i, j, stride, ho, wo) * w[:, 0, i, j][None, :, None, None]
    if b is not None:
        out += b[None, :, None, None]
    return out, (x.shape, xp, w, stride, pads, b is not None)


def depthwise_backward(dout: np.ndarray, cache: tuple) -> Tuple[np.ndarray, np.ndarray, Optional[np.ndarray]]:
    xshape, xp, w, stride, pads, has_bias = cache
    _, _, kh, kw = w.shape
    ho, wo = dout.shape[2:]
    dxp = np.zeros_like(xp)
    dw = np.zeros_like(w)
    for i in range(kh):
        for j in range(kw):
            patch = _window(xp, i, j, stride, ho, wo)
            dw[:, 0, i, j] = (dout * patch).sum(axis=(0, 2, 3))
            dxp[:, :, i:i + stride * (ho - 1) + 1:stride, j:j + stride * (wo - 1) + 1:stride] += (
                dout * w[:, 0, i, j][None, :, None, None]
            )
    pt, _, pl, _ = pads
    dx = dxp[:, :, pt:pt + xshape[2], pl:pl + xshape[3]]
    db = dout.sum(axis=(0, 2, 3)) if has_bias else None
    return np.ascontiguousarray(dx), dw, db


# ============================================================================
# BATCH NORM
# ============================================================================

def _bn_axes(x: np.ndarray) -> tuple:
    if x.ndim == 4:
        return (0, 2, 3)
    if x.ndim == 2:
        return (0,)
    raise ShapeError(f"batchnorm expects NCHW or NF input, got shape {x.shape}")


def _bcast(v: np.ndarray, ndim: int) -> np.ndarray:
    return v[None, :, None, None] if ndim == 4 else v[None, :]


def batchnorm_forward(
    x: np.ndarray,
    gamma: np.ndarray,
    beta: np.ndarray,
    running_mean: np.ndarray,
    running_var: np.ndarray,
    eps: float = 1e-5,
    train: bool = False,
) -> Tuple[np.ndarray, tuple, Optional[Tuple[np.ndarray, np.ndarray]]]:
    """
    Returns:
        (out, cache, batch_stats); batch_stats is (mean, biased var) in train
        mode and None in infer mode. Running statistics are not touched here.
    """
    axes = _bn_axes(x)
    if x.shape[1] != gamma.shape[0]:
        raise ShapeError(f"batchnorm expects {gamma.shape[0]} channels, got {x.shape[1]}")
    if train:
        mean = x.mean(axis=axes)
        var = x.var(axis=axes)
    else:
        mean, var = running_mean, running_var
    inv_std = 1.0 / np.sqrt(var + eps)
    xhat = (x - _bcast(mean, x.ndim)) * _bcast(inv_std, x.ndim)
    out = xhat * _bcast(gamma, x.ndim) + _bcast(beta, x.ndim)
    out = out.astype(x.dtype, copy=False)
    stats = (mean, var) if train else None
    return out, (xhat, inv_std.astype(x.dtype, copy=False), gamma, axes, train), stats


def batchnorm_backward(dout: np.ndarray, cache: tuple) -> Tuple[np.ndarray, np.ndarray, np.ndarray]:
    xhat, inv_std, gamma, axes, train = cache
    nd = dout.ndim
    dgamma = (dout * xhat).sum(axis=axes)
    dbeta = dout.sum(axis=axes)
    dxhat = dout * _bcast(gamma, nd)
    if not train:
        return dxhat * _bcast(inv_std, nd), dgamma, dbeta
    m = dout.size // dout.shape[1]
    dx = (_bcast(inv_std, nd) / m) * (
        m * dxhat
        - _bcast(dxhat.sum(axis=axes), nd)
        - xhat * _bcast((dxhat * xhat).sum(axis=axes), nd)
    )
    return dx, dgamma, dbeta


# ============================================================================
# ELEMENTWISE / POOLING / HEAD
# ============================================================================

def relu6_forward(x: np.ndarray) -> Tuple[np.ndarray, np.ndarray]:
    return np.clip(x, 0.0, 6.0).astype(x.dtype, copy=False), x


def relu6_backward(dout: np.ndarray, x: np.ndarray) -> np.ndarray:
    return dout * ((x > 0.0) & (x < 6.0))


def relu6_regions(x: np.ndarray) -> np.ndarray:
    """0 below the kink at 0, 1 on the linear part, 2 at or above 6."""
    return (x > 0.0).astype(np.int8) + (x >= 6.0).astype(np.int8)


def gap_forward(x: np.ndarray) -> Tuple[np.ndarray, tuple]:
    if x.ndim != 4:
        raise ShapeError(f"global_avg_pool expects NCHW input, got shape {x.shape}")
    return x.mean(axis=(2, 3)), x.shape


def gap_backward(dout: np.ndarray, xshape: tuple) -> np.ndarray:
    n, c, h, w = xshape
    return np.broadcast_to(dout[:, :, None, None] / (h * w), xshape).astype(dout.dtype).copy()


def dense_forward(x: np.ndarray, w: np.ndarray, b: Optional[np.ndarray]) -> Tuple[np.ndarray, tuple]:
    """Fully connected layer; w has shape (in_features, units)."""
    if x.ndim != 2 or x.shape[1] != w.shape[0]:
        raise ShapeError(f"dense expects (N, {w.shape[0]}) input, got shape {x.shape}")
    out = x @ w
    if b is not None:
        out = out + b[None, :]
    return out, (x, w, b is not None)


def dense_backward(dout: np.ndarray, cache: tuple) -> Tuple[np.ndarray, np.ndarray, Optional[np.ndarray]]:
    x, w, has_bias = cache
    return dout @ w.T, x.T @ dout, (dout.sum(axis=0) if has_bias else None)


def sigmoid_forward(x: np.ndarray) -> Tuple[np.ndarray, np.ndarray]:
    """Numerically stable logistic, kept strictly inside (0, 1) for the dtype."""
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    info = np.finfo(x.dtype)
    np.clip(out, info.tiny, 1.0 - info.epsneg, out=out)
    return out, out


def sigmoid_backward(dout: np.ndarray, out: np.ndarray) -> np.ndarray:
    return dout * out * (1.0 - out)

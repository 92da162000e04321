"""Forward/backward primitives for the 1-D conv net.

Public shapes are [batch x channels x length]. Internally the model runs
channels-last ([batch x length x channels]) so each strided convolution is
one contiguous GEMM; pass ``channels_last=True`` to use that layout directly.
Every ``*_forward`` returns its output and a cache for the matching
``*_backward``. All ops preserve dtype, so the same code runs in float32 for
training and in float64 for gradient checks.
"""
from __future__ import annotations

import numpy as np
from numpy.lib.stride_tricks import as_strided

from ..errors import DegenerateBatch, MissingCache, ShapeMismatch


def conv_out_len(length: int, stride: int = 2) -> int:
    return -(-length // stride)


def _pads(length: int, kernel: int, stride: int) -> tuple[int, int]:
    # left pad centres output j on input stride*j; right pad completes the last window
    out = conv_out_len(length, stride)
    left = (kernel - 1) // 2
    right = max((out - 1) * stride + kernel - length - left, 0)
    return left, right


def _to_nlc(x: np.ndarray, channels_last: bool) -> np.ndarray:
    return x if channels_last else x.transpose(0, 2, 1)


def conv1d_forward(x: np.ndarray, w: np.ndarray, b: np.ndarray, stride: int = 2,
                   channels_last: bool = False):
    """Strided cross-correlation with output length ceil(L / stride).

    out[n, o, j] = b[o] + sum_{c,k} w[o, c, k] * xpad[n, c, stride*j + k],
    where xpad has (kernel - 1) // 2 zeros on the left and just enough on the
    right to fill the last window. ``w`` is [out_ch x in_ch x kernel].
    """
    x = _to_nlc(x, channels_last)
    if x.ndim != 3 or w.ndim != 3 or x.shape[2] != w.shape[1] or b.shape != (w.shape[0],):
        raise ShapeMismatch(f"conv1d: input channels {x.shape[-1:]}, weights {w.shape}, bias {b.shape}")
    n, length, c = x.shape
    o, _, kernel = w.shape
    out_len = conv_out_len(length, stride)
    left, right = _pads(length, kernel, stride)
    dtype = np.result_type(x, w)
    xp = np.zeros((n, length + left + right, c), dtype=dtype)
    xp[:, left:left + length] = x
    item = xp.itemsize
    # row j of the im2col matrix is the contiguous run xp[n, stride*j : stride*j + kernel, :]
    cols = as_strided(xp, (n, out_len, kernel * c), (xp.strides[0], stride * c * item, item))
    cols = cols.reshape(n * out_len, kernel * c)
    wmat = w.transpose(2, 1, 0).reshape(kernel * c, o).astype(dtype, copy=False)
    y = (cols @ wmat + b).reshape(n, out_len, o)
    cache = (cols, wmat, w.shape, stride, length, left, xp.shape, channels_last)
    return (y if channels_last else y.transpose(0, 2, 1)), cache


def conv1d_backward(dy: np.ndarray, cache, need_dx: bool = True):
    """Returns (dx, dw, db); dx is None when ``need_dx`` is false."""
    cols, wmat, wshape, stride, length, left, xp_shape, channels_last = cache
    o, c, kernel = wshape
    dy = _to_nlc(dy, channels_last)
    n, out_len, _ = dy.shape
    dy2 = np.ascontiguousarray(dy).reshape(n * out_len, o)
    dw = (cols.T @ dy2).reshape(kernel, c, o).transpose(2, 1, 0).copy()
    db = np.ones(dy2.shape[0], dtype=dy2.dtype) @ dy2
    if not need_dx:
        return None, dw, db
    dcols = (dy2 @ wmat.T).reshape(n, out_len, kernel, c)
    # padded position stride*j + k == stride*(j + q) + r: scatter through a [.., stride, C] view
    reach = out_len + (kernel - 1) // stride
    dxp = np.zeros((n, reach * stride, c), dtype=dcols.dtype)
    view = dxp.reshape(n, reach, stride, c)
    for k in range(kernel):
        q, r = divmod(k, stride)
        view[:, q:q + out_len, r] += dcols[:, :, k]
    dx = dxp[:, left:left + length]
    return (dx if channels_last else dx.transpose(0, 2, 1)), dw, db


_SLOPES = {"relu": 0.0, "leaky_relu": 0.01}


def activation_forward(x: np.ndarray, kind: str = "relu", mask: np.ndarray | None = None):
    """Rectifier; returns (output, cache) where cache holds the active-unit gate.

    ``mask`` overrides the x > 0 gate so finite-difference checks can hold
    the active linear piece fixed.
    """
    if kind not in _SLOPES:
        raise ValueError(f"unknown activation {kind!r}")
    slope = _SLOPES[kind]
    gate = (x > 0) if mask is None else mask
    if slope == 0.0:
        y = np.maximum(x, 0) if mask is None else x * gate
    else:
        y = np.where(gate, x, x * x.dtype.type(slope))
    return y, (gate, slope)


def activation_backward(dy: np.ndarray, cache) -> np.ndarray:
    gate, slope = cache
    if slope == 0.0:
        return dy * gate
    return np.where(gate, dy, dy * dy.dtype.type(slope))


def relu(x: np.ndarray):
    """max(x, 0) together with its derivative mask."""
    x = np.asarray(x)
    y, (gate, _) = activation_forward(x, "relu")
    return y, gate.astype(x.dtype)


def _channel_sum(x2: np.ndarray) -> np.ndarray:
    return np.ones(x2.shape[0], dtype=x2.dtype) @ x2


def batchnorm_forward(x, gamma, beta, running_mean, running_var, train: bool,
                      momentum: float = 0.1, eps: float = 1e-5, channels_last: bool = False):
    """Per-channel normalization over batch and length.

    Returns (y, cache, new_running_mean, new_running_var); nothing is
    mutated. The cache is None in eval mode.
    """
    xl = _to_nlc(x, channels_last)
    if xl.ndim != 3 or gamma.shape != (xl.shape[2],):
        raise ShapeMismatch(f"batchnorm: input {x.shape}, gamma {gamma.shape}")
    shape = xl.shape
    x2 = np.ascontiguousarray(xl).reshape(-1, shape[2])
    if not train:
        scale = (gamma / np.sqrt(running_var + eps)).astype(x.dtype)
        y = (x2 - running_mean.astype(x.dtype)) * scale
        y += beta
        y = y.reshape(shape)
        return (y if channels_last else y.transpose(0, 2, 1)), None, running_mean, running_var
    count = x2.shape[0]
    if count < 2:
        raise DegenerateBatch(f"batchnorm needs at least 2 values per channel, got {count}")
    mu = _channel_sum(x2) / count
    xc = x2 - mu
    var = np.einsum("ij,ij->j", xc, xc) / count
    inv = (1.0 / np.sqrt(var + eps)).astype(x.dtype)
    y = xc * (gamma * inv)
    y += beta
    y = y.reshape(shape)
    new_mean = ((1 - momentum) * running_mean + momentum * mu).astype(running_mean.dtype)
    new_var = ((1 - momentum) * running_var + momentum * var).astype(running_var.dtype)
    cache = (xc, inv, gamma, shape, channels_last)
    return (y if channels_last else y.transpose(0, 2, 1)), cache, new_mean, new_var


def batchnorm_backward(dy: np.ndarray, cache):
    if cache is None:
        raise MissingCache("batchnorm backward needs a train-mode forward cache")
    xc, inv, gamma, shape, channels_last = cache
    dy2 = np.ascontiguousarray(_to_nlc(dy, channels_last)).reshape(-1, shape[2])
    count = dy2.shape[0]
    dbeta = _channel_sum(dy2)
    dgamma = np.einsum("ij,ij->j", dy2, xc) * inv
    # dx = gamma*inv/N * (N*dy - dbeta - xhat*dgamma), expanded so xhat is never built
    a = gamma * inv
    dx = dy2 * a
    dx -= xc * (a * inv * dgamma / count)
    dx -= a * dbeta / count
    dx = dx.reshape(shape)
    return (dx if channels_last else dx.transpose(0, 2, 1)), dgamma, dbeta


def dense_forward(x: np.ndarray, w: np.ndarray, b: np.ndarray):
    if x.ndim != 2 or w.ndim != 2 or x.shape[1] != w.shape[0] or b.shape != (w.shape[1],):
        raise ShapeMismatch(f"dense: input {x.shape}, weights {w.shape}, bias {b.shape}")
    return x @ w + b, (x, w)


def dense_backward(dy: np.ndarray, cache):
    x, w = cache
    return dy @ w.T, x.T @ dy, dy.sum(axis=0)


def smoothed_cross_entropy(logits: np.ndarray, labels, eps: float = 0.1):
    """Mean cross-entropy against (1 - eps) on the true class and eps on the other.

    Two-class head only. Returns (loss, d loss / d logits).
    """
    if not 0 <= eps < 0.5:
        raise ValueError(f"label smoothing must lie in [0, 0.5), got {eps}")
    logits = np.asarray(logits)
    n = logits.shape[0]
    labels = np.asarray(labels, dtype=np.int64)
    target = np.full(logits.shape, eps, dtype=logits.dtype)
    target[np.arange(n), labels] = 1 - eps
    shifted = logits - logits.max(axis=1, keepdims=True)
    log_p = shifted - np.log(np.exp(shifted).sum(axis=1, keepdims=True))
    loss = float(-(target * log_p).sum() / n)
    grad = (np.exp(log_p) - target) / n
    return loss, grad.astype(logits.dtype, copy=False)

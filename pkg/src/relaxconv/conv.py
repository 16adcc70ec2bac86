"""Dense 2D cross-correlation with zero padding, stride 1 and same-size output."""

from __future__ import annotations

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .errors import ShapeError


def patches(x: np.ndarray, k: int) -> np.ndarray:
    """``(B, H, W, C, K, K)`` view of the zero-padded neighbourhoods of ``x``."""
    xp = np.pad(x, ((0, 0), (0, 0), (k, k), (k, k)))
    size = 2 * k + 1
    return sliding_window_view(xp, (size, size), axis=(2, 3)).transpose(0, 2, 3, 1, 4, 5)


def fold_patches(dp: np.ndarray, k: int) -> np.ndarray:
    """Adjoint of :func:`patches`: scatter-add neighbourhood gradients to the grid."""
    b, h, w, c, size, _ = dp.shape
    out = np.zeros((b, c, h + 2 * k, w + 2 * k), dtype=dp.dtype)
    d = dp.transpose(0, 3, 1, 2, 4, 5)
    for u in range(size):
        for v in range(size):
            out[:, :, u:u + h, v:v + w] += d[..., u, v]
    return out[:, :, k:k + h, k:k + w]


def _check(x, w):
    if x.ndim != 4 or w.ndim != 4:
        raise ShapeError(f"conv2d expects (B,C,H,W) input and (O,C,K,K) kernel, got {x.shape}, {w.shape}")
    if x.shape[1] != w.shape[1]:
        raise ShapeError(f"input has {x.shape[1]} channels, kernel expects {w.shape[1]}")
    if w.shape[2] != w.shape[3] or w.shape[2] % 2 == 0:
        raise ShapeError(f"kernel must be square with odd size, got {w.shape[2:]}")


def _columns(x: np.ndarray, k: int) -> np.ndarray:
    """im2col buffer ``(K*K*C, B*H*W)`` with rows ordered by (u, v, c)."""
    b, c, h, w = x.shape
    size = 2 * k + 1
    if k == 0:
        return x.transpose(1, 0, 2, 3).reshape(c, -1)
    xp = np.pad(x, ((0, 0), (0, 0), (k, k), (k, k)))
    cols = np.empty((size, size, c, b, h, w), dtype=x.dtype)
    for u in range(size):
        for v in range(size):
            cols[u, v] = xp[:, :, u:u + h, v:v + w].transpose(1, 0, 2, 3)
    return cols.reshape(size * size * c, b * h * w)


def conv2d(x: np.ndarray, w: np.ndarray) -> np.ndarray:
    """``y[b, o, p] = sum_{i, d} w[o, i, k + d] x[b, i, p + d]`` for offsets ``|d| <= k``."""
    _check(x, w)
    b, c, h, wd = x.shape
    o, _, size, _ = w.shape
    cols = _columns(x, size // 2)
    y = w.transpose(0, 2, 3, 1).reshape(o, -1) @ cols
    return np.ascontiguousarray(y.reshape(o, b, h, wd).transpose(1, 0, 2, 3))


def conv2d_backward(x: np.ndarray, w: np.ndarray, dy: np.ndarray):
    """Gradients of :func:`conv2d` with respect to its input and kernel."""
    _check(x, w)
    if dy.shape != (x.shape[0], w.shape[0]) + x.shape[2:]:
        raise ShapeError(f"upstream gradient has shape {dy.shape}")
    c = x.shape[1]
    o, _, size, _ = w.shape
    cols = _columns(x, size // 2)
    dyf = dy.transpose(1, 0, 2, 3).reshape(o, -1)
    dw = (dyf @ cols.T).reshape(o, size, size, c).transpose(0, 3, 1, 2)
    dx = conv2d(dy, np.ascontiguousarray(w[:, :, ::-1, ::-1].transpose(1, 0, 2, 3)))
    return dx, np.ascontiguousarray(dw)


def conv2d_reference(x: np.ndarray, w: np.ndarray) -> np.ndarray:
    """Loop implementation used as an oracle in tests."""
    b, c, h, wd = x.shape
    o, _, size, _ = w.shape
    k = size // 2
    y = np.zeros((b, o, h, wd), dtype=np.result_type(x, w))
    for p in range(h):
        for q in range(wd):
            for u in range(size):
                for v in range(size):
                    pp, qq = p + u - k, q + v - k
                    if 0 <= pp < h and 0 <= qq < wd:
                        y[:, :, p, q] += x[:, :, pp, qq] @ w[:, :, u, v].T
    return y

"""Soft equivariance penalties on relaxation weights.

Every function returns ``(value, gradient)``.  Norms are L1 with the
subgradient of ``|0|`` taken as 0.
"""

from __future__ import annotations

import numpy as np

from .errors import ConfigError, ShapeError
from .groups import CyclicGroup, Representation, rotate_grid, rotate_grid_adjoint

ALPHA_GRID = (0.0, 1e-2, 1e-4, 1e-6)


def _check_alpha(alpha):
    if alpha < 0:
        raise ConfigError(f"alpha must be non-negative, got {alpha}")


def pairwise_variation(w: np.ndarray, axis: int = -1):
    """Sum over all ordered pairs ``(g, h)`` along ``axis`` of ``|w(h) - w(g)|``."""
    w = np.moveaxis(w, axis, -1)
    diff = w[..., :, None] - w[..., None, :]
    value = np.abs(diff).sum()
    grad = 2.0 * np.sign(diff).sum(axis=-1)
    return float(value), np.moveaxis(grad, -1, axis)


def l_gconv(w: np.ndarray, alpha: float):
    """Penalty on relaxed group convolution weights ``w`` of shape ``(L, n)``."""
    _check_alpha(alpha)
    value, grad = pairwise_variation(w, axis=-1)
    return alpha * value, alpha * grad


def grid_variation(w: np.ndarray, axes=(0, 1)):
    """L1 norm of forward differences of ``w`` along two grid axes (no wraparound)."""
    value = 0.0
    grad = np.zeros_like(w)
    for ax in axes:
        d = np.diff(w, axis=ax)
        value += np.abs(d).sum()
        s = np.sign(d)
        lo = [slice(None)] * w.ndim
        hi = [slice(None)] * w.ndim
        lo[ax] = slice(0, -1)
        hi[ax] = slice(1, None)
        grad[tuple(hi)] += s
        grad[tuple(lo)] -= s
    return float(value), grad


def l_sconv(w: np.ndarray, alpha: float, axes=(0, 1), layout: str = "grid"):
    """Penalty on per-offset steerable weights laid out as ``(K, K, ...)``."""
    _check_alpha(alpha)
    if layout != "grid":
        raise ConfigError("l_sconv needs the per-offset layout; use l_angular for angular weights")
    value, grad = grid_variation(w, axes)
    return alpha * value, alpha * grad


def l_angular(w: np.ndarray, alpha: float):
    """Pairwise penalty over angular sectors of weights ``(1 + n_angles, ...)``.

    Bucket 0 holds the center offset, which maps to itself under rotation and
    is left unpenalised.
    """
    _check_alpha(alpha)
    value, g = pairwise_variation(w[1:], axis=0)
    grad = np.zeros_like(w)
    grad[1:] = g
    return alpha * value, alpha * grad


def _spatial_ndim(phi: np.ndarray) -> int:
    if phi.ndim == 4:
        return 2
    if phi.ndim == 6:
        return 4
    raise ShapeError("phi must be (c_out, c_in, K, K) or (H, W, c_out, c_in, K, K)")


def _rotate_lc(phi, n, g, adjoint=False):
    rot = rotate_grid_adjoint if adjoint else rotate_grid
    if phi.ndim == 4:
        return rot(phi, n, g)
    # positions (axes 0, 1) and offsets (axes 4, 5) rotate together
    t = rot(phi, n, g)
    t = np.moveaxis(t, (0, 1), (-2, -1))
    t = rot(t, n, g)
    return np.moveaxis(t, (-2, -1), (0, 1))


def _conj(phi, ro, ri):
    return np.einsum("ab,...bcuv,dc->...aduv", ro, phi, ri)


def l_hinge(phi: np.ndarray, group: CyclicGroup, rep_in: Representation,
            rep_out: Representation, alpha: float):
    """Kernel-constraint residual of a (locally connected) filter bank.

    ``phi`` is either one kernel ``(c_out, c_in, K, K)`` or a per-position bank
    ``(H, W, c_out, c_in, K, K)``; in the latter case a rotation moves both the
    position and the offset.
    """
    _check_alpha(alpha)
    _spatial_ndim(phi)
    if phi.shape[-1] != phi.shape[-2] or (phi.ndim == 6 and phi.shape[0] != phi.shape[1]):
        raise ShapeError("l_hinge needs square grids")
    n = group.n
    value = 0.0
    grad = np.zeros_like(phi)
    for h in group.elements():
        if h == 0:
            continue
        ro, ri = rep_out.matrix(h), rep_in.matrix(h)
        moved = _rotate_lc(phi, n, group.inverse(h))
        res = _conj(phi, ro, ri) - moved
        value += np.abs(res).sum()
        s = np.sign(res)
        grad += _conj(s, ro.T, ri.T) - _rotate_lc(s, n, group.inverse(h), adjoint=True)
    return alpha * float(value), alpha * grad

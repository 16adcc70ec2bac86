"""Lifting of scalar and vector channels to regular-representation features."""

from __future__ import annotations

import numpy as np

from .errors import ShapeError
from .groups import CyclicGroup, Representation, cos_sin


class LiftLayer:
    """Map every input field to one regular field over C_n.

    A vector ``(a, b)`` transforming by ``irrep(k)`` becomes
    ``f(i) = c * (a cos(2 pi k i / n) + b sin(2 pi k i / n))``; a scalar ``a``
    becomes the constant ``f(i) = c * a``.  ``c`` is trainable, one per input
    field, and starts at 1.
    """

    family = "lift"

    def __init__(self, rep_in: Representation, dtype=np.float64):
        self.group: CyclicGroup = rep_in.group
        self.rep_in = rep_in
        atoms = rep_in.atoms()
        for a in atoms:
            if a.kind not in ("trivial", "irrep"):
                raise ShapeError(f"cannot lift a {a.name} field")
        n = self.group.n
        self.rep_out = self.group.regular() * len(atoms)
        embed = np.zeros((n * len(atoms), rep_in.dim))
        col = 0
        for j, a in enumerate(atoms):
            if a.kind == "trivial":
                embed[j * n:(j + 1) * n, col] = 1.0
            else:
                for i in range(n):
                    embed[j * n + i, col:col + 2] = cos_sin(a.freq * i, n)
            col += a.dim
        self.embed = embed.astype(dtype)
        self.params = {"c": np.ones(len(atoms), dtype=dtype)}

    def _scale(self):
        return np.repeat(self.params["c"], self.group.n)

    def forward(self, x: np.ndarray):
        if x.ndim != 4 or x.shape[1] != self.rep_in.dim:
            raise ShapeError(f"lift expects (B, {self.rep_in.dim}, H, W), got {x.shape}")
        pre = np.einsum("oc,bchw->bohw", self.embed, x)
        return pre * self._scale()[None, :, None, None], pre

    def backward(self, cache, dy: np.ndarray):
        pre = cache
        if dy.shape != pre.shape:
            raise ShapeError(f"upstream gradient {dy.shape} does not match output {pre.shape}")
        n = self.group.n
        dc = (dy * pre).sum(axis=(0, 2, 3)).reshape(-1, n).sum(axis=1)
        dpre = dy * self._scale()[None, :, None, None]
        dx = np.einsum("oc,bohw->bchw", self.embed, dpre)
        return dx, {"c": dc}

    def regularizer(self, alpha: float):
        return 0.0, {}

    def __call__(self, x):
        return self.forward(x)[0]


def lift(v: np.ndarray, group: CyclicGroup, c=1.0) -> np.ndarray:
    """Lift a vector field ``(2m, H, W)`` or ``(B, 2m, H, W)`` of irrep(1) vectors."""
    batched = v.ndim == 4
    x = v if batched else v[None]
    if x.shape[1] % 2:
        raise ShapeError(f"vector lift needs an even channel count, got {x.shape[1]}")
    layer = LiftLayer(group.irrep(1) * (x.shape[1] // 2), dtype=x.dtype)
    layer.params["c"][:] = c
    y = layer(x)
    return y if batched else y[0]


def lift_gradient(upstream: np.ndarray, v: np.ndarray, group: CyclicGroup, c=1.0):
    """Reverse-mode derivative of :func:`lift`; returns ``(d v, d c)``."""
    batched = v.ndim == 4
    x = v if batched else v[None]
    up = upstream if batched else upstream[None]
    layer = LiftLayer(group.irrep(1) * (x.shape[1] // 2), dtype=x.dtype)
    layer.params["c"][:] = c
    _, cache = layer.forward(x)
    dx, grads = layer.backward(cache, up)
    return (dx if batched else dx[0]), grads["c"]

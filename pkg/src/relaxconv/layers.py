"""Strict and relaxed equivariant convolution layers with analytic gradients.

Every layer follows the same protocol::

    y, cache = layer.forward(x)          # x: (B, C_in, H, W)
    dx, grads = layer.backward(cache, dy)
    value, grads = layer.regularizer(alpha)

``grads`` maps the names in ``layer.params`` to arrays of the same shape.
All convolutions use zero padding, stride 1 and same-size outputs.
"""

from __future__ import annotations

import math

import numpy as np

from . import regularizers as reg
from .basis import KernelBasis, solve_basis
from .conv import conv2d, conv2d_backward, fold_patches, patches
from .errors import ConfigError, ShapeError
from .groups import CyclicGroup, Representation, rotate_grid, rotate_grid_adjoint

DEFAULT_BANKS = 3


def _uniform(rng, scale, shape, dtype):
    return rng.uniform(-scale, scale, size=shape).astype(dtype)


class Layer:
    family = "layer"
    rep_in: Representation
    rep_out: Representation
    params: dict

    def forward(self, x):
        raise NotImplementedError

    def backward(self, cache, dy):
        raise NotImplementedError

    def regularizer(self, alpha: float):
        return 0.0, {}

    def variation(self) -> float:
        """Unscaled soft-equivariance penalty of the current weights."""
        return self.regularizer(1.0)[0]

    def _check_input(self, x):
        if x.ndim != 4 or x.shape[1] != self.rep_in.dim:
            raise ShapeError(f"{self.family} expects (B, {self.rep_in.dim}, H, W), got {x.shape}")

    def __call__(self, x):
        return self.forward(x)[0]


class ReLU(Layer):
    family = "relu"

    def __init__(self, rep: Representation):
        self.rep_in = self.rep_out = rep
        self.params = {}

    def forward(self, x):
        mask = x > 0
        return x * mask, mask

    def backward(self, cache, dy):
        return dy * cache, {}


def relu(x):
    return np.maximum(x, 0)


def relu_backward(x, dy):
    return dy * (x > 0)


# ------------------------------------------------------------------ plain conv


class ConvLayer(Layer):
    """Ordinary 2D convolution (the C1 degenerate case)."""

    family = "conv"

    def __init__(self, c_in: int, c_out: int, k: int, rng=None, dtype=np.float64,
                 rep_in: Representation | None = None, rep_out: Representation | None = None):
        rng = rng if rng is not None else np.random.default_rng(0)
        c1 = CyclicGroup(1)
        self.rep_in = rep_in if rep_in is not None else c1.trivial() * c_in
        self.rep_out = rep_out if rep_out is not None else c1.trivial() * c_out
        if self.rep_in.dim != c_in or self.rep_out.dim != c_out:
            raise ConfigError("channel counts disagree with the representation labels")
        self.k = k
        size = 2 * k + 1
        s = 1.0 / math.sqrt(c_in * size * size)
        self.params = {"weight": _uniform(rng, s, (c_out, c_in, size, size), dtype)}

    def forward(self, x):
        self._check_input(x)
        return conv2d(x, self.params["weight"]), x

    def backward(self, cache, dy):
        dx, dw = conv2d_backward(cache, self.params["weight"], dy)
        return dx, {"weight": dw}


# ------------------------------------------------------------ group convolution


def _shift_index(n):
    r = np.arange(n)
    return (r[None, :] - r[:, None]) % n  # [r, s] -> s - r


def _rotated_stack(psi, n):
    """``T[r] = rot_r(psi)`` for every r; psi's trailing axes are spatial."""
    return np.stack([rotate_grid(psi, n, r) for r in range(n)])


def _rotated_stack_adjoint(dt, n):
    return sum(rotate_grid_adjoint(dt[r], n, r) for r in range(n))


class GroupConvLayer(Layer):
    """Roto-translation group convolution on regular features.

    ``kernel`` has shape ``(n, m_out, m_in, K, K)``; channel ``(o, r)`` of the
    output gathers ``f(x + y, s) Psi(s - r)[o, i, R_r^-1 y]``.
    """

    family = "gconv"

    def __init__(self, group: CyclicGroup, m_in: int, m_out: int, k: int, rng=None,
                 dtype=np.float64):
        rng = rng if rng is not None else np.random.default_rng(0)
        self.group = group
        self.m_in, self.m_out, self.k = m_in, m_out, k
        self.rep_in = group.regular() * m_in
        self.rep_out = group.regular() * m_out
        n, size = group.n, 2 * k + 1
        s = 1.0 / math.sqrt(m_in * n * size * size)
        self.params = {"kernel": _uniform(rng, s, (n, m_out, m_in, size, size), dtype)}
        self._idx = _shift_index(n)

    def _dense(self, t):
        # t: (n_r, n_d, Co, Ci, K, K) -> (Co*n, Ci*n, K, K)
        n = self.group.n
        g = t[np.arange(n)[:, None], self._idx]
        size = t.shape[-1]
        return np.ascontiguousarray(g.transpose(2, 0, 3, 1, 4, 5)).reshape(
            self.m_out * n, self.m_in * n, size, size)

    def _dense_grad(self, dk):
        n, size = self.group.n, dk.shape[-1]
        d = dk.reshape(self.m_out, n, self.m_in, n, size, size).transpose(1, 3, 0, 2, 4, 5)
        dt = np.zeros_like(d)
        for r in range(n):
            dt[r, self._idx[r]] = d[r]
        return dt

    def effective_kernel(self):
        return self._dense(_rotated_stack(self.params["kernel"], self.group.n))

    def forward(self, x):
        self._check_input(x)
        w = self.effective_kernel()
        return conv2d(x, w), (x, w)

    def backward(self, cache, dy):
        x, w = cache
        dx, dw = conv2d_backward(x, w, dy)
        dpsi = _rotated_stack_adjoint(self._dense_grad(dw), self.group.n)
        return dx, {"kernel": dpsi}


class RelaxedGroupConvLayer(GroupConvLayer):
    """Group convolution whose kernel mixes L banks with input-rotation weights.

    ``Psi(r, s) = sum_l relax[l, s] Psi_l(s - r)``; tying ``relax[l, :]`` to a
    constant recovers :class:`GroupConvLayer` with kernel ``sum_l relax_l Psi_l``.
    """

    family = "rgconv"

    def __init__(self, group: CyclicGroup, m_in: int, m_out: int, k: int,
                 banks: int = DEFAULT_BANKS, rng=None, dtype=np.float64):
        if banks < 1:
            raise ConfigError("relaxed group convolution needs at least one filter bank")
        rng = rng if rng is not None else np.random.default_rng(0)
        super().__init__(group, m_in, m_out, k, rng=None, dtype=dtype)
        n, size = group.n, 2 * k + 1
        s = 1.0 / math.sqrt(m_in * n * size * size)
        self.banks = banks
        self.params = {
            "kernel": _uniform(rng, s, (banks, n, m_out, m_in, size, size), dtype),
            "relax": np.full((banks, n), 1.0 / banks, dtype=dtype),
        }

    def _gathered(self):
        n = self.group.n
        t = np.stack([_rotated_stack(p, n) for p in self.params["kernel"]])
        return t, t[:, np.arange(n)[:, None], self._idx]  # (L, n_r, n_s, Co, Ci, K, K)

    def effective_kernel(self):
        _, g = self._gathered()
        mixed = np.einsum("ls,lrs...->rs...", self.params["relax"], g)
        n = self.group.n
        size = mixed.shape[-1]
        return np.ascontiguousarray(mixed.transpose(2, 0, 3, 1, 4, 5)).reshape(
            self.m_out * n, self.m_in * n, size, size)

    def forward(self, x):
        self._check_input(x)
        _, g = self._gathered()
        w = self.effective_kernel()
        return conv2d(x, w), (x, w, g)

    def backward(self, cache, dy):
        x, w, g = cache
        n, size = self.group.n, w.shape[-1]
        dx, dw = conv2d_backward(x, w, dy)
        dmix = dw.reshape(self.m_out, n, self.m_in, n, size, size).transpose(1, 3, 0, 2, 4, 5)
        drelax = np.einsum("rsabuv,lrsabuv->ls", dmix, g)
        dg = np.einsum("ls,rs...->lrs...", self.params["relax"], dmix)
        dkernel = np.empty_like(self.params["kernel"])
        for l in range(self.banks):
            dt = np.zeros_like(dg[l])
            for r in range(n):
                dt[r, self._idx[r]] = dg[l, r]
            dkernel[l] = _rotated_stack_adjoint(dt, n)
        return dx, {"kernel": dkernel, "relax": drelax}

    def regularizer(self, alpha):
        v, g = reg.l_gconv(self.params["relax"], alpha)
        return v, {"relax": g}


# --------------------------------------------------------- steerable convolution


def _key(pair):
    return f"w:{pair[0]}<-{pair[1]}"


def _pair_shape(basis: KernelBasis, pair):
    a, b = pair
    return basis.layout_out.counts[a], basis.layout_in.counts[b], basis.blocks[pair].shape[0]


def _init_scale(basis: KernelBasis, pair):
    size = basis.kernel_size
    lo, li = basis.layout_out, basis.layout_in
    c_in = basis.rep_in.dim
    nb = basis.blocks[pair].shape[0]
    s = 1.0 / math.sqrt(c_in * size * size)
    return s * math.sqrt(lo.dims[pair[0]] * li.dims[pair[1]] * size * size / nb)


def expand_kernel(basis: KernelBasis, coeffs: dict, spatial: bool, dtype=np.float64):
    """Dense kernel ``sum_l w_l (.) Phi_l`` from per-type-pair coefficients.

    With ``spatial`` the coefficients carry two leading kernel-grid axes,
    ``(K, K, m_out, m_in, L)``; otherwise they are ``(m_out, m_in, L)``.
    """
    size = basis.kernel_size
    kern = np.zeros((basis.rep_out.dim, basis.rep_in.dim, size, size), dtype=dtype)
    lo, li = basis.layout_out, basis.layout_in
    for pair in basis.pairs():
        blk = basis.blocks[pair].astype(dtype, copy=False)
        c = coeffs[_key(pair)]
        if spatial:
            t = np.einsum("uvpql,laiuv->paqiuv", c, blk, optimize=True)
        else:
            t = np.einsum("pql,laiuv->paqiuv", c, blk, optimize=True)
        oi, ii = lo.index[pair[0]], li.index[pair[1]]
        kern[oi[:, None], ii[None, :]] = t.reshape(oi.size, ii.size, size, size)
    return kern


def expand_kernel_backward(basis: KernelBasis, dkern: np.ndarray, spatial: bool) -> dict:
    grads = {}
    lo, li = basis.layout_out, basis.layout_in
    size = basis.kernel_size
    for pair in basis.pairs():
        blk = basis.blocks[pair].astype(dkern.dtype, copy=False)
        ma, mb, _ = _pair_shape(basis, pair)
        oi, ii = lo.index[pair[0]], li.index[pair[1]]
        d = dkern[oi[:, None], ii[None, :]].reshape(ma, blk.shape[1], mb, blk.shape[2], size, size)
        if spatial:
            grads[_key(pair)] = np.einsum("paqiuv,laiuv->uvpql", d, blk, optimize=True)
        else:
            grads[_key(pair)] = np.einsum("paqiuv,laiuv->pql", d, blk, optimize=True)
    return grads


class SteerableConvLayer(Layer):
    """Strictly equivariant convolution with kernel ``sum_l w_l Phi_l``."""

    family = "steer"

    def __init__(self, rep_in: Representation, rep_out: Representation, k: int,
                 rng=None, dtype=np.float64, basis: KernelBasis | None = None):
        rng = rng if rng is not None else np.random.default_rng(0)
        self.group = rep_in.group
        self.basis = basis if basis is not None else solve_basis(self.group, rep_in, rep_out, k)
        if self.basis.rep_in != rep_in or self.basis.rep_out != rep_out:
            raise ConfigError("supplied basis does not match the layer representations")
        self.rep_in, self.rep_out, self.k = rep_in, rep_out, k
        self.dtype = dtype
        self.params = {}
        for pair in self.basis.pairs():
            self.params[_key(pair)] = self._init(rng, pair)

    def _init(self, rng, pair):
        return _uniform(rng, _init_scale(self.basis, pair), _pair_shape(self.basis, pair), self.dtype)

    def effective_kernel(self):
        return expand_kernel(self.basis, self.params, spatial=False, dtype=self.dtype)

    def forward(self, x):
        self._check_input(x)
        w = self.effective_kernel()
        return conv2d(x, w), (x, w)

    def _kernel_grads(self, dw):
        return expand_kernel_backward(self.basis, dw, spatial=False)

    def backward(self, cache, dy):
        x, w = cache
        dx, dw = conv2d_backward(x, w, dy)
        return dx, self._kernel_grads(dw)


def angular_buckets(k: int, n_angles: int) -> np.ndarray:
    """Sector index of every kernel offset: 0 for the center, else 1..n_angles."""
    size = 2 * k + 1
    out = np.zeros((size, size), dtype=int)
    for u in range(size):
        for v in range(size):
            x, y = v - k, u - k
            if x == 0 and y == 0:
                continue
            theta = math.atan2(y, x) % (2 * math.pi)
            out[u, v] = 1 + int(math.floor(theta / (2 * math.pi / n_angles) + 1e-9)) % n_angles
    return out


class RelaxedSteerableConvLayer(SteerableConvLayer):
    """Steerable convolution whose coefficients vary with the kernel offset.

    Per-offset weights have shape ``(K, K, m_out, m_in, L)`` per type pair.  With
    ``angular=True`` they are ``(1 + n_angles, m_out, m_in, L)``, indexed by the
    sector of the offset angle (bucket 0 is the center).  Initialisation is
    constant over offsets, so the layer starts strictly equivariant.
    """

    family = "rsteer"

    def __init__(self, rep_in: Representation, rep_out: Representation, k: int,
                 angular: bool = False, n_angles: int | None = None, rng=None,
                 dtype=np.float64, basis: KernelBasis | None = None):
        self.angular = angular
        self.n_angles = n_angles if n_angles is not None else rep_in.group.n
        self.buckets = angular_buckets(k, self.n_angles)
        super().__init__(rep_in, rep_out, k, rng=rng, dtype=dtype, basis=basis)
        if angular:
            self.family = "rsteer_angular"

    def _init(self, rng, pair):
        base = super()._init(rng, pair)
        lead = (1 + self.n_angles,) if self.angular else (self.basis.kernel_size,) * 2
        return np.broadcast_to(base, lead + base.shape).copy()

    def spatial_coeffs(self):
        if not self.angular:
            return self.params
        return {key: w[self.buckets] for key, w in self.params.items()}

    def effective_kernel(self):
        return expand_kernel(self.basis, self.spatial_coeffs(), spatial=True, dtype=self.dtype)

    def _kernel_grads(self, dw):
        grads = expand_kernel_backward(self.basis, dw, spatial=True)
        if not self.angular:
            return grads
        out = {}
        flat = self.buckets.ravel()
        for key, g in grads.items():
            acc = np.zeros_like(self.params[key])
            np.add.at(acc, flat, g.reshape((flat.size,) + g.shape[2:]))
            out[key] = acc
        return out

    def regularizer(self, alpha):
        value, grads = 0.0, {}
        for key, w in self.params.items():
            if self.angular:
                v, g = reg.l_angular(w, alpha)
            else:
                v, g = reg.l_sconv(w, alpha)
            value += v
            grads[key] = g
        return value, grads


class LowRankTranslationLayer(SteerableConvLayer):
    """Steerable convolution with position- and offset-dependent weights.

    ``w_l(x, y) = sum_r a_r(x) b_{r,l}(y)`` with ``a`` of shape ``(R, H, W)`` and
    per type pair ``b`` of shape ``(R, K, K, m_out, m_in, L)``.
    """

    family = "lowrank"

    def __init__(self, rep_in: Representation, rep_out: Representation, k: int,
                 grid: tuple[int, int], rank: int = 1, rng=None, dtype=np.float64,
                 basis: KernelBasis | None = None):
        if rank < 1:
            raise ConfigError("rank must be >= 1")
        self.rank = rank
        self.grid = tuple(grid)
        super().__init__(rep_in, rep_out, k, rng=rng, dtype=dtype, basis=basis)
        self.params["a"] = np.full((rank,) + self.grid, 1.0 / rank, dtype=dtype)

    def _init(self, rng, pair):
        size = self.basis.kernel_size
        shape = _pair_shape(self.basis, pair)
        scale = _init_scale(self.basis, pair) * math.sqrt(self.rank)
        base = _uniform(rng, scale, (self.rank, 1, 1) + shape, self.dtype)
        return np.broadcast_to(base, (self.rank, size, size) + shape).copy()

    def _coeffs(self, r):
        return {key: w[r] for key, w in self.params.items() if key != "a"}

    def rank_kernels(self):
        return np.stack([expand_kernel(self.basis, self._coeffs(r), spatial=True, dtype=self.dtype)
                         for r in range(self.rank)])

    def forward(self, x):
        self._check_input(x)
        if x.shape[2:] != self.grid:
            raise ShapeError(f"layer is bound to grid {self.grid}, got {x.shape[2:]}")
        kr = self.rank_kernels()
        co = self.rep_out.dim
        z = conv2d(x, kr.reshape((-1,) + kr.shape[2:]))
        z = z.reshape(x.shape[0], self.rank, co, *self.grid)
        y = np.einsum("rhw,brohw->bohw", self.params["a"], z)
        return y, (x, kr, z)

    def backward(self, cache, dy):
        x, kr, z = cache
        da = np.einsum("bohw,brohw->rhw", dy, z)
        dz = self.params["a"][None, :, None] * dy[:, None]
        dz = dz.reshape(x.shape[0], -1, *self.grid)
        dx, dw = conv2d_backward(x, kr.reshape((-1,) + kr.shape[2:]), dz)
        dw = dw.reshape(kr.shape)
        grads = {"a": da}
        per_rank = [expand_kernel_backward(self.basis, dw[r], spatial=True) for r in range(self.rank)]
        for key in per_rank[0]:
            grads[key] = np.stack([g[key] for g in per_rank])
        return dx, grads

    def regularizer(self, alpha):
        value, grads = 0.0, {}
        for key, w in self.params.items():
            axes = (1, 2)
            v, g = reg.l_sconv(w, alpha, axes=axes)
            value += v
            grads[key] = g
        return value, grads


# ----------------------------------------------------------- locally connected


class LocallyConnectedLayer(Layer):
    """Convolution-shaped layer with an independent filter at every position.

    ``phi`` has shape ``(H, W, c_out, c_in, K, K)``; the soft constraint is the
    kernel-constraint hinge penalty with respect to ``rep_in``/``rep_out``.
    """

    family = "lc"

    def __init__(self, rep_in: Representation, rep_out: Representation, k: int,
                 grid: tuple[int, int], rng=None, dtype=np.float64):
        rng = rng if rng is not None else np.random.default_rng(0)
        self.rep_in, self.rep_out, self.k = rep_in, rep_out, k
        self.group = rep_in.group
        self.grid = tuple(grid)
        size = 2 * k + 1
        s = 1.0 / math.sqrt(rep_in.dim * size * size)
        self.params = {"phi": _uniform(rng, s, self.grid + (rep_out.dim, rep_in.dim, size, size), dtype)}

    def forward(self, x):
        self._check_input(x)
        if x.shape[2:] != self.grid:
            raise ShapeError(f"layer is bound to grid {self.grid}, got {x.shape[2:]}")
        b = x.shape[0]
        hw = self.grid[0] * self.grid[1]
        p = patches(x, self.k).reshape(b, hw, -1).transpose(1, 0, 2)
        phi = self.params["phi"].reshape(hw, self.rep_out.dim, -1)
        y = np.matmul(p, phi.transpose(0, 2, 1))  # (hw, B, Co)
        return np.ascontiguousarray(y.transpose(1, 2, 0)).reshape(b, -1, *self.grid), p

    def backward(self, cache, dy):
        p = cache
        b = dy.shape[0]
        hw = self.grid[0] * self.grid[1]
        size = 2 * self.k + 1
        d = dy.reshape(b, self.rep_out.dim, hw).transpose(2, 0, 1)  # (hw, B, Co)
        phi = self.params["phi"].reshape(hw, self.rep_out.dim, -1)
        dphi = np.matmul(d.transpose(0, 2, 1), p).reshape(self.params["phi"].shape)
        dp = np.matmul(d, phi).transpose(1, 0, 2)
        dp = dp.reshape(b, *self.grid, self.rep_in.dim, size, size)
        return fold_patches(dp, self.k), {"phi": dphi}

    def regularizer(self, alpha):
        v, g = reg.l_hinge(self.params["phi"], self.group, self.rep_in, self.rep_out, alpha)
        return v, {"phi": g}

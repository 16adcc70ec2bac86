"""Cyclic rotation groups, their real representations, and actions on 2D fields.

Spatial convention: pixel ``(row, col)`` of an ``N x N`` grid sits at the point
``(x, y) = (col - c, row - c)`` with ``c = (N - 1) / 2``.  Vector channels are
stored as ``(v_x, v_y)`` in the same frame, so a rotation acts on positions and
on vector components with the same matrix.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from functools import lru_cache

import numpy as np

from .errors import DomainError, ShapeError


def cos_sin(numer: int, n: int) -> tuple[float, float]:
    """cos and sin of ``2*pi*numer/n``, exact when the angle is a quarter turn."""
    numer %= n
    if (4 * numer) % n == 0:
        return [(1.0, 0.0), (0.0, 1.0), (-1.0, 0.0), (0.0, -1.0)][(4 * numer) // n]
    theta = 2.0 * math.pi * numer / n
    return math.cos(theta), math.sin(theta)


def rotation_2x2(numer: int, n: int) -> np.ndarray:
    c, s = cos_sin(numer, n)
    return np.array([[c, -s], [s, c]])


@dataclass(frozen=True)
class CyclicGroup:
    """The rotation group C_n; elements are the residues 0..n-1."""

    n: int

    def __post_init__(self):
        if not isinstance(self.n, (int, np.integer)) or self.n < 1:
            raise DomainError(f"group order must be a positive integer, got {self.n!r}")

    @property
    def order(self) -> int:
        return self.n

    def elements(self) -> range:
        return range(self.n)

    def check(self, g: int) -> int:
        if not isinstance(g, (int, np.integer)) or not 0 <= g < self.n:
            raise DomainError(f"{g!r} is not an element of C{self.n}")
        return int(g)

    def compose(self, g: int, h: int) -> int:
        return (self.check(g) + self.check(h)) % self.n

    def inverse(self, g: int) -> int:
        return (self.n - self.check(g)) % self.n

    def is_quarter_turn(self, g: int) -> bool:
        """True when rotating by g is an exact index permutation of a square grid."""
        return (4 * self.check(g)) % self.n == 0

    def trivial(self) -> "Representation":
        return Representation(self, "trivial")

    def irrep(self, k: int) -> "Representation":
        return Representation(self, "irrep", freq=int(k))

    def regular(self) -> "Representation":
        return Representation(self, "regular")

    def __str__(self):
        return f"C{self.n}"


@dataclass(frozen=True)
class Representation:
    """A real orthogonal representation of a cyclic group.

    Atomic kinds are ``trivial``, ``irrep`` (a planar rotation of frequency
    ``freq``) and ``regular``.  Direct sums keep their summands as an ordered
    tuple of atoms whose channel blocks are laid out contiguously in that order.
    Use ``a + b`` for direct sums and ``rep * m`` for ``m`` copies.
    """

    group: CyclicGroup
    kind: str
    freq: int = 0
    components: tuple["Representation", ...] = field(default=(), repr=False)

    def __post_init__(self):
        if self.kind not in ("trivial", "irrep", "regular", "sum"):
            raise DomainError(f"unknown representation kind {self.kind!r}")

    @property
    def dim(self) -> int:
        if self.kind == "trivial":
            return 1
        if self.kind == "irrep":
            return 2
        if self.kind == "regular":
            return self.group.n
        return sum(c.dim for c in self.components)

    @property
    def name(self) -> str:
        if self.kind == "irrep":
            return f"irrep{self.freq}"
        if self.kind == "sum":
            return "+".join(a.name for a in self.components)
        return self.kind

    def atoms(self) -> tuple["Representation", ...]:
        return self.components if self.kind == "sum" else (self,)

    def is_permutation(self) -> bool:
        """Permutation representations commute with pointwise nonlinearities."""
        return all(a.kind in ("trivial", "regular") for a in self.atoms())

    def __add__(self, other: "Representation") -> "Representation":
        if not isinstance(other, Representation):
            return NotImplemented
        if other.group != self.group:
            raise DomainError("direct sum of representations of different groups")
        return Representation(self.group, "sum", components=self.atoms() + other.atoms())

    def __mul__(self, m: int) -> "Representation":
        if m < 1:
            raise DomainError("multiplicity must be >= 1")
        atoms = self.atoms() * int(m)
        if len(atoms) == 1:
            return atoms[0]
        return Representation(self.group, "sum", components=atoms)

    __rmul__ = __mul__

    def matrix(self, g: int) -> np.ndarray:
        g = self.group.check(g)
        return _rep_matrix(self, g).copy()

    @classmethod
    def from_names(cls, group: CyclicGroup, names) -> "Representation":
        atoms = []
        for name in names:
            if name == "trivial":
                atoms.append(group.trivial())
            elif name == "regular":
                atoms.append(group.regular())
            elif name.startswith("irrep"):
                atoms.append(group.irrep(int(name[5:])))
            else:
                raise DomainError(f"unknown representation name {name!r}")
        if len(atoms) == 1:
            return atoms[0]
        return cls(group, "sum", components=tuple(atoms))

    def names(self) -> list[str]:
        return [a.name for a in self.atoms()]


@lru_cache(maxsize=4096)
def _rep_matrix(rep: Representation, g: int) -> np.ndarray:
    n = rep.group.n
    if rep.kind == "trivial":
        return np.ones((1, 1))
    if rep.kind == "irrep":
        return rotation_2x2(rep.freq * g, n)
    if rep.kind == "regular":
        # e_i -> e_{i+g}
        m = np.zeros((n, n))
        m[(np.arange(n) + g) % n, np.arange(n)] = 1.0
        return m
    out = np.zeros((rep.dim, rep.dim))
    o = 0
    for a in rep.components:
        d = a.dim
        out[o:o + d, o:o + d] = _rep_matrix(a, g)
        o += d
    return out


def rep_matrix(rep: Representation, g: int) -> np.ndarray:
    return rep.matrix(g)


# ---------------------------------------------------------------- grid rotation


@lru_cache(maxsize=256)
def grid_rotation_matrix(size: int, n: int, g: int) -> np.ndarray:
    """Linear operator rotating a flattened ``size x size`` grid by ``2*pi*g/n``.

    ``out = M @ in.ravel()`` satisfies ``out(p) = in(R^-1 p)``, evaluated by
    bilinear interpolation with zero padding (an exact permutation for quarter
    turns).
    """
    c = (size - 1) / 2.0
    cs, sn = cos_sin(g, n)
    m = np.zeros((size * size, size * size))
    rows, cols = np.meshgrid(np.arange(size), np.arange(size), indexing="ij")
    px = cols.ravel() - c
    py = rows.ravel() - c
    # R^-1 = R^T
    sx = cs * px + sn * py + c
    sy = -sn * px + cs * py + c
    if (4 * g) % n == 0:
        sx = np.rint(sx).astype(int)
        sy = np.rint(sy).astype(int)
        m[np.arange(size * size), sy * size + sx] = 1.0
        return m
    x0 = np.floor(sx).astype(int)
    y0 = np.floor(sy).astype(int)
    fx = sx - x0
    fy = sy - y0
    for dy, dx, wt in ((0, 0, (1 - fy) * (1 - fx)), (0, 1, (1 - fy) * fx),
                       (1, 0, fy * (1 - fx)), (1, 1, fy * fx)):
        yy = y0 + dy
        xx = x0 + dx
        ok = (yy >= 0) & (yy < size) & (xx >= 0) & (xx < size) & (wt > 1e-14)
        np.add.at(m, (np.nonzero(ok)[0], yy[ok] * size + xx[ok]), wt[ok])
    return m


def _check_square(x: np.ndarray):
    if x.ndim < 2 or x.shape[-1] != x.shape[-2]:
        raise ShapeError(f"rotation needs a square grid, got spatial shape {x.shape[-2:]}")


def rotate_grid(x: np.ndarray, n: int, g: int) -> np.ndarray:
    """Rotate the trailing two (spatial) axes of ``x`` by ``2*pi*g/n``."""
    g %= n
    if g == 0:
        return x.copy()
    _check_square(x)
    if (4 * g) % n == 0:
        return np.ascontiguousarray(np.rot90(x, -(4 * g) // n, axes=(-2, -1)))
    size = x.shape[-1]
    m = grid_rotation_matrix(size, n, g).astype(x.dtype, copy=False)
    flat = x.reshape(-1, size * size)
    return (flat @ m.T).reshape(x.shape)


def rotate_grid_adjoint(x: np.ndarray, n: int, g: int) -> np.ndarray:
    """Transpose of :func:`rotate_grid` (its inverse for quarter turns)."""
    g %= n
    if g == 0:
        return x.copy()
    _check_square(x)
    if (4 * g) % n == 0:
        return np.ascontiguousarray(np.rot90(x, (4 * g) // n, axes=(-2, -1)))
    size = x.shape[-1]
    m = grid_rotation_matrix(size, n, g).astype(x.dtype, copy=False)
    flat = x.reshape(-1, size * size)
    return (flat @ m).reshape(x.shape)


def _channel_blocks(rep: Representation, channels: int) -> int:
    if channels % rep.dim:
        raise ShapeError(f"{channels} channels is not a multiple of rep dim {rep.dim}")
    return channels // rep.dim


def act_array(rep: Representation, g: int, x: np.ndarray) -> np.ndarray:
    """Act with g on an array of shape ``(..., C, H, W)``.

    The grid is rotated and ``rep.matrix(g)`` is applied to each block of
    ``rep.dim`` channels.
    """
    g = rep.group.check(g)
    if g == 0:
        return x.copy()
    if x.ndim < 3:
        raise ShapeError("expected (..., C, H, W)")
    mult = _channel_blocks(rep, x.shape[-3])
    y = rotate_grid(x, rep.group.n, g)
    r = rep.matrix(g).astype(x.dtype, copy=False)
    lead = x.shape[:-3]
    y = y.reshape(lead + (mult, rep.dim) + x.shape[-2:])
    y = np.einsum("ab,...mbhw->...mahw", r, y)
    return y.reshape(x.shape)


@dataclass
class FeatureField:
    """A grid of channel vectors together with the group action on its channels."""

    data: np.ndarray
    rep: Representation

    def __post_init__(self):
        self.data = np.asarray(self.data)
        if self.data.ndim != 3:
            raise ShapeError(f"FeatureField data must be (C, H, W), got {self.data.shape}")
        _channel_blocks(self.rep, self.data.shape[0])

    @property
    def group(self) -> CyclicGroup:
        return self.rep.group

    @property
    def multiplicity(self) -> int:
        return self.data.shape[0] // self.rep.dim


def act_on_field(g: int, f: FeatureField) -> FeatureField:
    return FeatureField(act_array(f.rep, g, f.data), f.rep)

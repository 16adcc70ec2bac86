"""Equivariant kernel bases: nullspace of the steerable kernel constraint.

A kernel ``Phi: K^2 -> R^{c_out x c_in}`` is equivariant when
``Phi(h y) = rho_out(h) Phi(y) rho_in(h)^-1`` for every h.  The constraint is
block diagonal in the field decomposition of ``rho_in`` and ``rho_out``, so it
is solved once per pair of atomic field types and the blocks are reused for
every pair of fields of those types.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from functools import lru_cache
from pathlib import Path

import numpy as np

from .errors import DomainError
from .groups import CyclicGroup, Representation, grid_rotation_matrix, rotate_grid

RANK_TOL = 1e-8


@dataclass
class FieldLayout:
    """Channel indices of every field type inside a (direct sum) representation."""

    types: list[str]
    counts: dict[str, int]
    index: dict[str, np.ndarray]
    dims: dict[str, int]

    @classmethod
    def of(cls, rep: Representation) -> "FieldLayout":
        types, counts, index, dims = [], {}, {}, {}
        offset = 0
        for a in rep.atoms():
            t = a.name
            if t not in counts:
                types.append(t)
                counts[t] = 0
                index[t] = []
                dims[t] = a.dim
            counts[t] += 1
            index[t].extend(range(offset, offset + a.dim))
            offset += a.dim
        return cls(types, counts, {t: np.array(v, dtype=int) for t, v in index.items()}, dims)


def _atom(group: CyclicGroup, name: str) -> Representation:
    return Representation.from_names(group, [name])


def constraint_operator(group: CyclicGroup, rep_out: Representation, rep_in: Representation,
                        k: int, g: int) -> np.ndarray:
    """Matrix of ``Phi -> rho_out(g) rot_g(Phi) rho_in(g)^T`` on flattened kernels."""
    size = 2 * k + 1
    chan = np.kron(rep_out.matrix(g), rep_in.matrix(g))
    return np.kron(chan, grid_rotation_matrix(size, group.n, g))


def _canonical_order(d_out: int, d_in: int, k: int) -> np.ndarray:
    size = 2 * k + 1
    o, i, u, v = np.meshgrid(np.arange(d_out), np.arange(d_in), np.arange(size),
                             np.arange(size), indexing="ij")
    r2 = ((u - k) ** 2 + (v - k) ** 2).ravel()
    flat = np.arange(r2.size)
    return np.lexsort((flat, r2))


@lru_cache(maxsize=512)
def _solve_block(n: int, out_name: str, in_name: str, k: int, tol: float = RANK_TOL) -> np.ndarray:
    group = CyclicGroup(n)
    ro, ri = _atom(group, out_name), _atom(group, in_name)
    size = 2 * k + 1
    d = ro.dim * ri.dim * size * size
    # one generator suffices when rotations are exact; interpolated rotations
    # do not compose exactly, so every element is constrained
    elems = [1] if n in (1, 2, 4) else list(range(1, n))
    if n == 1:
        elems = []
    rows = [np.eye(d) - constraint_operator(group, ro, ri, k, g) for g in elems]
    if rows:
        a = np.vstack(rows)
        _, s, vt = np.linalg.svd(a)
        s_full = np.zeros(d)
        s_full[:s.size] = s
        smax = s_full.max()
        null = vt[s_full <= tol * smax]
    else:
        null = np.eye(d)
    dim = null.shape[0]
    if dim == 0:
        return np.zeros((0, ro.dim, ri.dim, size, size))
    # gauge fixing: Gram-Schmidt on projector columns in a fixed coordinate order
    proj = null.T @ null
    vecs = []
    for j in _canonical_order(ro.dim, ri.dim, k):
        c = proj[:, j].copy()
        for b in vecs:
            c -= (b @ c) * b
        nrm = np.linalg.norm(c)
        if nrm > 1e-6:
            vecs.append(c / nrm)
            if len(vecs) == dim:
                break
    basis = np.array(vecs)
    # re-orthonormalise against accumulated rounding
    q, _ = np.linalg.qr(basis.T)
    signs = np.sign(np.sum(q * basis.T, axis=0))
    basis = (q * signs).T
    for b in basis:
        j = np.argmax(np.abs(b) > np.abs(b).max() - 1e-12)
        if b[j] < 0:
            b *= -1
    basis[np.abs(basis) < 1e-13] = 0.0
    basis = basis.reshape(dim, ro.dim, ri.dim, size, size)
    center = np.round(np.sum(basis[:, :, :, k, k] ** 2, axis=(1, 2)), 12)
    order = np.argsort(-center, kind="stable")
    out = np.ascontiguousarray(basis[order])
    out.setflags(write=False)
    return out


@dataclass
class KernelBasis:
    """Equivariant kernel basis between two (direct sum) representations.

    ``blocks[(out_type, in_type)]`` has shape ``(L_b, d_out, d_in, K, K)``; the
    full basis consists of every block element placed at every pair of fields
    of the matching types, giving ``size`` elements in total.
    """

    group: CyclicGroup
    rep_in: Representation
    rep_out: Representation
    k: int
    blocks: dict[tuple[str, str], np.ndarray]
    layout_in: FieldLayout = field(init=False)
    layout_out: FieldLayout = field(init=False)

    def __post_init__(self):
        self.layout_in = FieldLayout.of(self.rep_in)
        self.layout_out = FieldLayout.of(self.rep_out)

    @property
    def kernel_size(self) -> int:
        return 2 * self.k + 1

    def pairs(self):
        """Type pairs with a non-empty block."""
        return [p for p, b in self.blocks.items() if b.shape[0] > 0]

    @property
    def size(self) -> int:
        lo, li = self.layout_out, self.layout_in
        return sum(b.shape[0] * lo.counts[a] * li.counts[c] for (a, c), b in self.blocks.items())

    def __len__(self):
        return self.size

    def tensors(self) -> list[np.ndarray]:
        """Materialise the basis as dense ``(c_out, c_in, K, K)`` tensors."""
        size = self.kernel_size
        out_atoms, in_atoms = self.rep_out.atoms(), self.rep_in.atoms()
        out_off = np.cumsum([0] + [a.dim for a in out_atoms])
        in_off = np.cumsum([0] + [a.dim for a in in_atoms])
        result = []
        for fo, ao in enumerate(out_atoms):
            for fi, ai in enumerate(in_atoms):
                block = self.blocks[(ao.name, ai.name)]
                for el in block:
                    t = np.zeros((self.rep_out.dim, self.rep_in.dim, size, size))
                    t[out_off[fo]:out_off[fo + 1], in_off[fi]:in_off[fi + 1]] = el
                    result.append(t)
        return result


def solve_basis(group: CyclicGroup, rep_in: Representation, rep_out: Representation,
                k: int, tol: float = RANK_TOL) -> KernelBasis:
    if k < 0:
        raise DomainError(f"kernel half-width must be >= 0, got {k}")
    if rep_in.group != group or rep_out.group != group:
        raise DomainError("representations belong to a different group")
    lo, li = FieldLayout.of(rep_out), FieldLayout.of(rep_in)
    blocks = {(a, b): _solve_block(group.n, a, b, k, tol) for a in lo.types for b in li.types}
    return KernelBasis(group, rep_in, rep_out, k, blocks)


def kernel_residual(group: CyclicGroup, rep_out: Representation, rep_in: Representation,
                    phi: np.ndarray) -> float:
    """Max over h of ``|Phi(h y) - rho_out(h) Phi(y) rho_in(h)^-1|`` for one kernel."""
    worst = 0.0
    for h in group.elements():
        lhs = rotate_grid(phi, group.n, group.inverse(h))
        rhs = np.einsum("ab,bcuv,dc->aduv", rep_out.matrix(h), phi, rep_in.matrix(h))
        worst = max(worst, float(np.max(np.abs(lhs - rhs), initial=0.0)))
    return worst


def verify_basis(basis: KernelBasis) -> float:
    """Largest equivariance-constraint residual over all basis elements."""
    worst = 0.0
    g = basis.group
    for (a, b), block in basis.blocks.items():
        ro, ri = _atom(g, a), _atom(g, b)
        for phi in block:
            worst = max(worst, kernel_residual(g, ro, ri, phi))
    return worst


def save_basis(basis: KernelBasis, directory) -> None:
    from .tensorio import write_tensor

    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    entries = []
    for i, ((a, b), block) in enumerate(basis.blocks.items()):
        name = f"block{i}.aeqv"
        write_tensor(directory / name, block)
        entries.append({"out": a, "in": b, "file": name, "shape": list(block.shape)})
    meta = {"group_order": basis.group.n, "rep_in": basis.rep_in.names(),
            "rep_out": basis.rep_out.names(), "k": basis.k, "blocks": entries}
    (directory / "basis.json").write_text(json.dumps(meta, indent=2))


def load_basis(directory) -> KernelBasis:
    from .tensorio import read_tensor

    directory = Path(directory)
    meta = json.loads((directory / "basis.json").read_text())
    group = CyclicGroup(meta["group_order"])
    blocks = {(e["out"], e["in"]): read_tensor(directory / e["file"]) for e in meta["blocks"]}
    return KernelBasis(group, Representation.from_names(group, meta["rep_in"]),
                       Representation.from_names(group, meta["rep_out"]), meta["k"], blocks)

"""Executable invariant suites: gradient checks, basis, EE bounds and reductions."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import regularizers as reg
from .basis import _solve_block, solve_basis, verify_basis
from .evaluation import FunctionTable, check_prop_33, check_prop_34, group_average, random_gset
from .groups import CyclicGroup, Representation
from .layers import (ConvLayer, GroupConvLayer, LocallyConnectedLayer, LowRankTranslationLayer,
                     ReLU, RelaxedGroupConvLayer, RelaxedSteerableConvLayer, SteerableConvLayer)
from .lifting import LiftLayer
from .model import Model, build_spec
from .training import loss

C4 = CyclicGroup(4)
SUITES = ("gradcheck", "basis", "props", "reductions")


@dataclass
class CheckResult:
    name: str
    passed: bool
    value: float
    threshold: float
    instances: int

    def line(self) -> str:
        tag = "PASS" if self.passed else "FAIL"
        return f"{tag} {self.name}: worst {self.value:.3g} (threshold {self.threshold:g}, {self.instances} instances)"


# ---------------------------------------------------------- finite differences


def fd_relative_error(fn, tensors: dict, grads: dict, rng, samples: int = 6, h: float = 1e-6) -> float:
    """Worst relative error between central differences and ``grads``.

    ``fn()`` evaluates the scalar objective from the current contents of
    ``tensors``, which are perturbed in place.  The error per tensor is
    ``|fd - an| / max(|fd|, |an|)`` over ``samples`` random coordinates (as vectors).
    """
    worst = 0.0
    for name, t in tensors.items():
        if t.size == 0:
            continue
        flat = t.reshape(-1)
        idx = rng.choice(flat.size, size=min(samples, flat.size), replace=False)
        fd = np.empty(idx.size)
        for j, i in enumerate(idx):
            old = flat[i]
            flat[i] = old + h
            up = fn()
            flat[i] = old - h
            down = fn()
            flat[i] = old
            fd[j] = (up - down) / (2 * h)
        an = np.asarray(grads.get(name, np.zeros_like(t))).reshape(-1)[idx]
        scale = max(np.linalg.norm(fd), np.linalg.norm(an))
        if scale < 1e-12:
            continue
        worst = max(worst, float(np.linalg.norm(fd - an) / scale))
    return worst


_REPS = [["trivial"], ["irrep1"], ["regular"], ["trivial", "irrep1"], ["regular", "regular"],
         ["trivial", "regular"], ["irrep1", "irrep2"]]


def _rep(rng, group=C4):
    return Representation.from_names(group, _REPS[rng.integers(len(_REPS))])


def _randomize(layer, rng, scale=0.5):
    for p in layer.params.values():
        p[...] = scale * rng.standard_normal(p.shape)


def random_layer(family: str, rng, size: int = 6):
    """A layer of ``family`` with random configuration and parameters, plus an input."""
    k = int(rng.integers(0, 3))
    if family in ("conv", "relu"):
        ci, co = (int(v) for v in rng.integers(1, 4, size=2))
        rep = C4.trivial() * ci
        layer = ConvLayer(ci, co, k, rng=rng) if family == "conv" else ReLU(rep)
    elif family in ("gconv", "rgconv"):
        mi, mo = (int(v) for v in rng.integers(1, 3, size=2))
        if family == "gconv":
            layer = GroupConvLayer(C4, mi, mo, k, rng=rng)
        else:
            layer = RelaxedGroupConvLayer(C4, mi, mo, k, banks=int(rng.integers(1, 4)), rng=rng)
    elif family == "lift":
        names = [["trivial"], ["irrep1"], ["trivial", "irrep1"], ["irrep1", "irrep1"],
                 ["irrep2", "trivial"]][rng.integers(5)]
        layer = LiftLayer(Representation.from_names(C4, names))
    else:
        ri, ro = _rep(rng), _rep(rng)
        if family == "steer":
            layer = SteerableConvLayer(ri, ro, k, rng=rng)
        elif family == "rsteer":
            layer = RelaxedSteerableConvLayer(ri, ro, k, rng=rng)
        elif family == "rsteer_angular":
            layer = RelaxedSteerableConvLayer(ri, ro, k, angular=True,
                                              n_angles=int(rng.choice([4, 8])), rng=rng)
        elif family == "lowrank":
            layer = LowRankTranslationLayer(ri, ro, k, (size, size), rank=int(rng.integers(1, 4)), rng=rng)
        elif family == "lc":
            layer = LocallyConnectedLayer(ri, ro, k, (size, size), rng=rng)
        else:
            raise ValueError(f"unknown family {family!r}")
    _randomize(layer, rng)
    x = rng.standard_normal((2, layer.rep_in.dim, size, size))
    return layer, x


LAYER_FAMILIES = ("conv", "relu", "lift", "gconv", "rgconv", "steer", "rsteer", "rsteer_angular",
                  "lowrank", "lc")
MODEL_KINDS = ("conv", "steer", "rsteer", "rsteer_angular", "lowrank", "gconv", "rgconv", "combo",
               "clcnn")


def layer_gradcheck(family: str, rng, samples: int = 6) -> float:
    layer, x = random_layer(family, rng)
    y, cache = layer.forward(x)
    r = rng.standard_normal(y.shape)
    dx, grads = layer.backward(cache, r)
    tensors = dict(layer.params)
    tensors["__input__"] = x
    grads = dict(grads)
    grads["__input__"] = dx
    return fd_relative_error(lambda: float(np.sum(layer(x) * r)), tensors, grads, rng, samples)


def regularizer_gradcheck(name: str, rng, samples: int = 6) -> float:
    alpha = float(rng.uniform(0.1, 2.0))
    if name == "l_gconv":
        w = rng.standard_normal((int(rng.integers(1, 4)), 4))
        fn = lambda: reg.l_gconv(w, alpha)
    elif name == "l_sconv":
        w = rng.standard_normal((3, 3, 2, 1, 3))
        fn = lambda: reg.l_sconv(w, alpha)
    elif name == "l_angular":
        w = rng.standard_normal((5, 2, 2, 3))
        fn = lambda: reg.l_angular(w, alpha)
    elif name == "l_hinge":
        ri, ro = _rep(rng), _rep(rng)
        shape = (ro.dim, ri.dim, 3, 3) if rng.random() < 0.5 else (4, 4, ro.dim, ri.dim, 3, 3)
        w = rng.standard_normal(shape)
        fn = lambda: reg.l_hinge(w, C4, ri, ro, alpha)
    else:
        raise ValueError(f"unknown regularizer {name!r}")
    _, g = fn()
    return fd_relative_error(lambda: fn()[0], {"w": w}, {"w": g}, rng, samples)


def loss_gradcheck(rng, kind: str | None = None, samples: int = 4) -> float:
    """Full K-step unrolled loss (prediction + regularizer) on a 2-layer 8x8 model."""
    kind = kind or MODEL_KINDS[rng.integers(len(MODEL_KINDS))]
    frame = ["trivial", "irrep1"] if rng.random() < 0.5 else ["trivial"]
    spec = build_spec(kind, frame, input_len=2, hidden=1, depth=2, k=1, grid=(8, 8))
    model = Model(spec, seed=int(rng.integers(1 << 31)))
    for p in model.params.values():
        p += 0.3 * rng.standard_normal(p.shape)
    c = model.rep_out.dim
    x = rng.standard_normal((2, 2 * c, 8, 8))
    y = rng.standard_normal((2, 2, c, 8, 8))
    alpha = 0.01
    _, grads, _ = loss(model, (x, y), alpha, 2)
    return fd_relative_error(lambda: loss(model, (x, y), alpha, 2)[0], model.params, grads, rng, samples)


def gradcheck_suite(instances: int = 20, seed: int = 0, tol: float = 1e-5) -> list[CheckResult]:
    rng = np.random.default_rng(seed)
    out = []
    for fam in LAYER_FAMILIES:
        worst = max(layer_gradcheck(fam, rng) for _ in range(instances))
        out.append(CheckResult(f"gradcheck layer {fam}", worst <= tol, worst, tol, instances))
    for name in ("l_gconv", "l_sconv", "l_angular", "l_hinge"):
        worst = max(regularizer_gradcheck(name, rng) for _ in range(instances))
        out.append(CheckResult(f"gradcheck {name}", worst <= tol, worst, tol, instances))
    worst = max(loss_gradcheck(rng) for _ in range(instances))
    out.append(CheckResult("gradcheck unrolled loss", worst <= tol, worst, tol, instances))
    return out


# ---------------------------------------------------------------------- basis


def basis_suite(tol: float = 1e-10) -> list[CheckResult]:
    out = []
    b = solve_basis(C4, C4.trivial(), C4.trivial(), 1)
    out.append(CheckResult("basis trivial->trivial 3x3 dimension", b.size == 3, b.size, 3, 1))
    types = ["trivial", "irrep1", "irrep2", "regular"]
    worst, count = 0.0, 0
    for k in range(4):
        for a in types:
            for c in types:
                rep_out = Representation.from_names(C4, [a])
                rep_in = Representation.from_names(C4, [c])
                worst = max(worst, verify_basis(solve_basis(C4, rep_in, rep_out, k)))
                count += 1
    mixed = solve_basis(C4, Representation.from_names(C4, ["trivial", "irrep1", "regular"]),
                        Representation.from_names(C4, ["regular", "irrep1"]), 2)
    worst = max(worst, verify_basis(mixed))
    out.append(CheckResult("basis residual", worst <= tol, worst, tol, count + 1))
    same = True
    for k in range(3):
        for a in types:
            for c in types:
                first = _solve_block.__wrapped__(4, a, c, k)
                second = _solve_block.__wrapped__(4, a, c, k)
                same &= first.shape == second.shape and first.tobytes() == second.tobytes()
    out.append(CheckResult("basis determinism", bool(same), 0.0 if same else 1.0, 0.0, 3 * 16))
    return out


# ---------------------------------------------------------------------- props


def random_table(rng, group=None) -> tuple[FunctionTable, FunctionTable]:
    """A random table ``f`` and a group-averaged equivariant comparator."""
    group = group or CyclicGroup(int(rng.choice([1, 2, 3, 4, 6])))
    names = [["trivial"], ["irrep1"], ["regular"], ["trivial", "irrep1"]][rng.integers(4)]
    rep = Representation.from_names(group, names)
    action = random_gset(group, rng, orbits=int(rng.integers(1, 4)))
    scale = float(rng.choice([1e-3, 1.0, 10.0]))
    f = FunctionTable(action, scale * rng.standard_normal((action.shape[1], rep.dim)), rep)
    base = f if rng.random() < 0.5 else FunctionTable(
        action, scale * rng.standard_normal(f.values.shape), rep)
    return f, group_average(base)


def props_suite(instances: int = 1000, seed: int = 0) -> list[CheckResult]:
    rng = np.random.default_rng(seed)
    ok33 = ok34 = 0
    for _ in range(instances):
        f, f_eq = random_table(rng)
        ok33 += check_prop_33(f, f_eq)[0]
    for _ in range(instances):
        f, f_eq = random_table(rng)
        if rng.random() < 0.3:
            theta = f_eq
        else:
            theta = FunctionTable(f.action, f.values + rng.uniform(0, 2) * rng.standard_normal(f.values.shape),
                                  f.rep_out)
        dist = float(np.max(np.linalg.norm(f.values - theta.values, axis=1)))
        ok34 += check_prop_34(f, theta, dist * (1 + rng.uniform(0, 0.5)))
    return [CheckResult("check_prop_33 distance lower bound", ok33 == instances, instances - ok33, 0, instances),
            CheckResult("check_prop_34 EE transfer bound", ok34 == instances, instances - ok34, 0, instances)]


# ----------------------------------------------------------------- reductions


def _reduction_rgconv(rng, x, k):
    mi, mo = x.shape[1] // 4, int(rng.integers(1, 3))
    banks = int(rng.integers(1, 4))
    relaxed = RelaxedGroupConvLayer(C4, mi, mo, k, banks=banks, rng=rng)
    relaxed.params["kernel"][...] = rng.standard_normal(relaxed.params["kernel"].shape)
    tied = rng.standard_normal(banks)
    relaxed.params["relax"][...] = tied[:, None]
    strict = GroupConvLayer(C4, mi, mo, k)
    strict.params["kernel"][...] = np.einsum("l,l...->...", tied, relaxed.params["kernel"])
    return float(np.max(np.abs(relaxed(x) - strict(x))))


def _reduction_rsteer(rng, x, k, rep_in):
    rep_out = _rep(rng)
    strict = SteerableConvLayer(rep_in, rep_out, k, rng=rng)
    _randomize(strict, rng)
    angular = bool(rng.random() < 0.3)
    relaxed = RelaxedSteerableConvLayer(rep_in, rep_out, k, angular=angular, rng=rng,
                                        basis=strict.basis)
    for key, w in relaxed.params.items():
        w[...] = strict.params[key]
    return float(np.max(np.abs(relaxed(x) - strict(x))))


def _reduction_lowrank(rng, x, k, rep_in):
    rep_out = _rep(rng)
    size = x.shape[-1]
    rank = int(rng.integers(1, 4))
    low = LowRankTranslationLayer(rep_in, rep_out, k, (size, size), rank=rank, rng=rng)
    _randomize(low, rng)
    consts = rng.standard_normal(rank)
    low.params["a"][...] = consts[:, None, None]
    relaxed = RelaxedSteerableConvLayer(rep_in, rep_out, k, rng=rng, basis=low.basis)
    for key, w in relaxed.params.items():
        w[...] = np.einsum("r,r...->...", consts, low.params[key])
    return float(np.max(np.abs(low(x) - relaxed(x))))


def reductions_suite(instances: int = 200, seed: int = 0, tol: float = 1e-6) -> list[CheckResult]:
    rng = np.random.default_rng(seed)
    worst = {"rgconv": 0.0, "rsteer": 0.0, "lowrank": 0.0}
    for _ in range(instances):
        size = int(rng.integers(3, 17))
        k = int(rng.integers(0, 3))
        b = int(rng.integers(1, 3))
        mi = int(rng.integers(1, 3))
        worst["rgconv"] = max(worst["rgconv"], _reduction_rgconv(rng, rng.standard_normal((b, 4 * mi, size, size)), k))
        rep_in = _rep(rng)
        x = rng.standard_normal((b, rep_in.dim, size, size))
        worst["rsteer"] = max(worst["rsteer"], _reduction_rsteer(rng, x, k, rep_in))
        worst["lowrank"] = max(worst["lowrank"], _reduction_lowrank(rng, x, k, rep_in))
    return [CheckResult(f"reduction {name} -> strict", v <= tol, v, tol, instances)
            for name, v in worst.items()]


def run_suite(name: str, **kw) -> list[CheckResult]:
    if name == "gradcheck":
        return gradcheck_suite(**kw)
    if name == "basis":
        return basis_suite(**kw)
    if name == "props":
        return props_suite(**kw)
    if name == "reductions":
        return reductions_suite(**kw)
    raise ValueError(f"unknown suite {name!r}; choose from {', '.join(SUITES)}")

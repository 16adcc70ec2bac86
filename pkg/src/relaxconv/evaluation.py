"""Equivariance error, forecast RMSE and executable checks of the EE bounds."""

from __future__ import annotations

import csv
import json
from dataclasses import asdict, dataclass

import numpy as np

from .errors import PreconditionError, ShapeError
from .groups import CyclicGroup, Representation, act_array


@dataclass
class EEReport:
    """Equivariance error estimated over a finite probe set.

    ``ee`` is the max over group elements and probes of the mean absolute
    defect ``|f(g x) - g f(x)|`` (L1 normalised per output element); ``raw_*``
    hold the unnormalised L1.  Being a max over finitely many probes, it lower-
    bounds the supremum over all inputs.
    """

    per_element: list[float]
    ee: float
    raw_per_element: list[float]
    raw_ee: float
    norm: str
    samples: int

    def to_dict(self):
        return asdict(self)

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True)


def model_ee(model, probes: np.ndarray, group: CyclicGroup | None = None,
             rep_in: Representation | None = None, rep_out: Representation | None = None,
             norm: str = "l1", chunk: int = 32) -> EEReport:
    """``max_{g, x} |f(g x) - g f(x)|`` over ``probes`` ``(P, C_in, H, W)``.

    ``model`` is a :class:`~relaxconv.model.Model` (reps taken from it) or any
    callable on batches, in which case ``group``, ``rep_in`` and ``rep_out`` are required.
    """
    if rep_in is None or rep_out is None:
        rep_in, rep_out = model.rep_in, model.rep_out
    group = group if group is not None else rep_in.group
    if norm != "l1":
        raise ValueError(f"unsupported norm {norm!r}")
    probes = np.asarray(probes)
    if probes.ndim != 4:
        raise ShapeError(f"probes must be (P, C, H, W), got {probes.shape}")
    if group.n > 1 and probes.shape[-1] != probes.shape[-2]:
        raise ShapeError(f"equivariance under rotations needs square grids, got {probes.shape[-2:]}")
    per, raw = [], []
    for g in group.elements():
        worst, worst_raw = 0.0, 0.0
        for a in range(0, len(probes), chunk):
            x = probes[a:a + chunk]
            lhs = model(act_array(rep_in, g, x))
            rhs = act_array(rep_out, g, model(x))
            d = np.abs(lhs - rhs).reshape(len(x), -1).astype(np.float64)
            worst = max(worst, float(d.mean(axis=1).max(initial=0.0)))
            worst_raw = max(worst_raw, float(d.sum(axis=1).max(initial=0.0)))
        per.append(worst)
        raw.append(worst_raw)
    return EEReport(per, max(per), raw, max(raw), norm, int(len(probes)))


def rollout_rmse(predictions: np.ndarray, targets: np.ndarray) -> float:
    predictions, targets = np.asarray(predictions), np.asarray(targets)
    if predictions.shape != targets.shape:
        raise ShapeError(f"prediction shape {predictions.shape} != target shape {targets.shape}")
    diff = predictions.astype(np.float64) - targets.astype(np.float64)
    return float(np.sqrt(np.mean(diff ** 2)))


def rollout_starts(n_frames: int, input_len: int, steps: int, stride: int = 10, first: int = 0):
    last = n_frames - input_len - steps
    if last < first:
        raise ShapeError(f"{n_frames} frames cannot hold {input_len} seed + {steps} forecast frames")
    return list(range(first, last + 1, stride))


def trajectory_rmse(model, data: np.ndarray, traj, steps: int = 20, starts=None) -> float:
    """RMSE of ``steps``-frame rollouts from every start in ``starts`` of each trajectory."""
    from .training import rollout

    data = np.asarray(getattr(data, "data", data)) if not isinstance(data, np.ndarray) else data
    L = model.spec.input_len
    starts = rollout_starts(data.shape[1], L, steps) if starts is None else list(starts)
    seeds = np.stack([data[i, s:s + L] for i in traj for s in starts])
    truth = np.stack([data[i, s + L:s + L + steps] for i in traj for s in starts])
    return rollout_rmse(rollout(model, seeds, steps), truth)


def test_domain_rmse(model, data, split, steps: int = 20) -> float:
    return trajectory_rmse(model, data, split.test_domain, steps)


def test_future_rmse(model, data, split, steps: int = 20) -> float:
    L = model.spec.input_len
    return trajectory_rmse(model, data, split.train_traj, steps, starts=[split.train_frames - L])


# -------------------------------------------------------------- function tables


@dataclass
class FunctionTable:
    """A function on a finite G-set.

    ``action[g, i]`` is the index of ``g . x_i``; ``values[i]`` is ``f(x_i)``,
    acted on by ``rep_out``.
    """

    action: np.ndarray
    values: np.ndarray
    rep_out: Representation

    def __post_init__(self):
        self.action = np.asarray(self.action, dtype=int)
        self.values = np.asarray(self.values, dtype=np.float64)
        if self.values.ndim == 1:
            self.values = self.values[:, None]
        n = self.rep_out.group.n
        if self.action.shape != (n, self.values.shape[0]):
            raise ShapeError(f"action table must be ({n}, {self.values.shape[0]}), got {self.action.shape}")
        if self.values.shape[1] != self.rep_out.dim:
            raise ShapeError("table values do not match the output representation")


def _check_action(group: CyclicGroup, action: np.ndarray):
    npts = action.shape[1]
    if not np.array_equal(action[0], np.arange(npts)):
        raise PreconditionError("identity does not act trivially on the table")
    for g in group.elements():
        if not np.array_equal(np.sort(action[g]), np.arange(npts)):
            raise PreconditionError(f"element {g} does not permute the points")
        for h in group.elements():
            if not np.array_equal(action[group.compose(g, h)], action[g][action[h]]):
                raise PreconditionError("action table is not a group action")


def _check_orthogonal(rep: Representation):
    for g in rep.group.elements():
        m = rep.matrix(g)
        if not np.allclose(m @ m.T, np.eye(rep.dim), atol=1e-12):
            raise PreconditionError(f"representation is not norm preserving at element {g}")


def table_ee(f: FunctionTable) -> float:
    """``max_{g, i} ||f(g x_i) - rho(g) f(x_i)||_2`` (a G-invariant norm for orthogonal reps)."""
    worst = 0.0
    for g in f.rep_out.group.elements():
        d = f.values[f.action[g]] - f.values @ f.rep_out.matrix(g).T
        worst = max(worst, float(np.max(np.linalg.norm(d, axis=1), initial=0.0)))
    return worst


def group_average(f: FunctionTable) -> FunctionTable:
    """Equivariant projection ``(1/|G|) sum_g rho(g)^-1 f(g x)``."""
    group = f.rep_out.group
    acc = np.zeros_like(f.values)
    for g in group.elements():
        acc += f.values[f.action[g]] @ f.rep_out.matrix(g)  # rho(g)^-1 = rho(g)^T
    return FunctionTable(f.action, acc / group.n, f.rep_out)


def check_prop_33(f: FunctionTable, f_eq: FunctionTable, tol: float = 1e-10):
    """Every equivariant function is at least ``EE(f)/2`` away from ``f`` somewhere.

    Returns ``(holds, x0)`` where ``x0`` indexes the point of largest distance.
    """
    group = f.rep_out.group
    if f_eq.rep_out != f.rep_out or not np.array_equal(f.action, f_eq.action):
        raise PreconditionError("tables must share the G-set and output representation")
    _check_orthogonal(f.rep_out)
    _check_action(group, f.action)
    if table_ee(f_eq) > tol:
        raise PreconditionError(f"comparator is not equivariant (EE = {table_ee(f_eq):.3g})")
    dist = np.linalg.norm(f.values - f_eq.values, axis=1)
    x0 = int(np.argmax(dist))
    slack = 1e-12 * (1.0 + float(np.abs(f.values).max(initial=0.0)))
    return bool(dist[x0] + slack >= table_ee(f) / 2.0), x0


def check_prop_34(f: FunctionTable, f_theta: FunctionTable, c: float) -> bool:
    """``|EE(f) - EE(f_theta)| <= 2c + EE(f)`` whenever ``||f - f_theta||_inf <= c``."""
    if f_theta.rep_out != f.rep_out or not np.array_equal(f.action, f_theta.action):
        raise PreconditionError("tables must share the G-set and output representation")
    _check_orthogonal(f.rep_out)
    _check_action(f.rep_out.group, f.action)
    dist = float(np.max(np.linalg.norm(f.values - f_theta.values, axis=1), initial=0.0))
    if dist > c * (1 + 1e-12) + 1e-15:
        raise PreconditionError(f"sup distance {dist:.6g} exceeds the bound c = {c:.6g}")
    ee_f, ee_t = table_ee(f), table_ee(f_theta)
    slack = 1e-12 * (1.0 + ee_f + ee_t + c)
    return bool(abs(ee_f - ee_t) <= 2 * c + ee_f + slack)


def random_gset(group: CyclicGroup, rng, orbits: int = 2) -> np.ndarray:
    """Action table of a disjoint union of orbits with random stabilisers."""
    n = group.n
    divisors = [d for d in range(1, n + 1) if n % d == 0]
    rows, offset = [[] for _ in range(n)], 0
    for _ in range(orbits):
        size = int(rng.choice(divisors))
        for g in range(n):
            rows[g].extend(offset + (np.arange(size) + g) % size)
        offset += size
    return np.array(rows, dtype=int)


# ------------------------------------------------------------ EE curve output

EE_CURVE_COLUMNS = ("delta", "data_ee", "model_ee", "model_kind")


def write_ee_curve(path_stem, rows: list[dict]) -> None:
    """Write ``rows`` as ``<stem>.csv`` and ``<stem>.json``."""
    stem = str(path_stem)
    with open(stem + ".csv", "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=EE_CURVE_COLUMNS, extrasaction="ignore")
        w.writeheader()
        for r in rows:
            w.writerow(r)
    with open(stem + ".json", "w") as fh:
        json.dump([{k: r.get(k) for k in EE_CURVE_COLUMNS} for r in rows], fh, indent=2)

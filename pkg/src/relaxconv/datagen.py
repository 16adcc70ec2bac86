"""Synthetic approximately symmetric 2D dynamics.

Both generators produce, for every base configuration ("source"), one
trajectory per rotation ``g`` of C4.  With ``delta = 0`` the trajectories of a
source are exact rotated copies of each other; ``delta`` controls how strongly
the dynamics break that relation.
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field

import numpy as np

from .errors import ConfigError, DataError
from .groups import CyclicGroup, Representation, act_array, cos_sin

C4 = CyclicGroup(4)


@dataclass
class SimConfig:
    kind: str = "rotsmoke"
    size: int = 32
    steps: int = 60
    dt: float | None = None
    delta: float = 0.0
    seed: int = 0
    sources: int = 1
    substeps: int = 2
    # heat
    kappa0: float = 1.0
    # rotsmoke
    buoyancy: float = 0.3
    drag: float = 0.05
    inflow_rate: float = 0.05
    inflow_steps: int = 30

    def __post_init__(self):
        if self.kind not in ("heat", "rotsmoke"):
            raise ConfigError(f"unknown generator kind {self.kind!r}")
        if self.size < 4 or self.size % 2:
            raise ConfigError("grid size must be even and >= 4")
        if self.delta < 0:
            raise ConfigError("delta must be non-negative")
        if self.steps < 1 or self.sources < 1 or self.substeps < 1:
            raise ConfigError("steps, sources and substeps must be positive")
        if self.dt is None:
            self.dt = 0.1 if self.kind == "heat" else 0.5

    def to_dict(self):
        return asdict(self)


def frame_rep(kind: str, group: CyclicGroup = C4) -> Representation:
    """Channel action of one frame: scalar heat, or (density, v_x, v_y)."""
    if kind == "heat":
        return group.trivial()
    return group.trivial() + group.irrep(1)


@dataclass
class TrajectoryDataset:
    """Trajectories ``data[i]`` of shape ``(steps, C, H, W)``.

    ``tags[i]`` is the rotation relating trajectory i to the reference
    trajectory (tag 0) of the same ``sources[i]``.
    """

    data: np.ndarray
    tags: np.ndarray
    sources: np.ndarray
    config: SimConfig
    declared_data_ee: float | None = None
    group: CyclicGroup = field(default=C4)

    @property
    def rep(self) -> Representation:
        return frame_rep(self.config.kind, self.group)

    @property
    def trajectories(self):
        return [(int(g), t) for g, t in zip(self.tags, self.data)]

    def __len__(self):
        return self.data.shape[0]

    def subset(self, idx) -> "TrajectoryDataset":
        idx = np.asarray(idx, dtype=int)
        return TrajectoryDataset(self.data[idx], self.tags[idx], self.sources[idx], self.config,
                                 None, self.group)


def _coords(size):
    c = (size - 1) / 2.0
    rows, cols = np.meshgrid(np.arange(size), np.arange(size), indexing="ij")
    return cols - c, rows - c


def _rotate_point(p, g, n=4):
    cs, sn = cos_sin(g, n)
    return (cs * p[0] - sn * p[1], sn * p[0] + cs * p[1])


def _blob(size, center, radius, sharpness=1.0):
    x, y = _coords(size)
    r = np.sqrt((x - center[0]) ** 2 + (y - center[1]) ** 2)
    return 0.5 * (1.0 - np.tanh((r - radius) / sharpness))


def _perturbation(size, rng, bumps=6):
    """Smooth random field normalised to max |p| = 1."""
    x, y = _coords(size)
    p = np.zeros((size, size))
    for _ in range(bumps):
        cx, cy = rng.uniform(-size / 2, size / 2, size=2)
        width = rng.uniform(size / 10, size / 4)
        p += rng.choice([-1.0, 1.0]) * np.exp(-((x - cx) ** 2 + (y - cy) ** 2) / (2 * width ** 2))
    return p / np.abs(p).max()


def _source_points(cfg: SimConfig, rng, radius_frac):
    pts = []
    for _ in range(cfg.sources):
        r = cfg.size * rng.uniform(*radius_frac)
        ang = math.pi / 2 + rng.uniform(-0.35, 0.35)
        # snap to the half-pixel lattice so rotated copies land on exact coordinates
        pts.append((round(2 * r * math.cos(ang)) / 2, round(2 * r * math.sin(ang)) / 2))
    return pts


# ------------------------------------------------------------------------ heat


def heat_step(u: np.ndarray, kappa: np.ndarray, dt: float) -> np.ndarray:
    """Explicit conservative 5-point update with zero-flux boundaries."""
    kx = 0.5 * (kappa[:, 1:] + kappa[:, :-1])
    ky = 0.5 * (kappa[1:, :] + kappa[:-1, :])
    fx = kx * (u[:, 1:] - u[:, :-1])
    fy = ky * (u[1:, :] - u[:-1, :])
    div = np.zeros_like(u)
    div[:, :-1] += fx
    div[:, 1:] -= fx
    div[:-1, :] += fy
    div[1:, :] -= fy
    return u + dt * div


def heat_kappa(cfg: SimConfig) -> np.ndarray:
    rng = np.random.default_rng(cfg.seed)
    p = _perturbation(cfg.size, rng)
    kappa = cfg.kappa0 * (1.0 + cfg.delta * p)
    if kappa.min() <= 0:
        raise ConfigError("delta too large: diffusion coefficient becomes non-positive")
    return kappa


def gen_heat(cfg: SimConfig) -> TrajectoryDataset:
    if cfg.kind != "heat":
        raise ConfigError("gen_heat needs kind='heat'")
    kappa = heat_kappa(cfg)
    if cfg.dt * kappa.max() > 0.25:
        raise ConfigError(f"unstable time step: dt * kappa_max = {cfg.dt * kappa.max():.3f} > 0.25")
    rng = np.random.default_rng(cfg.seed + 1)
    points = _source_points(cfg, rng, (0.15, 0.3))
    data, tags, sources = [], [], []
    for s, p0 in enumerate(points):
        for g in C4.elements():
            u = _blob(cfg.size, _rotate_point(p0, g), cfg.size / 8)
            frames = []
            for _ in range(cfg.steps):
                frames.append(u.copy())
                for _ in range(cfg.substeps):
                    u = heat_step(u, kappa, cfg.dt)
            data.append(np.stack(frames)[:, None])
            tags.append(g)
            sources.append(s)
    ds = TrajectoryDataset(np.stack(data), np.array(tags), np.array(sources), cfg)
    ds.declared_data_ee = measure_data_ee(ds)
    return ds


# -------------------------------------------------------------------- rotsmoke


def _upwind_flux_divergence(q, vx, vy):
    """Conservative first-order upwind ``div(q v)``; nothing enters through the boundary."""
    ux = 0.5 * (vx[:, 1:] + vx[:, :-1])
    uy = 0.5 * (vy[1:, :] + vy[:-1, :])
    fx = np.where(ux > 0, ux * q[:, :-1], ux * q[:, 1:])
    fy = np.where(uy > 0, uy * q[:-1, :], uy * q[1:, :])
    div = np.zeros_like(q)
    div[:, :-1] += fx
    div[:, 1:] -= fx
    div[:-1, :] += fy
    div[1:, :] -= fy
    # outflow through the outer faces
    div[:, -1] += np.maximum(vx[:, -1], 0) * q[:, -1]
    div[:, 0] -= np.minimum(vx[:, 0], 0) * q[:, 0]
    div[-1, :] += np.maximum(vy[-1, :], 0) * q[-1, :]
    div[0, :] -= np.minimum(vy[0, :], 0) * q[0, :]
    return div


def _upwind_gradient(q, vx, vy):
    """Advective upwind ``v . grad q`` with zero exterior values."""
    p = np.pad(q, 1)
    dxm = q - p[1:-1, :-2]
    dxp = p[1:-1, 2:] - q
    dym = q - p[:-2, 1:-1]
    dyp = p[2:, 1:-1] - q
    return (np.where(vx > 0, vx * dxm, vx * dxp) + np.where(vy > 0, vy * dym, vy * dyp))


def rotsmoke_trajectory(cfg: SimConfig, p0, g: int) -> np.ndarray:
    n = C4.n
    size, dt = cfg.size, cfg.dt
    inflow = _blob(size, _rotate_point(p0, g), 2.0)
    norm = math.hypot(*p0)
    d0 = (-p0[0] / norm, -p0[1] / norm)  # radially inward
    dgx, dgy = _rotate_point(d0, g)
    strength = cfg.buoyancy * (1.0 + cfg.delta * g / n)
    rho = np.zeros((size, size))
    vx = np.zeros_like(rho)
    vy = np.zeros_like(rho)
    frames = []
    step = 0
    for _ in range(cfg.steps):
        frames.append(np.stack([rho, vx, vy]))
        for _ in range(cfg.substeps):
            if step < cfg.inflow_steps:
                rho = rho + dt * cfg.inflow_rate * inflow
            vx = vx + dt * (strength * rho * dgx - cfg.drag * vx)
            vy = vy + dt * (strength * rho * dgy - cfg.drag * vy)
            cfl = dt * float(np.max(np.abs(vx) + np.abs(vy)))
            if cfl > 1.0:
                raise ConfigError(f"CFL violation: dt * max(|vx| + |vy|) = {cfl:.3f} > 1")
            adv_x = _upwind_gradient(vx, vx, vy)
            adv_y = _upwind_gradient(vy, vx, vy)
            rho = rho - dt * _upwind_flux_divergence(rho, vx, vy)
            vx = vx - dt * adv_x
            vy = vy - dt * adv_y
            step += 1
    return np.stack(frames)


def gen_rotsmoke(cfg: SimConfig) -> TrajectoryDataset:
    if cfg.kind != "rotsmoke":
        raise ConfigError("gen_rotsmoke needs kind='rotsmoke'")
    rng = np.random.default_rng(cfg.seed + 1)
    points = _source_points(cfg, rng, (0.28, 0.38))
    data, tags, sources = [], [], []
    for s, p0 in enumerate(points):
        for g in C4.elements():
            data.append(rotsmoke_trajectory(cfg, p0, g))
            tags.append(g)
            sources.append(s)
    ds = TrajectoryDataset(np.stack(data), np.array(tags), np.array(sources), cfg)
    ds.declared_data_ee = measure_data_ee(ds)
    return ds


def generate(cfg: SimConfig) -> TrajectoryDataset:
    return gen_heat(cfg) if cfg.kind == "heat" else gen_rotsmoke(cfg)


# ------------------------------------------------------------------- analysis


def measure_data_ee(ds: TrajectoryDataset) -> float:
    """Mean absolute deviation of rotated-back trajectories from their reference."""
    n = ds.group.n
    refs = {int(s): i for i, (s, g) in enumerate(zip(ds.sources, ds.tags)) if g == 0}
    errs = []
    for i, (s, g) in enumerate(zip(ds.sources, ds.tags)):
        if int(s) not in refs:
            raise DataError(f"source {int(s)} has no reference (tag 0) trajectory")
        if g == 0:
            continue
        back = act_array(ds.rep, (n - int(g)) % n, ds.data[i])
        errs.append(float(np.mean(np.abs(back - ds.data[refs[int(s)]]))))
    return float(np.mean(errs)) if errs else 0.0


def sliding_windows(ds, input_len: int = 10, target_len: int = 1):
    """All contiguous ``(input stack, target stack)`` windows of every trajectory.

    ``ds`` may be a dataset or an array ``(N, steps, C, H, W)``.  Inputs are
    ``(input_len * C, H, W)`` and targets ``(target_len, C, H, W)``; both are
    views of the original data.
    """
    data = ds.data if isinstance(ds, TrajectoryDataset) else np.asarray(ds)
    steps = data.shape[1]
    if steps < input_len + target_len:
        raise DataError(f"trajectories have {steps} steps, need {input_len + target_len}")
    c, h, w = data.shape[2:]
    out = []
    for traj in data:
        for t in range(steps - input_len - target_len + 1):
            inp = traj[t:t + input_len].reshape(input_len * c, h, w)
            out.append((inp, traj[t + input_len:t + input_len + target_len]))
    return out


# ------------------------------------------------------------------------- io


def save_dataset(ds: TrajectoryDataset, directory) -> None:
    """``data.aeqv`` plus ``metadata.json`` (config, tags, sources, measured data EE)."""
    import json
    from pathlib import Path

    from .tensorio import write_tensor

    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    write_tensor(directory / "data.aeqv", ds.data)
    meta = {"config": ds.config.to_dict(), "shape": list(ds.data.shape),
            "rep": ds.rep.names(), "group_order": ds.group.n,
            "tags": ds.tags.tolist(), "sources": ds.sources.tolist(),
            "data_ee": ds.declared_data_ee}
    (directory / "metadata.json").write_text(json.dumps(meta, indent=2))


def load_dataset(directory) -> TrajectoryDataset:
    import json
    from pathlib import Path

    from .tensorio import read_tensor

    directory = Path(directory)
    try:
        meta = json.loads((directory / "metadata.json").read_text())
    except json.JSONDecodeError as exc:
        raise DataError(f"{directory}: malformed metadata ({exc})") from None
    data = read_tensor(directory / "data.aeqv")
    if list(data.shape) != meta["shape"]:
        raise DataError(f"{directory}: tensor shape {data.shape} disagrees with metadata")
    return TrajectoryDataset(data, np.array(meta["tags"], dtype=int),
                             np.array(meta["sources"], dtype=int), SimConfig(**meta["config"]),
                             meta["data_ee"], CyclicGroup(meta["group_order"]))

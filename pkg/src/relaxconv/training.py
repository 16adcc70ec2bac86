"""Unrolled-loss training with Adam, data splits, rollout and metric logs."""

from __future__ import annotations

import csv
import logging
import math
from dataclasses import asdict, dataclass, field

import numpy as np

from .errors import ConfigError, DataError, DivergenceError, ShapeError
from .model import Model

log = logging.getLogger(__name__)

METRIC_COLUMNS = ("epoch", "train_loss", "val_loss", "reg_value", "model_ee")


@dataclass
class TrainConfig:
    lr: float = 1e-3
    batch_size: int = 16
    epochs: int = 50
    max_steps: int | None = None
    unroll: int = 4
    alpha: float = 0.0
    input_len: int = 10
    patience: int = 10
    seed: int = 0
    val_frac: float = 0.1
    test_domain_frac: float = 0.2
    future_steps: int = 20
    record_ee: bool = False
    ee_probes: int = 8
    frozen: list[str] = field(default_factory=list)
    restore_best: bool = True
    orbit_batches: bool = True
    holdout: str = "source"
    lr_schedule: str = "constant"

    def __post_init__(self):
        if self.lr < 0 or self.batch_size < 1 or self.epochs < 1:
            raise ConfigError("lr must be >= 0, batch_size and epochs >= 1")
        if self.unroll < 1 or self.input_len < 1:
            raise ConfigError("unroll and input_len must be >= 1")
        if not 0 <= self.val_frac < 1 or not 0 <= self.test_domain_frac < 1:
            raise ConfigError("split fractions must lie in [0, 1)")
        if self.alpha < 0:
            raise ConfigError("alpha must be non-negative")
        if self.holdout not in ("source", "trajectory"):
            raise ConfigError(f"holdout must be 'source' or 'trajectory', got {self.holdout!r}")
        if self.lr_schedule not in ("constant", "cosine"):
            raise ConfigError(f"lr_schedule must be 'constant' or 'cosine', got {self.lr_schedule!r}")

    def to_dict(self):
        return asdict(self)


@dataclass
class TrainState:
    """Adam state over the model's flat parameter registry."""

    params: dict[str, np.ndarray]
    m: dict[str, np.ndarray]
    v: dict[str, np.ndarray]
    step: int = 0
    seed: int = 0
    history: list[dict] = field(default_factory=list)

    @classmethod
    def create(cls, params: dict[str, np.ndarray], seed: int = 0) -> "TrainState":
        return cls(params, {k: np.zeros_like(p) for k, p in params.items()},
                   {k: np.zeros_like(p) for k, p in params.items()}, 0, seed, [])


BETA1, BETA2, EPS = 0.9, 0.999, 1e-8


def adam_step(state: TrainState, grads: dict[str, np.ndarray], lr: float,
              frozen=()) -> TrainState:
    """In-place Adam update of ``state.params``; parameters absent from ``grads`` are skipped."""
    for name, g in grads.items():
        if not np.all(np.isfinite(g)):
            bad = int(np.size(g) - np.count_nonzero(np.isfinite(g)))
            raise DivergenceError(f"non-finite gradient for parameter {name!r} ({bad} entries)")
    state.step += 1
    t = state.step
    c1, c2 = 1.0 - BETA1 ** t, 1.0 - BETA2 ** t
    for name, p in state.params.items():
        if name in frozen or name not in grads:
            continue
        g = grads[name]
        m, v = state.m[name], state.v[name]
        m *= BETA1
        m += (1 - BETA1) * g
        v *= BETA2
        v += (1 - BETA2) * g * g
        p -= lr * (m / c1) / (np.sqrt(v / c2) + EPS)
    return state


def scheduled_lr(cfg: TrainConfig, step: int, total: int) -> float:
    """Learning rate for update ``step`` (0-based) out of ``total``."""
    if cfg.lr_schedule == "constant" or total <= 0:
        return cfg.lr
    return cfg.lr * 0.5 * (1.0 + math.cos(math.pi * min(step, total) / total))


def _frames(inputs, frame_dim):
    b, c, h, w = inputs.shape
    if c % frame_dim:
        raise ShapeError(f"{c} input channels are not a whole number of {frame_dim}-channel frames")
    return list(inputs.reshape(b, c // frame_dim, frame_dim, h, w).transpose(1, 0, 2, 3, 4))


def prediction_loss(model: Model, inputs: np.ndarray, targets: np.ndarray, steps: int | None = None,
                    need_grad: bool = True):
    """Mean squared error of a ``steps``-step unroll and its parameter gradients.

    ``inputs`` is ``(B, input_len * C, H, W)``, ``targets`` ``(B, T, C, H, W)``.
    Predictions are fed back as inputs and the gradient flows through them.
    """
    steps = targets.shape[1] if steps is None else steps
    if steps > targets.shape[1]:
        raise DataError(f"unroll of {steps} steps needs {steps} target frames, got {targets.shape[1]}")
    if steps < 1:
        raise DataError("unroll needs at least one step")
    dt = model.dtype
    cdim = model.rep_out.dim
    seq = _frames(np.asarray(inputs, dtype=dt), cdim)
    n_in = len(seq)
    targets = np.asarray(targets, dtype=dt)
    caches, preds = [], []
    total = 0.0
    for t in range(steps):
        x = np.concatenate(seq[t:t + n_in], axis=1)
        y, cache = model.forward(x)
        caches.append(cache)
        preds.append(y)
        seq.append(y)
        total += float(np.sum((y - targets[:, t]) ** 2))
    count = targets[:, :steps].size
    loss = total / count
    if not need_grad:
        return loss, {}
    grads: dict[str, np.ndarray] = {}
    dpred = [2.0 * (preds[t] - targets[:, t]) / count for t in range(steps)]
    for t in range(steps - 1, -1, -1):
        dx, g = model.backward(caches[t], dpred[t])
        for k, v in g.items():
            grads[k] = grads[k] + v if k in grads else v
        for j, dframe in enumerate(_frames(dx, cdim)):
            p = t + j - n_in
            if p >= 0:
                dpred[p] = dpred[p] + dframe
    return loss, grads


def loss(model: Model, batch, alpha: float = 0.0, steps: int | None = None):
    """Unrolled MSE plus ``alpha`` times the regularizers; returns ``(value, grads, parts)``."""
    inputs, targets = batch
    mse, grads = prediction_loss(model, inputs, targets, steps)
    reg_value, reg_grads = model.regularizer(alpha) if alpha else (0.0, {})
    for k, v in reg_grads.items():
        grads[k] = grads[k] + v if k in grads else v
    return mse + reg_value, grads, {"mse": mse, "reg": reg_value}


def rollout(model: Model, seed_frames: np.ndarray, steps: int = 20) -> np.ndarray:
    """Autoregressive forecast.  ``seed_frames``: ``(L, C, H, W)`` or ``(B, L, C, H, W)``."""
    x = np.asarray(seed_frames, dtype=model.dtype)
    batched = x.ndim == 5
    if not batched:
        x = x[None]
    if x.ndim != 5:
        raise ShapeError(f"seed frames must be (L, C, H, W) or (B, L, C, H, W), got {x.shape}")
    if x.shape[1] != model.spec.input_len or x.shape[2] != model.rep_out.dim:
        raise ShapeError(f"model expects {model.spec.input_len} frames of {model.rep_out.dim} "
                         f"channels, got {x.shape[1:3]}")
    seq = list(x.transpose(1, 0, 2, 3, 4))
    n_in = len(seq)
    out = []
    for _ in range(steps):
        y = model(np.concatenate(seq[-n_in:], axis=1))
        out.append(y)
        seq.append(y)
    pred = np.stack(out, axis=1)
    return pred if batched else pred[0]


# ---------------------------------------------------------------------- splits


@dataclass
class Split:
    """Index-based windows ``(trajectory, start)`` over a dataset array."""

    train: np.ndarray
    val: np.ndarray
    train_traj: np.ndarray
    test_domain: np.ndarray
    train_frames: int

    def to_dict(self):
        return {"train_windows": len(self.train), "val_windows": len(self.val),
                "train_traj": self.train_traj.tolist(), "test_domain": self.test_domain.tolist(),
                "train_frames": self.train_frames}


def make_split(n_traj: int, n_frames: int, cfg: TrainConfig, groups=None) -> Split:
    """Hold out whole trajectories (test-domain) and final frames (test-future).

    With ``groups`` (one label per trajectory, e.g. the source id) whole groups
    are held out, so every rotated copy of a held-out configuration is unseen.
    Validation windows are the latest ``val_frac`` of each training trajectory's windows.
    """
    rng = np.random.default_rng(cfg.seed)
    labels = np.arange(n_traj) if groups is None else np.asarray(groups)
    if labels.shape != (n_traj,):
        raise DataError(f"need one group label per trajectory, got {labels.shape} for {n_traj}")
    uniq = np.unique(labels)
    if uniq.size < 2:
        labels, uniq = np.arange(n_traj), np.arange(n_traj)
    order = uniq[rng.permutation(uniq.size)]
    n_test = int(round(cfg.test_domain_frac * uniq.size)) if uniq.size > 1 else 0
    if cfg.test_domain_frac > 0 and uniq.size > 1:
        n_test = max(n_test, 1)
    held = np.isin(labels, order[:n_test])
    test, train_traj = np.flatnonzero(held), np.flatnonzero(~held)
    if train_traj.size == 0:
        raise DataError("no trajectories left for training")
    train_frames = n_frames - cfg.future_steps
    per = train_frames - cfg.input_len - cfg.unroll + 1
    if per < 1:
        raise DataError(f"trajectories of {n_frames} frames leave no training windows "
                        f"(input_len={cfg.input_len}, unroll={cfg.unroll}, future={cfg.future_steps})")
    n_val = int(math.ceil(cfg.val_frac * per)) if cfg.val_frac > 0 else 0
    if n_val >= per:
        n_val = per - 1
    tr, va = [], []
    for i in train_traj:
        for s in range(per):
            (va if s >= per - n_val else tr).append((i, s))
    return Split(np.array(tr, dtype=int).reshape(-1, 2), np.array(va, dtype=int).reshape(-1, 2),
                 train_traj, test, train_frames)


def dataset_split(ds, cfg: TrainConfig) -> Split:
    """:func:`make_split` for a dataset; ``cfg.holdout`` picks whole sources or single trajectories."""
    arr = ds if isinstance(ds, np.ndarray) else np.asarray(getattr(ds, "data", ds))
    groups = getattr(ds, "sources", None) if cfg.holdout == "source" else None
    return make_split(arr.shape[0], arr.shape[1], cfg, groups)


def orbit_units(windows: np.ndarray, sources) -> list[np.ndarray]:
    """Group windows by ``(source, start)``: each unit holds every rotated copy of one window."""
    if sources is None:
        return [w[None] for w in windows]
    sources = np.asarray(sources)
    units: dict[tuple[int, int], list] = {}
    for i, s in windows:
        units.setdefault((int(sources[i]), int(s)), []).append((i, s))
    return [np.array(units[key], dtype=int) for key in sorted(units)]


def gather(data: np.ndarray, windows: np.ndarray, input_len: int, target_len: int, dtype=None):
    """Stack windows into ``(B, input_len*C, H, W)`` inputs and ``(B, T, C, H, W)`` targets."""
    c, h, w = data.shape[2:]
    seg = np.stack([data[i, s:s + input_len + target_len] for i, s in windows])
    inputs = seg[:, :input_len].reshape(len(windows), input_len * c, h, w)
    targets = seg[:, input_len:]
    if dtype is not None:
        inputs, targets = inputs.astype(dtype, copy=False), targets.astype(dtype, copy=False)
    return inputs, targets


def _eval_loss(model, data, windows, cfg, chunk=64):
    if len(windows) == 0:
        return float("nan")
    total = 0.0
    for a in range(0, len(windows), chunk):
        w = windows[a:a + chunk]
        x, y = gather(data, w, cfg.input_len, cfg.unroll, model.dtype)
        total += prediction_loss(model, x, y, need_grad=False)[0] * len(w)
    return total / len(windows)


# ---------------------------------------------------------------------- train


@dataclass
class TrainResult:
    model: Model
    state: TrainState
    history: list[dict]
    split: Split
    best_epoch: int
    stopped_early: bool


def _frozen_names(model: Model, patterns) -> set[str]:
    out = set()
    for key in model.params:
        name = key.split(".", 1)[1]
        if any(p == key or p == name for p in patterns):
            out.add(key)
    return out


def train(model: Model, data, cfg: TrainConfig, split: Split | None = None) -> TrainResult:
    """Shuffled mini-batch Adam with early stopping on validation loss.

    With ``orbit_batches`` and a dataset carrying source labels, a batch is made
    of whole orbits: every rotated copy of a window travels together, so a
    symmetric model on symmetric data receives a symmetric gradient.
    ``data`` is a :class:`~relaxconv.datagen.TrajectoryDataset` or an array
    ``(N, T, C, H, W)``.
    """
    from .evaluation import model_ee

    arr = data if isinstance(data, np.ndarray) else np.asarray(getattr(data, "data", data))
    if arr.ndim != 5:
        raise ShapeError(f"training data must be (N, T, C, H, W), got {arr.shape}")
    if cfg.input_len != model.spec.input_len:
        raise ConfigError(f"train input_len {cfg.input_len} != model input_len {model.spec.input_len}")
    split = split if split is not None else dataset_split(data, cfg)
    rng = np.random.default_rng(cfg.seed)
    units = orbit_units(split.train, getattr(data, "sources", None) if cfg.orbit_batches else None)
    per_batch = max(1, cfg.batch_size // max(len(units[0]), 1)) if units else 1
    state = TrainState.create(model.params, cfg.seed)
    total = cfg.epochs * math.ceil(len(units) / per_batch)
    if cfg.max_steps is not None:
        total = min(total, cfg.max_steps)
    frozen = _frozen_names(model, cfg.frozen)
    best = (math.inf, -1, None)
    bad_epochs = 0
    stopped = False
    probes = None
    if cfg.record_ee and len(split.val):
        probes = gather(arr, split.val[:cfg.ee_probes], cfg.input_len, 1, model.dtype)[0]

    for epoch in range(cfg.epochs):
        order = rng.permutation(len(units))
        losses = []
        for a in range(0, len(order), per_batch):
            if cfg.max_steps is not None and state.step >= cfg.max_steps:
                break
            wins = np.concatenate([units[j] for j in order[a:a + per_batch]])
            batch = gather(arr, wins, cfg.input_len, cfg.unroll, model.dtype)
            value, grads, _ = loss(model, batch, cfg.alpha, cfg.unroll)
            if not math.isfinite(value):
                raise DivergenceError(f"loss became non-finite at step {state.step} (epoch {epoch})",
                                      state.history)
            adam_step(state, grads, scheduled_lr(cfg, state.step, total), frozen)
            losses.append(value)
        if not losses:
            break
        val = _eval_loss(model, arr, split.val, cfg)
        if not math.isfinite(val) and len(split.val):
            raise DivergenceError(f"validation loss became non-finite at epoch {epoch}", state.history)
        row = {"epoch": epoch, "train_loss": float(np.mean(losses)), "val_loss": val,
               "reg_value": model.variation(),
               "model_ee": model_ee(model, probes).ee if probes is not None else float("nan")}
        state.history.append(row)
        log.info("epoch %d train %.4g val %.4g", epoch, row["train_loss"], val)
        score = val if len(split.val) else row["train_loss"]
        if score < best[0]:
            best = (score, epoch, {k: p.copy() for k, p in model.params.items()})
            bad_epochs = 0
        else:
            bad_epochs += 1
            if bad_epochs >= cfg.patience:
                stopped = True
                break
        if cfg.max_steps is not None and state.step >= cfg.max_steps:
            break
    if cfg.restore_best and best[2] is not None:
        for k, p in best[2].items():
            model.set_param(k, p)
    return TrainResult(model, state, state.history, split, best[1], stopped)


def write_metrics_csv(path, history: list[dict]) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=METRIC_COLUMNS)
        w.writeheader()
        for row in history:
            w.writerow({k: row[k] for k in METRIC_COLUMNS})


def read_metrics_csv(path) -> list[dict]:
    with open(path, newline="") as fh:
        rows = list(csv.DictReader(fh))
    return [{k: (int(v) if k == "epoch" else float(v)) for k, v in r.items()} for r in rows]

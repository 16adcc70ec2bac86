"""Experiment configuration: JSON documents validated before any work starts."""

from __future__ import annotations

import copy
import json
from dataclasses import dataclass, field, fields
from pathlib import Path

import jsonschema

from .datagen import SimConfig
from .errors import ConfigError
from .model import KINDS, ModelSpec, build_spec
from .regularizers import ALPHA_GRID
from .training import TrainConfig

DELTA_GRID = tuple(round(0.05 * i, 2) for i in range(10))

_num = {"type": "number"}
_int = {"type": "integer"}
_bool = {"type": "boolean"}


def _section(props: dict) -> dict:
    return {"type": "object", "properties": props, "additionalProperties": False}


SCHEMA = {
    "type": "object",
    "additionalProperties": False,
    "properties": {
        "seed": {"type": "integer", "minimum": 0},
        "data": _section({
            "kind": {"enum": ["heat", "rotsmoke"]}, "size": _int, "steps": _int,
            "dt": {"type": ["number", "null"]}, "delta": _num, "seed": _int, "sources": _int,
            "substeps": _int, "kappa0": _num, "buoyancy": _num, "drag": _num,
            "inflow_rate": _num, "inflow_steps": _int,
        }),
        "model": _section({
            "kind": {"enum": list(KINDS)}, "hidden": _int, "depth": _int, "k": _int,
            "banks": _int, "rank": _int, "n_angles": {"type": ["integer", "null"]},
            "combo_prefix": _int, "residual": _bool, "dtype": {"enum": ["float32", "float64"]},
            "input_len": _int, "group_order": _int,
        }),
        "train": _section({
            "lr": _num, "batch_size": _int, "epochs": _int,
            "max_steps": {"type": ["integer", "null"]}, "unroll": _int, "alpha": _num,
            "patience": _int, "val_frac": _num, "test_domain_frac": _num, "future_steps": _int,
            "record_ee": _bool, "ee_probes": _int,
            "frozen": {"type": "array", "items": {"type": "string"}}, "restore_best": _bool,
            "orbit_batches": _bool, "holdout": {"enum": ["source", "trajectory"]},
            "lr_schedule": {"enum": ["constant", "cosine"]},
        }),
        "eval": _section({"probes": _int, "rollout_steps": _int}),
        "sweep": _section({
            "axis": {"enum": ["delta", "alpha"]},
            "values": {"type": ["array", "null"], "items": _num, "minItems": 1},
            "models": {"type": ["array", "null"], "items": {"enum": list(KINDS)}, "minItems": 1},
        }),
    },
}


@dataclass
class ModelConfig:
    kind: str = "rsteer"
    hidden: int = 16
    depth: int = 3
    k: int = 1
    banks: int = 3
    rank: int = 1
    n_angles: int | None = None
    combo_prefix: int = 1
    residual: bool = True
    dtype: str = "float64"
    input_len: int = 10
    group_order: int = 4

    def spec(self, data_kind: str, size: int) -> ModelSpec:
        frame = ["trivial"] if data_kind == "heat" else ["trivial", "irrep1"]
        return build_spec(self.kind, frame, input_len=self.input_len, hidden=self.hidden,
                          depth=self.depth, k=self.k, banks=self.banks, rank=self.rank,
                          n_angles=self.n_angles, grid=(size, size), group_order=self.group_order,
                          combo_prefix=self.combo_prefix, residual=self.residual, dtype=self.dtype)


@dataclass
class EvalConfig:
    probes: int = 100
    rollout_steps: int = 20


@dataclass
class SweepConfig:
    axis: str = "delta"
    values: list[float] | None = None
    models: list[str] | None = None

    def grid(self) -> list[float]:
        if self.values is not None:
            return sorted(float(v) for v in self.values)
        return list(DELTA_GRID) if self.axis == "delta" else sorted(ALPHA_GRID)


@dataclass
class ExperimentConfig:
    seed: int = 0
    data: SimConfig = field(default_factory=SimConfig)
    model: ModelConfig = field(default_factory=ModelConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    eval: EvalConfig = field(default_factory=EvalConfig)
    sweep: SweepConfig | None = None

    def model_spec(self) -> ModelSpec:
        return self.model.spec(self.data.kind, self.data.size)

    def to_dict(self) -> dict:
        out = {"seed": self.seed}
        for name in ("data", "model", "train", "eval", "sweep"):
            sec = getattr(self, name)
            if sec is None:
                continue
            d = {f.name: copy.deepcopy(getattr(sec, f.name)) for f in fields(sec)}
            if name == "train":
                d.pop("input_len")
                d.pop("seed")
            out[name] = d
        return out

    def with_overrides(self, seed=None, alpha=None, delta=None) -> "ExperimentConfig":
        d = self.to_dict()
        if seed is not None:
            d["seed"] = int(seed)
            d["data"].pop("seed", None)
        if alpha is not None:
            d["train"]["alpha"] = float(alpha)
        if delta is not None:
            d["data"]["delta"] = float(delta)
        return ExperimentConfig.from_dict(d)


def validate(doc) -> None:
    try:
        jsonschema.validate(doc, SCHEMA)
    except jsonschema.ValidationError as exc:
        where = "/".join(str(p) for p in exc.absolute_path) or "<root>"
        raise ConfigError(f"invalid config at {where}: {exc.message}") from None


def from_dict(doc: dict) -> ExperimentConfig:
    validate(doc)
    seed = int(doc.get("seed", 0))
    try:
        data_doc = dict(doc.get("data", {}))
        data_doc.setdefault("seed", seed)
        model = ModelConfig(**doc.get("model", {}))
        train_doc = dict(doc.get("train", {}))
        train = TrainConfig(input_len=model.input_len, seed=seed, **train_doc)
        sweep = SweepConfig(**doc["sweep"]) if "sweep" in doc else None
        cfg = ExperimentConfig(seed, SimConfig(**data_doc), model, train,
                               EvalConfig(**doc.get("eval", {})), sweep)
    except TypeError as exc:
        raise ConfigError(str(exc)) from None
    if cfg.eval.probes < 1 or cfg.eval.rollout_steps < 1:
        raise ConfigError("eval.probes and eval.rollout_steps must be >= 1")
    return cfg


ExperimentConfig.from_dict = staticmethod(from_dict)


def load_config(path) -> ExperimentConfig:
    try:
        doc = json.loads(Path(path).read_text())
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{path}: not valid JSON ({exc})") from None
    return from_dict(doc)

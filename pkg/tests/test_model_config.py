import json

import numpy as np
import pytest

from relaxconv.config import DELTA_GRID, ExperimentConfig, SweepConfig, from_dict, load_config
from relaxconv.errors import CheckpointMismatch, ConfigError
from relaxconv.evaluation import model_ee
from relaxconv.model import KINDS, MAX_PARAMS, LayerSpec, Model, ModelSpec, build_spec

FRAME = ["trivial", "irrep1"]


@pytest.mark.parametrize("kind", KINDS)
def test_every_kind_builds_and_predicts_one_frame(kind):
    m = Model(build_spec(kind, FRAME, input_len=2, hidden=1, depth=3, k=1, grid=(8, 8)), seed=0)
    x = np.random.default_rng(0).standard_normal((2, 6, 8, 8))
    assert m(x).shape == (2, 3, 8, 8)
    assert sum(layer.family == "relu" for layer in m.layers) == len(m.spec.layers) - 1


@pytest.mark.parametrize("kind", ["steer", "gconv", "rsteer", "rgconv", "rsteer_angular"])
def test_equivariant_at_initialisation(kind):
    m = Model(build_spec(kind, FRAME, input_len=2, hidden=2, depth=3, k=1), seed=1)
    probes = np.random.default_rng(1).standard_normal((4, 6, 12, 12))
    assert model_ee(m, probes).ee <= 1e-10


def test_combo_layout():
    spec = build_spec("combo", FRAME, input_len=2, hidden=2, depth=3, combo_prefix=1)
    assert spec.combo and [ls.family for ls in spec.layers] == ["conv", "steer", "steer"]
    with pytest.raises(ConfigError):
        build_spec("combo", FRAME, depth=2, combo_prefix=2)


def test_incompatible_layers_rejected():
    spec = ModelSpec([LayerSpec("steer", ["trivial"], ["irrep1"], k=1),
                      LayerSpec("steer", ["regular"], ["trivial"], k=1)], ["trivial"], input_len=1)
    with pytest.raises(ConfigError):
        Model(spec)
    with pytest.raises(ConfigError):
        LayerSpec("attention", ["trivial"], ["trivial"])
    with pytest.raises(ConfigError):
        build_spec("lowrank", FRAME)


def test_parameter_cap():
    with pytest.raises(ConfigError, match="cap"):
        Model(build_spec("conv", FRAME, input_len=10, hidden=200, depth=3, k=2))
    assert MAX_PARAMS == 1_000_000


def test_checkpoint_roundtrip(tmp_path):
    m = Model(build_spec("lowrank", FRAME, input_len=2, hidden=1, depth=2, rank=2, grid=(6, 6)), seed=2)
    for p in m.params.values():
        p += np.random.default_rng(0).standard_normal(p.shape)
    m.save(tmp_path / "ck")
    back = Model.load(tmp_path / "ck")
    for k, p in m.params.items():
        assert back.params[k].tobytes() == p.tobytes()
    x = np.random.default_rng(1).standard_normal((1, 6, 6, 6))
    np.testing.assert_array_equal(back(x), m(x))
    manifest = json.loads((tmp_path / "ck" / "manifest.json").read_text())
    assert manifest["layers"][0] == "lowrank"


def test_checkpoint_mismatch(tmp_path):
    m = Model(build_spec("steer", FRAME, input_len=2, hidden=1, depth=2), seed=0)
    m.save(tmp_path / "ck")
    with pytest.raises(CheckpointMismatch):
        Model.load(tmp_path / "ck", build_spec("steer", FRAME, input_len=2, hidden=2, depth=2))
    manifest = json.loads((tmp_path / "ck" / "manifest.json").read_text())
    manifest["params"][0]["name"] = "9.bogus"
    (tmp_path / "ck" / "manifest.json").write_text(json.dumps(manifest))
    with pytest.raises(CheckpointMismatch):
        Model.load(tmp_path / "ck")


def test_config_defaults_and_roundtrip(tmp_path):
    cfg = ExperimentConfig()
    again = from_dict(cfg.to_dict())
    assert again.to_dict() == cfg.to_dict()
    assert cfg.train.lr == 1e-3 and cfg.train.batch_size == 16 and cfg.train.unroll == 4
    assert cfg.model.banks == 3 and cfg.data.size == 32
    path = tmp_path / "c.json"
    path.write_text(json.dumps({"seed": 3, "data": {"delta": 0.2}}))
    c = load_config(path)
    assert c.data.seed == 3 and c.train.seed == 3 and c.data.delta == 0.2


@pytest.mark.parametrize("doc", [
    {"unknown": 1},
    {"train": {"lr": "fast"}},
    {"model": {"kind": "transformer"}},
    {"data": {"size": 31}},
    {"eval": {"probes": 0}},
    {"sweep": {"axis": "depth"}},
])
def test_config_rejects(doc):
    with pytest.raises(ConfigError):
        from_dict(doc)


def test_overrides():
    cfg = from_dict({"seed": 1, "data": {"seed": 9}})
    o = cfg.with_overrides(seed=5, alpha=0.01, delta=0.3)
    assert o.seed == 5 and o.data.seed == 5 and o.train.alpha == 0.01 and o.data.delta == 0.3
    assert cfg.with_overrides().data.seed == 9


def test_sweep_grids():
    assert SweepConfig("delta").grid() == list(DELTA_GRID) and len(DELTA_GRID) == 10
    assert SweepConfig("alpha").grid() == [0.0, 1e-6, 1e-4, 1e-2]
    assert SweepConfig("delta", values=[0.3, 0.1]).grid() == [0.1, 0.3]

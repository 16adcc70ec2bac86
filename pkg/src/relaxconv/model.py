"""Layer stacks: specification, construction, forward/backward and checkpoints."""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from .errors import CheckpointMismatch, ConfigError, ShapeError
from .groups import CyclicGroup, Representation
from .layers import (ConvLayer, GroupConvLayer, LocallyConnectedLayer, LowRankTranslationLayer,
                     ReLU, RelaxedGroupConvLayer, RelaxedSteerableConvLayer, SteerableConvLayer)
from .lifting import LiftLayer

MAX_PARAMS = 1_000_000
FAMILIES = ("conv", "steer", "rsteer", "rsteer_angular", "lowrank", "gconv", "rgconv", "lift", "lc")
KINDS = ("conv", "steer", "rsteer", "rsteer_angular", "lowrank", "gconv", "rgconv", "combo", "clcnn")


@dataclass
class LayerSpec:
    family: str
    rep_in: list[str]
    rep_out: list[str]
    group_order: int = 4
    k: int = 1
    banks: int = 3
    rank: int = 1
    n_angles: int | None = None
    grid: list[int] | None = None

    def __post_init__(self):
        if self.family not in FAMILIES:
            raise ConfigError(f"unknown layer family {self.family!r}")


@dataclass
class ModelSpec:
    """Ordered layers with ReLU between consecutive ones (none after the last).

    ``residual`` adds the most recent input frame to the output.  ``combo``
    marks models whose leading plain convolutions feed equivariant layers.
    """

    layers: list[LayerSpec]
    frame_rep: list[str]
    input_len: int = 10
    group_order: int = 4
    residual: bool = True
    combo: bool = False
    dtype: str = "float64"
    kind: str = "custom"

    def to_dict(self):
        return asdict(self)

    @classmethod
    def from_dict(cls, d) -> "ModelSpec":
        d = dict(d)
        d["layers"] = [LayerSpec(**ls) for ls in d["layers"]]
        return cls(**d)

    @property
    def group(self) -> CyclicGroup:
        return CyclicGroup(self.group_order)

    def frame(self) -> Representation:
        return Representation.from_names(self.group, self.frame_rep)

    def rep_in(self) -> Representation:
        return self.frame() * self.input_len


def build_spec(kind: str, frame_rep: list[str], input_len: int = 10, hidden: int = 8,
               depth: int = 3, k: int = 1, banks: int = 3, rank: int = 1,
               n_angles: int | None = None, grid=None, group_order: int = 4,
               combo_prefix: int = 1, residual: bool = True, dtype: str = "float64") -> ModelSpec:
    """Standard architectures; ``hidden`` counts regular fields (``hidden * n`` channels)."""
    if kind not in KINDS:
        raise ConfigError(f"unknown model kind {kind!r}")
    if depth < 1:
        raise ConfigError("depth must be >= 1")
    n = group_order
    g = CyclicGroup(n)
    frame = Representation.from_names(g, frame_rep)
    rin = (frame * input_len).names()
    hid = ["regular"] * hidden
    out = frame.names()
    grid = list(grid) if grid is not None else None
    layers: list[LayerSpec] = []

    if kind == "conv":
        c1 = ["trivial"]
        dims = [frame.dim * input_len] + [hidden * n] * (depth - 1) + [frame.dim]
        for i in range(depth):
            layers.append(LayerSpec("conv", c1 * dims[i], c1 * dims[i + 1], group_order=1, k=k))
    elif kind in ("steer", "rsteer", "rsteer_angular", "lowrank", "clcnn"):
        family = {"clcnn": "lc"}.get(kind, kind)
        kw = {"n_angles": n_angles} if kind == "rsteer_angular" else {}
        if kind in ("lowrank", "clcnn"):
            if grid is None:
                raise ConfigError(f"{kind} models need a grid size")
            kw["grid"] = grid
        if kind == "lowrank":
            kw["rank"] = rank
        reps = [rin] + [hid] * (depth - 1) + [out]
        for i in range(depth):
            layers.append(LayerSpec(family, reps[i], reps[i + 1], group_order=n, k=k, **kw))
    elif kind in ("gconv", "rgconv"):
        atoms = len(frame.atoms()) * input_len
        layers.append(LayerSpec("lift", rin, ["regular"] * atoms, group_order=n))
        reps = [["regular"] * atoms] + [hid] * (depth - 1)
        for i in range(depth - 1):
            layers.append(LayerSpec(kind, reps[i], reps[i + 1], group_order=n, k=k, banks=banks))
        layers.append(LayerSpec("steer", reps[depth - 1], out, group_order=n, k=k))
    elif kind == "combo":
        if not 1 <= combo_prefix < depth:
            raise ConfigError("combo needs 1 <= combo_prefix < depth")
        c1 = ["trivial"]
        dims = [frame.dim * input_len] + [hidden * n] * combo_prefix
        for i in range(combo_prefix):
            layers.append(LayerSpec("conv", c1 * dims[i], c1 * dims[i + 1], group_order=1, k=k))
        reps = [hid] * (depth - combo_prefix) + [out]
        for i in range(depth - combo_prefix):
            layers.append(LayerSpec("steer", reps[i], reps[i + 1], group_order=n, k=k))
    return ModelSpec(layers, list(frame_rep), input_len, group_order, residual,
                     combo=kind == "combo", dtype=dtype, kind=kind)


def _make_layer(ls: LayerSpec, rng, dtype):
    g = CyclicGroup(ls.group_order)
    rin = Representation.from_names(g, ls.rep_in)
    rout = Representation.from_names(g, ls.rep_out)
    f = ls.family
    if f == "conv":
        return ConvLayer(rin.dim, rout.dim, ls.k, rng=rng, dtype=dtype)
    if f == "lift":
        layer = LiftLayer(rin, dtype=dtype)
        if layer.rep_out.dim != rout.dim:
            raise ConfigError("lift output does not match the declared representation")
        return layer
    if f in ("gconv", "rgconv"):
        if not (rin.is_permutation() and all(a.kind == "regular" for a in rin.atoms() + rout.atoms())):
            raise ConfigError("group convolutions act on regular fields only")
        m_in, m_out = len(rin.atoms()), len(rout.atoms())
        if f == "gconv":
            return GroupConvLayer(g, m_in, m_out, ls.k, rng=rng, dtype=dtype)
        return RelaxedGroupConvLayer(g, m_in, m_out, ls.k, banks=ls.banks, rng=rng, dtype=dtype)
    if f == "steer":
        return SteerableConvLayer(rin, rout, ls.k, rng=rng, dtype=dtype)
    if f in ("rsteer", "rsteer_angular"):
        return RelaxedSteerableConvLayer(rin, rout, ls.k, angular=f == "rsteer_angular",
                                         n_angles=ls.n_angles, rng=rng, dtype=dtype)
    if f == "lowrank":
        return LowRankTranslationLayer(rin, rout, ls.k, tuple(ls.grid), rank=ls.rank, rng=rng,
                                       dtype=dtype)
    if f == "lc":
        return LocallyConnectedLayer(rin, rout, ls.k, tuple(ls.grid), rng=rng, dtype=dtype)
    raise ConfigError(f"unknown layer family {f!r}")


class Model:
    """A stack of layers mapping stacked input frames to the next frame."""

    def __init__(self, spec: ModelSpec, seed: int = 0):
        self.spec = spec
        self.dtype = np.dtype(spec.dtype)
        rng = np.random.default_rng(seed)
        self.layers = []
        prev = None
        for i, ls in enumerate(spec.layers):
            layer = _make_layer(ls, rng, self.dtype)
            if prev is not None:
                if prev.rep_out.dim != layer.rep_in.dim:
                    raise ConfigError(f"layer {i} expects {layer.rep_in.dim} channels, "
                                      f"previous layer gives {prev.rep_out.dim}")
                if (prev.rep_out.group == layer.rep_in.group
                        and prev.rep_out.names() != layer.rep_in.names()):
                    raise ConfigError(f"layer {i} input representation does not match layer {i - 1}")
                self.layers.append(ReLU(prev.rep_out))
            self.layers.append(layer)
            prev = layer
        self.rep_in = spec.rep_in()
        self.rep_out = spec.frame()
        if self.layers[0].rep_in.dim != self.rep_in.dim:
            raise ConfigError("first layer does not accept the stacked input frames")
        if self.layers[-1].rep_out.dim != self.rep_out.dim:
            raise ConfigError("last layer does not produce one frame")
        if self.num_params() > MAX_PARAMS:
            raise ConfigError(f"model has {self.num_params()} parameters, cap is {MAX_PARAMS}")

    # parameters are exposed as a flat view keyed by "<layer index>.<name>"
    @property
    def params(self) -> dict[str, np.ndarray]:
        out = {}
        for i, layer in enumerate(self.layers):
            for name, p in layer.params.items():
                out[f"{i}.{name}"] = p
        return out

    def set_param(self, key: str, value: np.ndarray):
        i, name = key.split(".", 1)
        layer = self.layers[int(i)]
        if layer.params[name].shape != value.shape:
            raise ShapeError(f"{key}: shape {value.shape} != {layer.params[name].shape}")
        layer.params[name][...] = value

    def num_params(self) -> int:
        return int(sum(p.size for p in self.params.values()))

    def forward(self, x: np.ndarray):
        x = np.asarray(x, dtype=self.dtype)
        caches = []
        h = x
        for layer in self.layers:
            h, c = layer.forward(h)
            caches.append(c)
        if self.spec.residual:
            h = h + x[:, -self.rep_out.dim:]
        return h, caches

    def backward(self, caches, dy):
        grads = {}
        d = dy
        for i in range(len(self.layers) - 1, -1, -1):
            d, g = self.layers[i].backward(caches[i], d)
            for name, v in g.items():
                grads[f"{i}.{name}"] = v
        if self.spec.residual:
            d = d.copy()
            d[:, -self.rep_out.dim:] += dy
        return d, grads

    def __call__(self, x):
        return self.forward(x)[0]

    def regularizer(self, alpha: float):
        value, grads = 0.0, {}
        for i, layer in enumerate(self.layers):
            v, g = layer.regularizer(alpha)
            value += v
            for name, arr in g.items():
                grads[f"{i}.{name}"] = arr
        return value, grads

    def variation(self) -> float:
        return self.regularizer(1.0)[0]

    # ------------------------------------------------------------ checkpoints

    def save(self, directory) -> None:
        from .tensorio import write_tensor

        directory = Path(directory)
        (directory / "params").mkdir(parents=True, exist_ok=True)
        entries = []
        for j, (key, p) in enumerate(self.params.items()):
            fname = f"params/p{j:03d}.aeqv"
            write_tensor(directory / fname, p)
            entries.append({"name": key, "shape": list(p.shape), "file": fname,
                            "layer": self.layers[int(key.split('.')[0])].family})
        manifest = {"spec": self.spec.to_dict(), "params": entries,
                    "layers": [layer.family for layer in self.layers]}
        (directory / "manifest.json").write_text(json.dumps(manifest, indent=2))

    @classmethod
    def load(cls, directory, spec: ModelSpec | None = None) -> "Model":
        from .tensorio import read_tensor

        directory = Path(directory)
        manifest = json.loads((directory / "manifest.json").read_text())
        saved = ModelSpec.from_dict(manifest["spec"])
        if spec is not None and spec.to_dict() != saved.to_dict():
            raise CheckpointMismatch("checkpoint was written for a different model specification")
        model = cls(spec or saved)
        params = model.params
        names = [e["name"] for e in manifest["params"]]
        if sorted(names) != sorted(params):
            raise CheckpointMismatch("checkpoint parameter names do not match the model")
        for e in manifest["params"]:
            arr = read_tensor(directory / e["file"])
            if arr.shape != params[e["name"]].shape:
                raise CheckpointMismatch(f"{e['name']}: shape {arr.shape} != {params[e['name']].shape}")
            model.set_param(e["name"], arr.astype(model.dtype))
        return model

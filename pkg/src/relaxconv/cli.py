"""Command-line entry point: ``relaxconv {gen-data,train,ee,sweep,verify}``.

Exit codes: 0 ok, 1 verification failure, 2 invalid config, 3 I/O error,
4 divergence, 5 checkpoint mismatch, 6 partial sweep failure.
"""

from __future__ import annotations

import argparse
import csv
import json
import logging
import math
import os
import sys
from concurrent.futures import ProcessPoolExecutor
from pathlib import Path

import numpy as np

from .config import ExperimentConfig, load_config
from .datagen import generate, load_dataset, save_dataset
from .errors import CheckpointMismatch, ConfigError, DataError, DivergenceError, RelaxConvError
from .evaluation import model_ee, test_domain_rmse, test_future_rmse, write_ee_curve
from .model import Model
from .training import dataset_split, gather, train, write_metrics_csv

EXIT_OK, EXIT_VERIFY, EXIT_CONFIG, EXIT_IO, EXIT_DIVERGENCE, EXIT_CHECKPOINT, EXIT_PARTIAL = 0, 1, 2, 3, 4, 5, 6
SWEEP_COLUMNS = ("axis", "value", "model_kind", "seed", "status", "data_ee", "model_ee",
                 "val_rmse", "test_domain_rmse", "test_future_rmse", "variation", "error")

log = logging.getLogger("relaxconv")


def _config(args) -> ExperimentConfig:
    cfg = load_config(args.config) if args.config else ExperimentConfig()
    return cfg.with_overrides(seed=args.seed, alpha=getattr(args, "alpha", None),
                              delta=getattr(args, "delta", None))


def _probes(model: Model, ds, split, count: int) -> np.ndarray:
    """Test-set windows: every start of the held-out trajectories, then training ones."""
    L = model.spec.input_len
    traj = list(split.test_domain) + list(split.train_traj)
    wins = [(i, s) for i in traj for s in range(ds.data.shape[1] - L)]
    return gather(ds.data, np.array(wins[:count], dtype=int), L, 0, model.dtype)[0]


def run_experiment(cfg: ExperimentConfig, ds=None, out_dir=None) -> dict:
    """Train one model and evaluate it; optionally write checkpoint and metrics."""
    ds = ds if ds is not None else generate(cfg.data)
    model = Model(cfg.model_spec(), seed=cfg.seed)
    try:
        result = train(model, ds, cfg.train)
    except DivergenceError as exc:
        if out_dir is not None:
            Path(out_dir).mkdir(parents=True, exist_ok=True)
            write_metrics_csv(Path(out_dir) / "metrics.csv", exc.history)
        raise
    split = result.split
    steps = min(cfg.eval.rollout_steps, cfg.train.future_steps)
    probes = _probes(model, ds, split, cfg.eval.probes)
    report = model_ee(model, probes)
    summary = {
        "model_kind": cfg.model.kind,
        "seed": cfg.seed,
        "data_ee": ds.declared_data_ee,
        "model_ee": report.ee,
        "val_rmse": math.sqrt(min(h["val_loss"] for h in result.history)) if result.history else float("nan"),
        "test_domain_rmse": test_domain_rmse(model, ds, split, steps) if len(split.test_domain) else float("nan"),
        "test_future_rmse": test_future_rmse(model, ds, split, steps),
        "variation": model.variation(),
        "steps": result.state.step,
        "best_epoch": result.best_epoch,
        "split": split.to_dict(),
    }
    if out_dir is not None:
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        model.save(out / "checkpoint")
        write_metrics_csv(out / "metrics.csv", result.history)
        (out / "config.json").write_text(json.dumps(cfg.to_dict(), indent=2))
        (out / "result.json").write_text(json.dumps(summary, indent=2))
        (out / "ee.json").write_text(report.to_json())
    return summary


# -------------------------------------------------------------------- commands


def cmd_gen_data(args) -> int:
    cfg = _config(args)
    out = Path(args.out)
    if cfg.sweep is not None and cfg.sweep.axis == "delta" and args.delta is None:
        rows = []
        for d in cfg.sweep.grid():
            ds = generate(cfg.with_overrides(delta=d).data)
            save_dataset(ds, out / f"delta_{d:.4f}")
            rows.append((d, ds.declared_data_ee))
            print(f"delta={d:.4f} data_ee={ds.declared_data_ee:.6g}")
        with open(out / "datasets.csv", "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["delta", "data_ee", "directory"])
            for d, ee in rows:
                w.writerow([d, ee, f"delta_{d:.4f}"])
    else:
        ds = generate(cfg.data)
        save_dataset(ds, out)
        print(f"delta={cfg.data.delta:.4f} data_ee={ds.declared_data_ee:.6g}")
    return EXIT_OK


def cmd_train(args) -> int:
    cfg = _config(args)
    ds = load_dataset(args.data) if args.data else None
    print(f"training {cfg.model.kind} seed={cfg.seed} alpha={cfg.train.alpha:g} delta={cfg.data.delta:g}")
    summary = run_experiment(cfg, ds, args.out)
    print(f"final val RMSE {summary['val_rmse']:.6g}")
    print(f"test-domain RMSE {summary['test_domain_rmse']:.6g}  model EE {summary['model_ee']:.3g}")
    return EXIT_OK


def cmd_ee(args) -> int:
    cfg = _config(args)
    model = Model.load(args.checkpoint, cfg.model_spec() if args.config else None)
    ds = load_dataset(args.data)
    split = dataset_split(ds, cfg.train)
    report = model_ee(model, _probes(model, ds, split, cfg.eval.probes))
    text = report.to_json()
    if args.out:
        Path(args.out).write_text(text)
    print(text)
    return EXIT_OK


def _sweep_point(payload):
    doc, axis, value, kind, seed = payload
    cfg = ExperimentConfig.from_dict(doc)
    d = cfg.to_dict()
    d.pop("sweep", None)
    d["model"]["kind"] = kind
    row = {"axis": axis, "value": value, "model_kind": kind, "seed": seed}
    try:
        cfg = ExperimentConfig.from_dict(d).with_overrides(
            alpha=value if axis == "alpha" else None, delta=value if axis == "delta" else None)
        cfg.seed = seed
        cfg.train.seed = seed
        s = run_experiment(cfg)
        row.update(status="ok", error="", **{k: s[k] for k in SWEEP_COLUMNS if k in s})
    except (RelaxConvError, FloatingPointError, ArithmeticError) as exc:
        row.update(status="failed", error=f"{type(exc).__name__}: {exc}")
    return row


def point_seeds(root: int, count: int) -> list[int]:
    """Per-point seeds derived deterministically from the root seed."""
    return [int(s.generate_state(1)[0]) for s in np.random.SeedSequence(root).spawn(count)]


def cmd_sweep(args) -> int:
    cfg = _config(args)
    sweep = cfg.sweep
    axis = args.axis or (sweep.axis if sweep else "delta")
    if sweep is None or sweep.axis != axis:
        from .config import SweepConfig
        sweep = SweepConfig(axis=axis, values=sweep.values if sweep and sweep.axis == axis else None,
                            models=sweep.models if sweep else None)
    values = sweep.grid()
    kinds = sweep.models or [cfg.model.kind]
    doc = cfg.to_dict()
    points = [(v, k) for v in values for k in kinds]
    seeds = point_seeds(cfg.seed, len(points))
    payloads = [(doc, axis, v, k, s) for (v, k), s in zip(points, seeds)]
    workers = max(1, int(os.environ.get("RELAXCONV_THREADS", "1") or 1))
    if workers > 1:
        with ProcessPoolExecutor(max_workers=min(workers, len(payloads))) as pool:
            rows = list(pool.map(_sweep_point, payloads))
    else:
        rows = [_sweep_point(p) for p in payloads]
    rows.sort(key=lambda r: (r["value"], kinds.index(r["model_kind"])))
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    with open(out / "sweep.csv", "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=SWEEP_COLUMNS, extrasaction="ignore")
        w.writeheader()
        for r in rows:
            w.writerow({k: r.get(k, "") for k in SWEEP_COLUMNS})
    if axis == "delta":
        write_ee_curve(out / "ee_curve", [dict(r, delta=r["value"]) for r in rows if r["status"] == "ok"])
    failed = [r for r in rows if r["status"] != "ok"]
    for r in rows:
        print(f"{axis}={r['value']:g} {r['model_kind']} {r['status']}"
              + (f" model_ee={r['model_ee']:.3g} test_rmse={r['test_domain_rmse']:.4g}" if r["status"] == "ok"
                 else f" {r['error']}"))
    return EXIT_PARTIAL if failed else EXIT_OK


def cmd_verify(args) -> int:
    from .verify import run_suite

    kw = {"seed": args.seed or 0} if args.suite != "basis" else {}
    if args.instances is not None and args.suite != "basis":
        kw["instances"] = args.instances
    results = run_suite(args.suite, **kw)
    for r in results:
        print(r.line())
    ok = all(r.passed for r in results)
    print(f"suite {args.suite}: {'PASS' if ok else 'FAIL'}")
    return EXIT_OK if ok else EXIT_VERIFY


# ---------------------------------------------------------------------- parser


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="relaxconv", description=__doc__.splitlines()[0])
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    def common(sp, out_required=True):
        sp.add_argument("--config", type=str, help="experiment JSON file")
        sp.add_argument("--seed", type=int, help="root seed override")
        sp.add_argument("--out", type=str, required=out_required, help="output directory")

    g = sub.add_parser("gen-data", help="generate a dataset (or one per delta of a sweep config)")
    common(g)
    g.add_argument("--delta", type=float)
    g.set_defaults(func=cmd_gen_data)

    t = sub.add_parser("train", help="train a model, write checkpoint and metrics.csv")
    common(t)
    t.add_argument("--data", type=str, help="dataset directory (generated from the config if omitted)")
    t.add_argument("--alpha", type=float)
    t.add_argument("--delta", type=float)
    t.set_defaults(func=cmd_train)

    e = sub.add_parser("ee", help="equivariance error of a checkpoint on a dataset")
    common(e, out_required=False)
    e.add_argument("--checkpoint", type=str, required=True)
    e.add_argument("--data", type=str, required=True)
    e.set_defaults(func=cmd_ee)

    s = sub.add_parser("sweep", help="train and evaluate over a delta or alpha grid")
    common(s)
    s.add_argument("--axis", choices=["delta", "alpha"])
    s.set_defaults(func=cmd_sweep)

    v = sub.add_parser("verify", help="run an invariant suite")
    v.add_argument("--suite", choices=["gradcheck", "basis", "props", "reductions"], required=True)
    v.add_argument("--seed", type=int)
    v.add_argument("--instances", type=int)
    v.set_defaults(func=cmd_verify)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except CheckpointMismatch as exc:
        print(f"error: checkpoint mismatch: {exc}", file=sys.stderr)
        return EXIT_CHECKPOINT
    except DivergenceError as exc:
        print(f"error: training diverged: {exc}", file=sys.stderr)
        return EXIT_DIVERGENCE
    except (ConfigError, DataError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except OSError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_IO


if __name__ == "__main__":
    sys.exit(main())

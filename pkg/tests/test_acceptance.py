"""End-to-end acceptance criteria, one test per criterion.

Each test prints a ``PASS``/``FAIL`` line straight to the terminal (outside
pytest's capture) before asserting.  The training criteria (3, 4, 5) take
several minutes each on one core; deselect them with ``-m "not slow"``.
"""

import time

import numpy as np
import pytest
from scipy.stats import spearmanr

from relaxconv.cli import run_experiment
from relaxconv.config import ALPHA_GRID, DELTA_GRID, from_dict
from relaxconv.datagen import SimConfig, generate
from relaxconv.evaluation import model_ee
from relaxconv.model import Model, build_spec
from relaxconv.verify import basis_suite, gradcheck_suite, props_suite, reductions_suite

FRAME = ["trivial", "irrep1"]

# rotsmoke data for the training criteria: five sources, each in all four
# rotations, with a short density pulse
DATA = {"kind": "rotsmoke", "size": 32, "steps": 60, "sources": 5, "seed": 0,
        "inflow_steps": 2, "inflow_rate": 0.75}
MODEL = {"hidden": 4, "depth": 2, "k": 1, "input_len": 2, "dtype": "float32"}
TRAIN = {"lr": 2e-3, "batch_size": 16, "epochs": 1000, "patience": 1000, "unroll": 4}


@pytest.fixture
def report(capsys):
    def emit(number, title, ok, detail, started):
        with capsys.disabled():
            print(f"\n[criterion {number}] {'PASS' if ok else 'FAIL'} {title}: {detail} "
                  f"({time.perf_counter() - started:.1f} s)")
    return emit


def experiment(kind, seed=0, data=None, train=None, model=None):
    doc = {"seed": seed,
           "data": dict(DATA, **(data or {})),
           "model": dict(MODEL, kind=kind, **(model or {})),
           "train": dict(TRAIN, **(train or {}))}
    return from_dict(doc)


def _suite_detail(results):
    return "; ".join(f"{r.name} {r.value:.3g}" for r in results)


# ---------------------------------------------------------------- criterion 1


def test_criterion_1_strict_model_ee(report):
    t0 = time.perf_counter()
    rng = np.random.default_rng(0)
    worst = {}
    for dtype, tol in (("float32", 1e-5), ("float64", 1e-10)):
        for depth in (1, 2, 3):
            # 16 regular fields at C4 = 64 hidden channels
            m = Model(build_spec("steer", FRAME, input_len=2, hidden=16, depth=depth, k=1,
                                 dtype=dtype), seed=depth)
            probes = rng.standard_normal((100, m.rep_in.dim, 32, 32)).astype(dtype)
            ee = model_ee(m, probes).ee
            worst[dtype] = max(worst.get(dtype, 0.0), ee)
    ok = worst["float32"] <= 1e-5 and worst["float64"] <= 1e-10
    report(1, "strict C4 steerable model EE", ok,
           f"worst EE float32 {worst['float32']:.3g} (<= 1e-5), float64 {worst['float64']:.3g} "
           f"(<= 1e-10), depth 1-3, 64 channels, 100 probes 32x32", t0)
    assert ok


# ---------------------------------------------------------------- criterion 2


def test_criterion_2_reductions(report):
    t0 = time.perf_counter()
    results = reductions_suite(200, seed=0, tol=1e-6)
    ok = len(results) == 3 and all(r.passed for r in results)
    report(2, "tied relaxed layers reduce to strict layers", ok, _suite_detail(results), t0)
    assert ok


# ---------------------------------------------------------------- criterion 6


def test_criterion_6_gradients(report):
    t0 = time.perf_counter()
    results = gradcheck_suite(20, seed=0, tol=1e-5)
    ok = all(r.passed for r in results)
    worst = max(results, key=lambda r: r.value)
    report(6, "finite-difference gradient checks", ok,
           f"{len(results)} checks x 20 instances, worst {worst.name} {worst.value:.3g} (<= 1e-5)", t0)
    assert ok


# ---------------------------------------------------------------- criterion 7


def test_criterion_7_basis(report):
    t0 = time.perf_counter()
    results = basis_suite(tol=1e-10)
    ok = all(r.passed for r in results)
    report(7, "steerable basis solver", ok, _suite_detail(results), t0)
    assert ok


# ---------------------------------------------------------------- criterion 8


def test_criterion_8_props(report):
    t0 = time.perf_counter()
    results = props_suite(1000, seed=0)
    ok = all(r.passed for r in results)
    report(8, "EE bounds on random function tables", ok,
           "; ".join(f"{r.name}: {r.instances - int(r.value)}/{r.instances} true" for r in results), t0)
    assert ok


# ---------------------------------------------------------------- criterion 9


def test_criterion_9_data_symmetry(report):
    t0 = time.perf_counter()
    details, ok = [], True
    for kind in ("heat", "rotsmoke"):
        ees = [generate(SimConfig(kind=kind, delta=d, seed=0)).declared_data_ee for d in DELTA_GRID]
        inc = all(b > a for a, b in zip(ees, ees[1:]))
        ok &= ees[0] <= 1e-12 and inc
        details.append(f"{kind} EE(0) {ees[0]:.2g}, EE(0.45) {ees[-1]:.3g}, strictly increasing {inc}")
    report(9, "generator data EE", ok, "; ".join(details), t0)
    assert ok


# ----------------------------------------------------- training criteria (slow)


@pytest.mark.slow
def test_criterion_3_model_ee_tracks_data_ee(report):
    # source holdout keeps every training orbit complete, so on symmetric data
    # the relaxed weights receive tied gradients and any learned EE comes from
    # the data's breaking
    t0 = time.perf_counter()
    relaxed = {"max_steps": 600, "holdout": "source"}
    strict = {"max_steps": 150, "holdout": "source"}
    data_ee, relaxed_ee, strict_ee = [], [], []
    for d in DELTA_GRID:
        cfg = experiment("rsteer", data={"delta": d}, train=relaxed)
        ds = generate(cfg.data)
        data_ee.append(ds.declared_data_ee)
        relaxed_ee.append(run_experiment(cfg, ds)["model_ee"])
        strict_ee.append(run_experiment(experiment("steer", data={"delta": d}, train=strict), ds)["model_ee"])
    rho = float(spearmanr(data_ee, relaxed_ee).statistic)
    ok = rho >= 0.8 and max(strict_ee) <= 1e-4
    pairs = ", ".join(f"{a:.2g}->{b:.2g}" for a, b in zip(data_ee, relaxed_ee))
    report(3, "relaxed model EE follows data EE", ok,
           f"Spearman {rho:.3f} (>= 0.8), worst strict EE {max(strict_ee):.3g} (<= 1e-4); "
           f"data EE -> rsteer EE: {pairs}", t0)
    assert ok


@pytest.mark.slow
def test_criterion_4_relaxed_beats_strict_and_conv(report):
    t0 = time.perf_counter()
    ds = generate(experiment("steer", data={"delta": 0.25}).data)
    train = {"max_steps": 1500, "holdout": "trajectory"}
    runs = {"rsteer_angular": {"alpha": 1e-5}, "steer": {}, "conv": {}}
    means = {}
    for kind, extra in runs.items():
        scores = [run_experiment(experiment(kind, seed=s, data={"delta": 0.25}, train=dict(train, **extra)),
                                 ds)["test_domain_rmse"] for s in range(3)]
        means[kind] = float(np.mean(scores))
    ok = means["rsteer_angular"] < means["steer"] and means["rsteer_angular"] < means["conv"]
    report(4, "relaxed steerable model has the lowest test-domain RMSE", ok,
           ", ".join(f"{k} {v:.5f}" for k, v in means.items()) + " (20-step rollout, mean of 3 seeds)", t0)
    assert ok


@pytest.mark.slow
def test_criterion_5_alpha_sweep(report):
    t0 = time.perf_counter()
    ds = generate(experiment("rsteer", data={"delta": 0.1}).data)
    # constant-rate Adam keeps sign-subgradient L1 terms oscillating at the step
    # size, so the variation only settles once the rate is annealed to zero;
    # the converged value is the final iterate, not the best-validation one
    train = {"max_steps": 1500, "holdout": "trajectory", "lr_schedule": "cosine",
             "restore_best": False}
    alphas = sorted(ALPHA_GRID)
    model = {"dtype": "float64"}
    rows = [run_experiment(experiment("rsteer", data={"delta": 0.1}, train=dict(train, alpha=a), model=model), ds)
            for a in alphas]
    var = [r["variation"] for r in rows]
    rmse = [r["test_domain_rmse"] for r in rows]
    monotone = all(b <= a for a, b in zip(var, var[1:]))
    helps = any(r <= rmse[0] for r in rmse[1:])
    ok = monotone and helps
    report(5, "alpha sweep", ok,
           ", ".join(f"alpha {a:g}: variation {v:.3g} RMSE {r:.5f}" for a, v, r in zip(alphas, var, rmse))
           + f"; monotone {monotone}, some alpha > 0 no worse {helps}", t0)
    assert ok

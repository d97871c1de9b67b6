"""Shared fixtures.

Heavy session-scoped fixtures (trained surrogates, the identification
round-trip, the end-to-end pipeline run) live here so the acceptance
suite and the module tests share one computation each.
"""

import pathlib
import time

import numpy as np
import pytest
import yaml

from tapesim import cli, identify, snode
from tapesim.core import (
    StrainSeries,
    celsius_to_kelvin,
    default_geometry,
    default_mechanical,
    dma_cycle,
    dma_stage_bounds,
    sample_cycle,
)
from tapesim.fem import MechConfig
from tapesim.synth import SyntheticTruth, crystallization_series, generate_synthetic

RELEASE_AMPLITUDE = 6e-4
RELEASE_TAU = 2500.0
CRYS_AMPLITUDE = 1e-3
CRYS_TAU = 900.0

TRUTH = SyntheticTruth(
    alpha_par=-0.2e-6, alpha_perp=26.97e-6,
    eta1=0.876e13, eta2=4.62e13, eta3=0.76e13,
    alpha_steel=17.4e-6,
)


def release_stage1_grid():
    """Time/temperature grid of the first DMA heating + soak."""
    cycle = dma_cycle(120.0, dt=60.0)
    times, temps = sample_cycle(cycle)
    bt, _ = cycle.breakpoints()
    mask = times <= bt[2]
    return times[mask], temps[mask]


@pytest.fixture(scope="session")
def release_task():
    """Release surrogate trained on a noisy saturating exponential.

    Noise sigma is 2% of the saturation amplitude, matching the synthetic
    data prescription of the neural-ODE acceptance criterion.
    """
    t, temps = release_stage1_grid()
    rng = np.random.default_rng(1)
    target = RELEASE_AMPLITUDE * (1.0 - np.exp(-t / RELEASE_TAU)) \
        + 0.02 * RELEASE_AMPLITUDE * rng.standard_normal(t.size)
    target[0] = 0.0
    eps_s = -0.2e-6 * (temps - temps[0])
    ds = snode.SeriesDataset.from_series(temps, eps_s, StrainSeries(t, target))
    head, tail = snode.split_train_test(ds, 0.8)
    t0 = time.time()
    model, report = snode.train(head, snode.TrainConfig(epochs=300, seed=0))
    elapsed = time.time() - t0
    pred_head = snode.rollout(model, head.features, head.times.size - 1,
                              initial=head.target[0])
    pred_tail = snode.rollout(model, tail.features, tail.times.size - 1,
                              initial=tail.target[0])
    return {
        "model": model, "report": report, "dataset": ds,
        "head": head, "tail": tail,
        "err_train": snode.error_inf(pred_head, head.target),
        "err_test": snode.error_inf(pred_tail, tail.target),
        "times": t, "temps": temps, "train_seconds": elapsed,
    }


@pytest.fixture(scope="session")
def importance_task():
    """Release surrogate trained on two trajectories of one autonomous
    release law (different pre-release levels on the same exogenous grid),
    so the source branch alone cannot fit the data and the state feedback
    carries the dynamics.  The thermal-strain feature is held constant,
    making it a dead input by construction.
    """
    t, temps = release_stage1_grid()
    rng = np.random.default_rng(1)
    feats = np.column_stack([temps - temps[0], t, np.zeros_like(t)])

    def trajectory(eps0):
        clean = RELEASE_AMPLITUDE - (RELEASE_AMPLITUDE - eps0) \
            * np.exp(-t / RELEASE_TAU)
        return clean + 0.02 * RELEASE_AMPLITUDE * rng.standard_normal(t.size)

    phase_a = snode.SeriesDataset(t, feats, trajectory(0.0))
    phase_b = snode.SeriesDataset(t, feats, trajectory(0.5 * RELEASE_AMPLITUDE))
    model, _ = snode.train([phase_a, phase_b],
                           snode.TrainConfig(epochs=200, seed=0))
    scores = snode.permutation_importance(model, phase_a, n_repeats=5, seed=0)
    return {"model": model, "scores": scores, "dataset": phase_a}


@pytest.fixture(scope="session")
def crys_task():
    """Crystallization surrogate trained in two phases on a synthetic
    onset-and-saturate strain over the hotter DMA cycle; the final cooling
    stage (T4) is held out entirely.
    """
    cycle = dma_cycle(180.0, dt=60.0)
    times, temps = sample_cycle(cycle)
    tg = celsius_to_kelvin(147.0)
    rng = np.random.default_rng(3)
    crys = crystallization_series(times, temps, CRYS_AMPLITUDE, CRYS_TAU, tg)
    target = crys + 0.02 * CRYS_AMPLITUDE * rng.standard_normal(times.size)
    target[temps <= tg] = crys[temps <= tg]
    eps_s = 26.97e-6 * (temps - temps[0]) * 0.05

    bt, _ = cycle.breakpoints()
    onset = int(np.flatnonzero(temps > tg)[0])
    end_soak1 = int(np.searchsorted(times, bt[2]))
    t4_start = int(np.searchsorted(times, bt[-3]))
    feats = np.column_stack([temps - temps[0], times, eps_s])

    def window(lo, hi):
        return snode.SeriesDataset(times[lo:hi], feats[lo:hi], target[lo:hi])

    phase1 = window(onset - 2, end_soak1)
    phase2 = window(onset - 2, t4_start)
    held = window(t4_start - 1, times.size)
    t0 = time.time()
    model, report = snode.train([phase1, phase2],
                                snode.TrainConfig(epochs=150, seed=0))
    elapsed = time.time() - t0
    pred_train = snode.rollout(model, phase2.features, phase2.times.size - 1,
                               initial=phase2.target[0])
    pred_t4 = snode.rollout(model, held.features, held.times.size - 1,
                            initial=held.target[0])
    return {
        "model": model, "report": report,
        "phase2": phase2, "held": held,
        "err_train": snode.error_rel(pred_train, phase2.target),
        "err_heldout": snode.error_rel(pred_t4, held.target),
        "train_seconds": elapsed,
    }


@pytest.fixture(scope="session")
def fit_roundtrip():
    """Identification round-trip on noiseless synthetic data.

    The steel fixture CTE is held fixed (its bounds collapse): it is
    exactly collinear with the axial expansion over the reversible stages,
    so the five material parameters are the identifiable set.
    """
    cycle = dma_cycle(120.0, dt=120.0)
    mech = default_mechanical()
    geom = default_geometry()
    cfg = MechConfig(ne_x=20, ne_y=4, ne_z=1)
    times, temps, raw, _ = generate_synthetic(TRUTH, cycle, mech, geom, cfg=cfg)
    slices = dma_stage_bounds(cycle, times)
    bounds = {
        "alpha_par": (-2e-6, 5e-6),
        "alpha_perp": (1e-5, 5e-5),
        "eta1": (1e12, 2e14),
        "eta2": (1e12, 2e14),
        "eta3": (1e12, 2e14),
        "alpha_steel": (TRUTH.alpha_steel, TRUTH.alpha_steel),
    }
    p0 = {"alpha_par": -0.15e-6, "alpha_perp": 33e-6, "eta1": 1.2e13,
          "eta2": 3.4e13, "eta3": 1.0e13, "alpha_steel": TRUTH.alpha_steel}
    problem = identify.FitProblem(
        experimental=StrainSeries(times, raw, label="synthetic"),
        cycle=cycle, mechanical=mech, geometry=geom,
        stage_slices=slices, bounds=bounds, p0=p0, mech_config=cfg)
    t0 = time.time()
    result = identify.fit(problem, max_evaluations=3000)
    elapsed = time.time() - t0
    return {"result": result, "truth": TRUTH, "problem": problem,
            "bounds": bounds, "fit_seconds": elapsed}


E2E_COMMANDS = ("synth", "thermal-dma", "fit", "train-ini", "train-crys",
                "print-sim", "report")


@pytest.fixture(scope="session")
def e2e_run(tmp_path_factory):
    """Full synthetic pipeline through the CLI with reduced budgets."""
    out = tmp_path_factory.mktemp("e2e")
    cfg_path = out / "config.yaml"
    cfg_path.write_text(yaml.safe_dump({
        "fit": {"max_evaluations": 600},
        "train_ini": {"epochs": 120},
        "train_crys": {"epochs": 80},
    }))
    args = ["--config", str(cfg_path), "--out", str(out), "--seed", "0"]
    t0 = time.time()
    for command in E2E_COMMANDS:
        rc = cli.main([command] + args)
        assert rc == 0, f"pipeline command {command} failed"
    elapsed = time.time() - t0
    return {"out": pathlib.Path(out), "args": args, "seconds": elapsed}


# one "[criterion NN] name: PASS/FAIL" line per acceptance criterion,
# collected by the criterion() context manager in test_acceptance.py and
# echoed after the run (fd-level capture would swallow direct prints)
ACCEPTANCE_LINES: list[str] = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE_LINES):
            terminalreporter.write_line(line)


def read_keyvals(path) -> dict:
    """Parse the `key value [status]` text artifacts the CLI writes."""
    out = {}
    for line in pathlib.Path(path).read_text().splitlines():
        if line.startswith("#") or not line.strip():
            continue
        parts = line.split()
        try:
            out[parts[0]] = float(parts[1])
        except ValueError:
            out[parts[0]] = parts[1]
    return out

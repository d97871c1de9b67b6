"""Inverse identification of viscoelastic and expansion parameters from a
DMA iso-stress experiment.

Fits p = (alpha_par, alpha_perp, eta1, eta2, eta3) plus the steel CTE of
the DMA fixture by minimizing the squared misfit between the simulated
and measured axial strain over the reversible stages (first cooling,
second heating, second cooling).  The first heating stage is excluded:
it carries the irreversible drying / residual-release strain that the
neural-ODE models pick up downstream.

The raw instrument trace includes the expansion of the fixture's steel
bars (read as apparent specimen shrinkage), which is removed before
comparison, and the experimental curve is shifted vertically so that its
final point coincides with the simulation (the specimen's absolute length
at the cycle end is not an observable of the instrument).
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
from scipy.optimize import minimize

from .core import (
    ExpansionVector,
    Geometry,
    MechanicalMaterial,
    StrainSeries,
    ThermalCycle,
    ViscosityTensor,
)
from .fem import KelvinVoigtSolver, MechConfig


DEFAULT_BOUNDS = {
    "alpha_par": (-2e-6, 5e-6),
    "alpha_perp": (0.0, 1e-4),
    "eta1": (0.0, 1e15),
    "eta2": (0.0, 1e15),
    "eta3": (0.0, 1e15),
    "alpha_steel": (1e-5, 2.5e-5),
}

# eta values are optimized in log10 space; a small floor keeps zero inside
# the feasible set without breaking the log scaling
_ETA_FLOOR = 1e8
_PARAM_NAMES = ("alpha_par", "alpha_perp", "eta1", "eta2", "eta3", "alpha_steel")


@dataclass
class FitProblem:
    """Everything needed to evaluate the identification misfit."""

    experimental: StrainSeries
    cycle: ThermalCycle
    mechanical: MechanicalMaterial
    geometry: Geometry
    stage_slices: list[slice]
    bounds: dict = field(default_factory=lambda: dict(DEFAULT_BOUNDS))
    p0: dict = field(default_factory=lambda: {
        "alpha_par": 1e-6, "alpha_perp": 2e-5, "eta1": 1e13,
        "eta2": 5e13, "eta3": 1e13, "alpha_steel": 1.7e-5,
    })
    mech_config: MechConfig = field(default_factory=MechConfig)

    def __post_init__(self):
        if len(self.stage_slices) != 4:
            raise ValueError("expected four DMA stage slices")
        n = sum(s.stop - s.start for s in self.stage_slices)
        if n != len(self.experimental):
            raise ValueError("stage slices must partition the series")
        for b in self.bounds.values():
            if not all(map(math.isfinite, b)):
                raise ValueError("bounds must be finite")


@dataclass
class FitResult:
    params: dict              # SI values incl. alpha_steel
    objective: float
    objective_at_p0: float
    stage_residuals: np.ndarray  # per-stage sum of squares at the optimum
    trace: np.ndarray            # best-so-far objective per evaluation
    n_evaluations: int
    converged: bool

    def bound_status(self, bounds: dict) -> dict:
        out = {}
        for name, v in self.params.items():
            lo, hi = bounds[name]
            span = hi - lo
            if span == 0.0:
                out[name] = "fixed"
            elif v - lo < 1e-6 * span:
                out[name] = "at-lower"
            elif hi - v < 1e-6 * span:
                out[name] = "at-upper"
            else:
                out[name] = "interior"
        return out


def subtract_fixture(raw: StrainSeries, alpha_steel: float,
                     delta_t: np.ndarray) -> StrainSeries:
    """Remove the fixture steel-bar expansion from a raw DMA strain trace.

    The bars expand with temperature and the instrument reads that as
    specimen shrinkage, so the correction is added back.
    """
    delta_t = np.asarray(delta_t, float)
    if delta_t.shape != raw.times.shape:
        raise ValueError("temperature history does not match the strain grid")
    return raw.with_values(raw.values + alpha_steel * delta_t,
                           label=f"{raw.label}_fixture_corrected")


def align_tail(exp: StrainSeries, sim: StrainSeries) -> StrainSeries:
    """Shift the experimental trace so it ends on the simulated value."""
    if len(exp) == 0 or len(sim) == 0:
        raise ValueError("cannot align empty series")
    shift = sim.values[-1] - exp.values[-1]
    return exp.with_values(exp.values + shift, label=f"{exp.label}_aligned")


def _simulate(params: dict, problem: FitProblem,
              solver_cache: dict) -> StrainSeries:
    eta = ViscosityTensor(params["eta1"], params["eta2"], params["eta3"])
    key = (params["eta1"], params["eta2"], params["eta3"])
    solver = solver_cache.get(key)
    if solver is None:
        solver_cache.clear()
        solver = KelvinVoigtSolver(
            problem.mechanical, eta, problem.geometry, problem.mech_config,
            constraints="dma")
        solver_cache[key] = solver
    times = problem.experimental.times
    temps = problem.cycle.temperature(times)
    alpha = ExpansionVector(params["alpha_par"], params["alpha_perp"])
    eps0 = np.outer(temps - temps[0], alpha.as_voigt())
    state = solver.solve_history(times, eps0)
    return StrainSeries(times, solver.tip_strain(state), label="simulated")


def objective(params: dict, problem: FitProblem,
              solver_cache: dict | None = None) -> float:
    """Misfit of a candidate parameter set over DMA stages 2-4."""
    for name in _PARAM_NAMES:
        lo, hi = problem.bounds[name]
        slack = 1e-9 * max(abs(lo), abs(hi), 1.0)  # absorbs log/exp roundoff
        if not (lo - slack <= params[name] <= hi + slack):
            raise ValueError(f"{name}={params[name]} outside bounds")
    cache = {} if solver_cache is None else solver_cache
    try:
        sim = _simulate(params, problem, cache)
    except Exception:  # singular candidate systems -> infinite misfit
        return float("inf")
    if not np.all(np.isfinite(sim.values)):
        # indefinite viscosity candidates can destabilize the time stepping
        return float("inf")
    temps = problem.cycle.temperature(problem.experimental.times)
    corrected = subtract_fixture(problem.experimental, params["alpha_steel"],
                                 temps - temps[0])
    aligned = align_tail(corrected, sim)
    total = 0.0
    for s in problem.stage_slices[1:]:
        diff = aligned.values[s] - sim.values[s]
        total += float(diff @ diff)
    return total


def stage_residuals(params: dict, problem: FitProblem) -> np.ndarray:
    sim = _simulate(params, problem, {})
    temps = problem.cycle.temperature(problem.experimental.times)
    corrected = subtract_fixture(problem.experimental, params["alpha_steel"],
                                 temps - temps[0])
    aligned = align_tail(corrected, sim)
    return np.array([float(np.sum((aligned.values[s] - sim.values[s]) ** 2))
                     for s in problem.stage_slices])


def _to_scaled(params: dict) -> np.ndarray:
    return np.array([
        params["alpha_par"] * 1e6,
        params["alpha_perp"] * 1e6,
        math.log10(max(params["eta1"], _ETA_FLOOR)),
        math.log10(max(params["eta2"], _ETA_FLOOR)),
        math.log10(max(params["eta3"], _ETA_FLOOR)),
        params["alpha_steel"] * 1e6,
    ])


def _from_scaled(x: np.ndarray) -> dict:
    return {
        "alpha_par": x[0] * 1e-6,
        "alpha_perp": x[1] * 1e-6,
        "eta1": 10.0 ** x[2],
        "eta2": 10.0 ** x[3],
        "eta3": 10.0 ** x[4],
        "alpha_steel": x[5] * 1e-6,
    }


def _scaled_bounds(bounds: dict) -> list[tuple[float, float]]:
    out = []
    for name in _PARAM_NAMES:
        lo, hi = bounds[name]
        if name.startswith("eta"):
            out.append((math.log10(max(lo, _ETA_FLOOR)),
                        math.log10(max(hi, _ETA_FLOOR * 10))))
        else:
            out.append((lo * 1e6, hi * 1e6))
    return out


def fit(problem: FitProblem, max_evaluations: int = 2000,
        seed: int = 0) -> FitResult:
    """Two-stage bound-constrained identification.

    Stage A: derivative-free simplex descent on scaled parameters
    (alphas affine-scaled to O(1), etas in log10).  Stage B: restarted
    coordinate-wise polish (direction-set search) from the stage-A
    optimum.  The best-so-far trace is monotone non-increasing by
    construction.
    """
    cache: dict = {}
    trace: list[float] = []
    best = {"x": None, "f": float("inf")}

    sbounds_all = _scaled_bounds(problem.bounds)
    x0_all = np.clip(_to_scaled(problem.p0),
                     [b[0] for b in sbounds_all], [b[1] for b in sbounds_all])
    # parameters with collapsed bounds (lo == hi) are held fixed and
    # excluded from the optimization vector
    free = np.array([lo < hi for lo, hi in sbounds_all])
    if not free.any():
        raise ValueError("all parameters are fixed; nothing to identify")
    sbounds = [b for b, f in zip(sbounds_all, free) if f]

    def expand(x_free):
        x = x0_all.copy()
        x[free] = x_free
        return x

    def wrapped(x_free):
        x_free = np.clip(x_free, [b[0] for b in sbounds],
                         [b[1] for b in sbounds])
        f = objective(_from_scaled(expand(x_free)), problem, cache)
        if f < best["f"]:
            best["f"] = f
            best["x"] = np.asarray(x_free).copy()
        trace.append(best["f"])
        return f

    x0 = x0_all[free]
    f0 = wrapped(x0)

    budget_a = int(max_evaluations * 0.7)
    res_a = minimize(wrapped, x0, method="Nelder-Mead", bounds=sbounds,
                     options={"maxfev": budget_a, "xatol": 1e-6,
                              "fatol": 1e-14, "adaptive": True})

    budget_b = max_evaluations - len(trace)
    converged = True
    if budget_b > 20:
        res_b = minimize(wrapped, best["x"].copy(), method="Powell",
                         bounds=sbounds,
                         options={"maxfev": budget_b, "xtol": 1e-8,
                                  "ftol": 1e-14})
        converged = bool(res_b.success) or bool(res_a.success)
    if len(trace) >= max_evaluations and not converged:
        converged = False

    params = _from_scaled(expand(best["x"]))
    return FitResult(
        params=params,
        objective=best["f"],
        objective_at_p0=f0,
        stage_residuals=stage_residuals(params, problem),
        trace=np.array(trace),
        n_evaluations=len(trace),
        converged=converged,
    )


def export_fit_result(path, result: FitResult, bounds: dict):
    """Key-value text export of a fit result."""
    status = result.bound_status(bounds)
    with open(path, "w") as fh:
        fh.write("# tapesim-fit-result v1\n")
        fh.write("# name value_SI bound_status\n")
        for name in _PARAM_NAMES:
            fh.write(f"{name} {result.params[name]:.8e} {status[name]}\n")
        fh.write(f"objective {result.objective:.8e} -\n")
        fh.write(f"converged {int(result.converged)} -\n")


def load_fit_result(path) -> dict:
    """Parse the key-value fit-result file back into a parameter dict."""
    params = {}
    with open(path) as fh:
        for line in fh:
            if line.startswith("#") or not line.strip():
                continue
            name, value, _ = line.split()
            if name in _PARAM_NAMES:
                params[name] = float(value)
    missing = set(_PARAM_NAMES) - set(params)
    if missing:
        raise ValueError(f"fit-result file is missing {sorted(missing)}")
    return params

"""Acceptance gate: one test per criterion, one printed pass/fail line each.

Every numeric threshold below is the criterion's stated tolerance; frozen
reference values come from the independent oracles in tests/oracles.py.
The heavy artifacts (trained surrogates, the identification round-trip,
the end-to-end pipeline run) are shared session fixtures from conftest.
"""

import sys
import time
from contextlib import contextmanager

import numpy as np
import pytest
import torch

from tapesim import snode
from tapesim.core import (
    Geometry,
    MechanicalMaterial,
    StrainSeries,
    ViscosityTensor,
    celsius_to_kelvin,
    default_geometry,
    default_mechanical,
    default_thermal,
    dma_cycle,
    kelvin_to_celsius,
)
from tapesim.fem import KelvinVoigtSolver, MechConfig, rate_of_eigenstrain
from tapesim.micromech import (
    Micro,
    axial_stresses,
    intrinsic_resin_strain,
    lateral_strain,
)
from tapesim.pgd import (
    PgdConfig,
    PrintConfig,
    flux_balance_plateau,
    solve_steady_print,
    solve_transient_dma,
)
from oracles import dense_transient_heat, micromech_brute_force
from conftest import read_keyvals


@contextmanager
def criterion(number, name):
    """Emit exactly one pass/fail line per criterion.

    Lines are echoed in the terminal summary (see conftest) because
    pytest's capture would otherwise swallow them; they also go to the
    live stdout for -s runs.
    """
    import conftest

    def emit(verdict):
        line = f"[criterion {number:02d}] {name}: {verdict}"
        conftest.ACCEPTANCE_LINES.append(line)
        print(line, file=sys.__stdout__)
        sys.__stdout__.flush()

    try:
        yield
    except BaseException:
        emit("FAIL")
        raise
    emit("PASS")


def test_criterion_01_separated_solver_matches_dense_oracle():
    with criterion(1, "separated transient solve matches dense oracle"):
        mat = default_thermal()
        geom = default_geometry()
        cycle = dma_cycle(120.0)
        cfg = PgdConfig(nx=10, ny=6, nz=7, nt=60)
        t0 = time.time()
        field = solve_transient_dma(mat, geom, cycle, cfg)
        elapsed = time.time() - t0
        tensor = field.tensor().reshape(10 * 6 * 7, 60)
        t_grid = np.linspace(0.0, cycle.end_time, 60)
        dense = dense_transient_heat(
            mat.k_par, mat.k_perp, mat.rho, mat.c_p, mat.h_air, mat.t0,
            geom.length, geom.width, geom.thickness, 10, 6, 7, t_grid,
            cycle.temperature(t_grid))
        rel = np.linalg.norm(tensor - dense) / np.linalg.norm(dense)
        assert rel < 1e-3
        assert elapsed < 60.0


def test_criterion_02_dma_thermal_homogeneity():
    with criterion(2, "DMA cycle keeps the tape thermally homogeneous"):
        field = solve_transient_dma(default_thermal(), default_geometry(),
                                    dma_cycle(120.0),
                                    PgdConfig(nx=8, ny=4, nz=7, nt=200))
        tensor = field.tensor().reshape(-1, 200)
        spread = tensor.max(axis=0) - tensor.min(axis=0)
        assert spread.max() < 0.5


def print_operating_point(v=0.01):
    return PrintConfig(
        v_deposition=v,
        t_base=celsius_to_kelvin(160.0), t_head=celsius_to_kelvin(380.0),
        t_inf=celsius_to_kelvin(20.0), h_air=25.0, h_base=60.0,
        geom=Geometry(280e-3, 6.35e-3, 0.177e-3))


def test_criterion_03_print_plateau_temperature():
    with criterion(3, "print far-field plateau temperature and z spread"):
        pcfg = print_operating_point()
        field = solve_steady_print(default_thermal(), pcfg)
        tensor = field.tensor()
        outlet = tensor[-1]
        plateau_c = kelvin_to_celsius(outlet[outlet.size // 2])
        assert plateau_c == pytest.approx(118.8, abs=2.0)
        oracle_c = kelvin_to_celsius(flux_balance_plateau(pcfg))
        assert plateau_c == pytest.approx(oracle_c, abs=2.0)
        assert outlet.max() - outlet.min() < 0.5


def test_criterion_04_stabilized_transport_is_monotone():
    with criterion(4, "no streamwise oscillation at high element Peclet"):
        field = solve_steady_print(default_thermal(),
                                   print_operating_point(v=1.0))
        assert field.diagnostics["peclet"] > 50.0
        tensor = field.tensor()
        mid = tensor[:, tensor.shape[1] // 2]
        # cooling profile: any interior uphill step is an oscillation
        uphill = np.diff(mid)[np.diff(mid) > 0.0]
        assert uphill.size == 0 or uphill.max() < 1e-6


def test_criterion_05_viscoelastic_creep_and_patch_test():
    with criterion(5, "analytic creep and thermal-expansion patch test"):
        e_mod = 1e9
        eta_val = 100.0 * e_mod
        mat = MechanicalMaterial(e_par=e_mod, e_perp=e_mod, nu12=1e-3,
                                 nu13=1e-3, nu23=1e-3, g_nt=e_mod / 2,
                                 g_tt=e_mod / 2)
        eta = np.diag([eta_val, eta_val, eta_val, 0.0, 0.0, 0.0])
        geom = Geometry(20e-3, 6.35e-3, 1e-3)
        solver = KelvinVoigtSolver(mat, eta, geom, MechConfig(4, 2, 1),
                                   constraints="dma")
        tau = eta_val / e_mod
        times = np.linspace(0.0, 3.0 * tau, 301)
        sigma = 1e6
        state = solver.solve_history(times, np.zeros((times.size, 6)),
                                     tip_force=sigma * geom.width
                                     * geom.thickness)
        eps = solver.tip_strain(state)
        i = np.argmin(np.abs(times - tau))
        exact = sigma / e_mod * (1.0 - np.exp(-times[i] / tau))
        assert abs(eps[i] - exact) / exact < 0.01

        mech = default_mechanical()
        free = KelvinVoigtSolver(mech, ViscosityTensor(0, 0, 0),
                                 default_geometry(), MechConfig(4, 2, 1),
                                 constraints="free")
        alpha_par, alpha_perp, delta_t = -0.2e-6, 26.97e-6, 95.0
        eps0 = np.outer([0.0, delta_t],
                        [alpha_par, alpha_perp, alpha_perp, 0, 0, 0])
        state = free.solve_history(np.array([0.0, 60.0]), eps0)
        tip = free.tip_strain(state)[-1]
        assert abs(tip - alpha_par * delta_t) < 1e-9


def test_criterion_06_smoothing_derivative_filter():
    with criterion(6, "polynomial smoothing filter exactness and weights"):
        times = np.linspace(0.0, 100.0, 41)
        values = 2.0 + 0.5 * times - 0.03 * times**2 + 1e-3 * times**3
        exact = 0.5 - 0.06 * times + 3e-3 * times**2
        rate = rate_of_eigenstrain(StrainSeries(times, values)).values
        interior = slice(4, -4)
        rel = np.max(np.abs(rate[interior] - exact[interior])
                     / np.max(np.abs(exact)))
        assert rel < 1e-10
        from oracles import savgol_smoothing_weights
        weights = savgol_smoothing_weights(9, 3)
        assert weights[4] == pytest.approx(59.0 / 231.0, abs=1e-12)


def test_criterion_07_identification_round_trip(fit_roundtrip):
    with criterion(7, "identification recovers the generating parameters"):
        result = fit_roundtrip["result"]
        truth = fit_roundtrip["truth"].as_param_dict()
        for name, value in result.params.items():
            if name == "alpha_steel":
                continue  # held fixed (collinear with the axial expansion)
            tol = 0.10 if name.startswith("eta") else 0.05
            assert abs(value - truth[name]) <= tol * abs(truth[name]), name
        assert np.all(np.diff(result.trace) <= 0.0)
        assert fit_roundtrip["fit_seconds"] < 1800.0


def test_criterion_08_surrogate_training_errors(release_task, crys_task):
    with criterion(8, "surrogate train/test errors within budget"):
        assert release_task["err_train"] <= 2.0
        assert release_task["err_test"] <= 2.0
        assert crys_task["err_train"] <= 4.0
        assert crys_task["err_heldout"] <= 6.0


def test_criterion_09_extrapolation_stability(release_task):
    with criterion(9, "release surrogate stays saturating out of range"):
        model = release_task["model"]
        t = release_task["times"]
        temps = release_task["temps"]
        dt = release_task["dataset"].dt
        # exogenous program stretched to 2x the horizon with the peak
        # temperature raised 60 K beyond anything seen in training
        n2 = 2 * t.size
        t_ext = t[0] + dt * np.arange(n2)
        raised = temps + 60.0 * (temps - temps[0]) / (temps.max() - temps[0])
        temps_ext = np.interp(t_ext, t, raised, right=temps.max() + 60.0)
        feats = np.column_stack([temps_ext - temps_ext[0], t_ext,
                                 -0.2e-6 * (temps_ext - temps_ext[0])])
        pred = snode.rollout(model, feats, n2 - 1)
        assert np.all(np.isfinite(pred))
        sat = pred[pred.size // 2]
        assert abs(sat) > 0.0
        # monotone saturation up to small jitter: no drawdown from the
        # running peak larger than 10% of the saturation value
        drawdown = np.max(np.maximum.accumulate(pred) - pred) / abs(sat)
        assert drawdown < 0.10
        assert abs(pred[-1] - sat) / abs(sat) < 0.10


def test_criterion_10_chained_loss_gradients():
    with criterion(10, "chained-loss gradients match finite differences"):
        rng = np.random.default_rng(0)
        n = 40
        t = 60.0 * np.arange(n)
        feats = np.column_stack([rng.normal(size=n), t, rng.normal(size=n)])
        ds = snode.SeriesDataset(t, feats, rng.normal(size=n))
        torch.manual_seed(0)
        model = snode.SurrogateModel(ds.dt)
        model.freeze_normalization(ds.features, ds.target)
        starts = [0, 11, 23]
        loss = snode.chained_loss(model, ds, 10, starts)
        loss.backward()
        fd, ana = [], []
        with torch.no_grad():
            for _, p in model.named_parameters():
                flat = p.data.flatten()
                grad = p.grad.flatten()
                for k in rng.choice(flat.numel(),
                                    size=min(3, flat.numel()),
                                    replace=False):
                    h = 1e-5
                    orig = float(flat[k])
                    flat[k] = orig + h
                    f_plus = float(snode.chained_loss(model, ds, 10, starts))
                    flat[k] = orig - h
                    f_minus = float(snode.chained_loss(model, ds, 10, starts))
                    flat[k] = orig
                    fd.append((f_plus - f_minus) / (2 * h))
                    ana.append(float(grad[k]))
        fd, ana = np.array(fd), np.array(ana)
        assert np.linalg.norm(fd - ana) / np.linalg.norm(fd) < 1e-4


def test_criterion_11_micromechanics_closed_forms():
    with criterion(11, "micromechanics closed forms match equilibrium"):
        micro = Micro(e_f=240e9, e_r=4e9, nu_r=0.4, v_f=0.6)
        for y in (1.0, -1e-4, 3.7e-3, 2.5e-2):
            x_bf, sf_bf, sr_bf, lat_bf = micromech_brute_force(
                y, micro.e_f, micro.e_r, micro.nu_r, micro.v_f)
            assert intrinsic_resin_strain(y, micro) == pytest.approx(
                x_bf, rel=1e-12)
            sig_f, sig_r = axial_stresses(y, micro)
            assert sig_f == pytest.approx(sf_bf, rel=1e-12)
            assert sig_r == pytest.approx(sr_bf, rel=1e-12)
            assert lateral_strain(y, micro) == pytest.approx(lat_bf,
                                                             rel=1e-12)
            # zero net axial force in every evaluation
            net = (1.0 - micro.v_f) * sig_r + micro.v_f * sig_f
            assert abs(net) <= 1e-12 * max(abs(sig_f), abs(sig_r), 1.0)


def test_criterion_12_permutation_importance(importance_task):
    with criterion(12, "state feedback dominates permutation importance"):
        scores = importance_task["scores"]
        ranked = sorted(scores, key=scores.get, reverse=True)
        assert ranked[0] == "previous_prediction"
        top = scores[ranked[0]]
        # the thermal-strain feature is constant in this dataset: dead input
        assert scores["thermal_strain"] < 0.01 * top


def test_criterion_13_end_to_end_width_prediction(e2e_run):
    with criterion(13, "pipeline predicts width loss below nominal"):
        out = e2e_run["out"]
        data = np.loadtxt(out / "width_profile.csv", delimiter=",",
                          comments="#")
        width = data[:, 1]
        nominal = 6.35e-3
        # ends are clamped at nominal; every interior node must shrink
        assert np.all(width[1:-1] < nominal)
        assert width.mean() < nominal
        assert width.min() > 4.5e-3  # same direction/order as measured tapes
        assert e2e_run["seconds"] < 3600.0

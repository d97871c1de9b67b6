import numpy as np
import pytest
from scipy.signal import savgol_coeffs

from tapesim.core import (
    ExpansionVector,
    Geometry,
    MechanicalMaterial,
    StrainSeries,
    ViscosityTensor,
    default_geometry,
    default_mechanical,
    dma_cycle,
    sample_cycle,
)
from tapesim.fem import (
    KelvinVoigtSolver,
    MechConfig,
    export_point_cloud,
    export_width_profile,
    rate_of_eigenstrain,
    run_dma_sim,
    run_print_mech,
)
from oracles import savgol_smoothing_weights

ALPHA = ExpansionVector(-0.2e-6, 26.97e-6)
ETA_PAPER = ViscosityTensor(0.876e13, 4.62e13, 0.76e13)


def creep_setup():
    """Nearly-1D bar: decoupled moduli, axial-only viscosity."""
    e_mod = 1e9
    eta_val = 100.0 * e_mod  # time constant 100 s
    mat = MechanicalMaterial(e_par=e_mod, e_perp=e_mod, nu12=1e-3, nu13=1e-3,
                             nu23=1e-3, g_nt=e_mod / 2, g_tt=e_mod / 2)
    eta = np.diag([eta_val, eta_val, eta_val, 0.0, 0.0, 0.0])
    geom = Geometry(20e-3, 6.35e-3, 1e-3)
    return mat, eta, geom, e_mod, eta_val


def test_constant_stress_creep_matches_analytic():
    mat, eta, geom, e_mod, eta_val = creep_setup()
    solver = KelvinVoigtSolver(mat, eta, geom, MechConfig(4, 2, 1),
                               constraints="dma")
    tau = eta_val / e_mod
    times = np.linspace(0.0, 3.0 * tau, 301)
    sigma = 1e6
    force = sigma * geom.width * geom.thickness
    state = solver.solve_history(times, np.zeros((times.size, 6)),
                                 tip_force=force)
    eps = solver.tip_strain(state)
    exact = sigma / e_mod * (1.0 - np.exp(-times / tau))
    i = np.argmin(np.abs(times - tau))
    assert abs(eps[i] - exact[i]) / exact[i] < 0.01
    # long-time limit approaches the elastic value
    assert abs(eps[-1] - sigma / e_mod) / (sigma / e_mod) < 0.06


def test_thermal_expansion_patch_test_exact():
    mech = default_mechanical()
    geom = default_geometry()
    solver = KelvinVoigtSolver(mech, ViscosityTensor(0, 0, 0), geom,
                               MechConfig(4, 2, 1), constraints="free")
    delta_t = 95.0
    eps0 = np.outer([0.0, delta_t], ALPHA.as_voigt())
    state = solver.solve_history(np.array([0.0, 60.0]), eps0)
    tip = solver.tip_strain(state)[-1]
    assert abs(tip - ALPHA.alpha_par * delta_t) < 1e-9
    _, width = solver.width_profile(state)
    expected = geom.width * (1.0 + ALPHA.alpha_perp * delta_t)
    assert np.max(np.abs(width - expected)) < 1e-9 * geom.width


def test_width_hand_oracle():
    # uniform lateral eigenstrain -0.01 shrinks the mid-length width to
    # 6.35 * 0.99 = 6.2865 mm even with the printed-tape constraints
    times = np.array([0.0, 60.0])
    eps0 = np.tile([0.0, -0.01, -0.01], (2, 1))
    _, x, width = run_print_mech(default_mechanical(), ViscosityTensor(0, 0, 0),
                                 eps0, times,
                                 Geometry(280e-3, 6.35e-3, 0.177e-3),
                                 MechConfig(40, 8, 2))
    mid = width[len(width) // 2]
    assert mid * 1e3 == pytest.approx(6.2865, rel=1e-9)


def test_hysteresis_loop_closes_and_vanishes_with_viscosity():
    mech = default_mechanical()
    geom = default_geometry()
    times = np.arange(0.0, 7201.0, 60.0)
    ramp = np.concatenate([np.linspace(0, 95, 61), np.linspace(95, 0, 61)[1:]])
    temps = 298.15 + ramp
    areas = []
    for scale in (1.0, 0.1, 0.01, 0.0):
        eta = ViscosityTensor(0.876e13 * scale, 4.62e13 * scale,
                              0.76e13 * scale)
        sim = run_dma_sim(mech, eta, ALPHA, times, temps, geom,
                          MechConfig(10, 2, 1))
        # shoelace area of the strain-vs-temperature loop
        area = 0.5 * abs(np.sum(temps * np.roll(sim.values, -1)
                                - np.roll(temps, -1) * sim.values))
        areas.append(area)
        # loop closes: same start/end temperature -> same strain
        assert abs(sim.values[-1] - sim.values[0]) < 1e-5
    assert all(a > b for a, b in zip(areas[:-1], areas[1:]))
    assert areas[-1] < 1e-12  # elastic limit has no hysteresis


def test_mesh_refinement_converges():
    mech = default_mechanical()
    geom = default_geometry()
    cycle = dma_cycle(120.0, dt=300.0)
    times, temps = sample_cycle(cycle)
    peaks = []
    for ne_x in (20, 40, 80, 160):
        sim = run_dma_sim(mech, ETA_PAPER, ALPHA, times, temps, geom,
                          MechConfig(ne_x, 4, 2))
        peaks.append(np.max(np.abs(sim.values)))
    changes = [abs(b - a) / b for a, b in zip(peaks[:-1], peaks[1:])]
    # successive refinements shrink the change; the clamped-end boundary
    # layer limits the rate to first order in h
    assert changes[0] > changes[1] > changes[2]
    assert changes[-1] < 0.02


def test_elastic_response_time_step_independent():
    mech = default_mechanical()
    geom = default_geometry()
    t_coarse = np.linspace(0.0, 3600.0, 61)
    t_fine = np.linspace(0.0, 3600.0, 121)
    eps_c = run_dma_sim(mech, ViscosityTensor(0, 0, 0), ALPHA, t_coarse,
                        298.15 + 95 * t_coarse / 3600.0, geom,
                        MechConfig(6, 2, 1)).values
    eps_f = run_dma_sim(mech, ViscosityTensor(0, 0, 0), ALPHA, t_fine,
                        298.15 + 95 * t_fine / 3600.0, geom,
                        MechConfig(6, 2, 1)).values
    assert np.max(np.abs(eps_c - eps_f[::2])) < 1e-15


def test_rate_filter_exact_on_cubics():
    times = np.linspace(0.0, 100.0, 41)
    values = 2.0 + 0.5 * times - 0.03 * times**2 + 1e-3 * times**3
    exact = 0.5 - 0.06 * times + 3e-3 * times**2
    rate = rate_of_eigenstrain(StrainSeries(times, values)).values
    interior = slice(4, -4)
    rel = np.max(np.abs(rate[interior] - exact[interior])
                 / np.max(np.abs(exact)))
    assert rel < 1e-10


def test_smoothing_weights_match_least_squares_oracle():
    oracle = savgol_smoothing_weights(9, 3)
    scipy_weights = savgol_coeffs(9, 3)
    assert np.allclose(oracle, scipy_weights[::-1], atol=1e-12)
    assert oracle[4] == pytest.approx(59.0 / 231.0, abs=1e-12)


def test_rate_filter_validation():
    with pytest.raises(ValueError):
        rate_of_eigenstrain(StrainSeries(np.arange(5.0), np.zeros(5)))
    bad_grid = np.array([0.0, 1.0, 2.0, 3.0, 4.0, 5.0, 6.0, 7.0, 9.0])
    with pytest.raises(ValueError):
        rate_of_eigenstrain(StrainSeries(bad_grid, np.zeros(9)))


def test_width_profile_nominal_without_load():
    mech = default_mechanical()
    geom = default_geometry()
    solver = KelvinVoigtSolver(mech, ViscosityTensor(0, 0, 0), geom,
                               MechConfig(4, 2, 1))
    state = solver.solve_history(np.array([0.0, 1.0]), np.zeros((2, 6)))
    _, width = solver.width_profile(state)
    assert np.allclose(width, geom.width)


def test_print_mech_cooling_shrinks_width():
    # pure thermal contraction after deposition: negative eigenstrain
    times = np.array([0.0, 60.0, 120.0])
    delta_t = np.array([0.0, -100.0, -260.0])
    eps0 = np.column_stack([ALPHA.alpha_par * delta_t,
                            ALPHA.alpha_perp * delta_t,
                            ALPHA.alpha_perp * delta_t])
    _, x, width = run_print_mech(default_mechanical(),
                                 ViscosityTensor(0, 0, 0), eps0, times,
                                 Geometry(280e-3, 6.35e-3, 0.177e-3),
                                 MechConfig(20, 4, 1))
    assert width.mean() < 6.35e-3
    with pytest.raises(ValueError):
        run_print_mech(default_mechanical(), ViscosityTensor(0, 0, 0),
                       eps0[:, :2], times, default_geometry())


def test_solver_input_validation():
    mech = default_mechanical()
    solver = KelvinVoigtSolver(mech, ViscosityTensor(0, 0, 0),
                               default_geometry(), MechConfig(2, 1, 1))
    with pytest.raises(ValueError):
        solver.solve_history(np.array([0.0, 1.0]), np.zeros((3, 6)))
    with pytest.raises(ValueError):
        solver.solve_history(np.array([0.0, 1.0]),
                             np.full((2, 6), np.nan))
    with pytest.raises(ValueError):
        KelvinVoigtSolver(mech, np.zeros((5, 5)), default_geometry())
    with pytest.raises(ValueError):
        KelvinVoigtSolver(mech, ViscosityTensor(0, 0, 0), default_geometry(),
                          constraints="floating")


def test_exports(tmp_path):
    mech = default_mechanical()
    geom = default_geometry()
    solver = KelvinVoigtSolver(mech, ViscosityTensor(0, 0, 0), geom,
                               MechConfig(2, 1, 1))
    state = solver.solve_history(np.array([0.0, 1.0]), np.zeros((2, 6)))
    x, w = solver.width_profile(state)
    wpath = tmp_path / "width.csv"
    export_width_profile(wpath, x, w)
    text = wpath.read_text()
    assert text.startswith("# tapesim-width-profile v1")
    data = np.loadtxt(wpath, delimiter=",", comments="#")
    assert np.allclose(data[:, 1], w)
    ppath = tmp_path / "points.txt"
    export_point_cloud(ppath, solver, state)
    assert ppath.read_text().startswith("# tapesim-points v1")

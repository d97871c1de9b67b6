"""Command-line pipeline: synthetic data, thermal solves, identification,
surrogate training and the printed-tape width prediction.

Subcommands (each writes self-describing artifacts into the output
directory and can be re-run idempotently):

    synth        generate synthetic DMA-1/DMA-2 data with known truth
    thermal-dma  transient tape temperature during the DMA-1 cycle
    fit          identify expansion/viscosity parameters from DMA-1
    train-ini    train the initial-release surrogate on DMA-1
    train-crys   train the crystallization surrogate on DMA-2
    print-sim    steady print thermal solve + width prediction
    report       aggregate everything into report.txt

Configuration is one YAML file whose keys carry explicit unit suffixes
(see DEFAULT_CONFIG).  Exit codes: 0 success, 2 configuration error,
3 missing prerequisite artifact, 4 malformed input data, 5 solver error.
"""

from __future__ import annotations

import argparse
import copy
import sys
from pathlib import Path

import numpy as np
import yaml

import matplotlib
matplotlib.use("Agg")
import matplotlib.pyplot as plt

from . import core, fem, identify, micromech, pgd, snode, synth
from .core import celsius_to_kelvin, kelvin_to_celsius

plt.rcParams["svg.hashsalt"] = "tapesim"

EXIT_CONFIG = 2
EXIT_PREREQUISITE = 3
EXIT_DATA = 4
EXIT_SOLVER = 5


class CliError(Exception):
    def __init__(self, category: str, code: int, message: str):
        super().__init__(message)
        self.category = category
        self.code = code


def _config_error(msg):
    return CliError("config", EXIT_CONFIG, msg)


def _prerequisite_error(artifact, command):
    return CliError("missing-prerequisite", EXIT_PREREQUISITE,
                    f"missing artifact {artifact}; run `tapesim {command}` first")


DEFAULT_CONFIG = {
    "seed": 0,
    "output_dir": "out",
    "geometry": {"length_mm": 20.0, "width_mm": 6.35, "thickness_mm": 0.177},
    "thermal": {
        "k_par_W_per_mK": 14.48, "k_perp_W_per_mK": 1.52,
        "rho_kg_per_m3": 1078.0, "c_p_J_per_kgK": 1054.0,
        "h_air_W_per_m2K": 25.0, "t0_C": 25.0,
    },
    "mechanical": {
        "e_par_GPa": 140.0, "e_perp_GPa": 7.78,
        "nu12": 0.293, "nu13": 0.293, "nu23": 0.2794,
        "g_nt_GPa": 4.4, "g_tt_GPa": 4.4,
    },
    "glass_transition_C": 147.0,
    "dma1": {"test_temp_C": 120.0, "start_temp_C": 25.0, "sample_dt_s": 60.0,
             "rate_K_per_min": 0.5, "csv": None},
    "dma2": {"test_temp_C": 180.0, "start_temp_C": 25.0, "sample_dt_s": 60.0,
             "rate_K_per_min": 0.5, "csv": None},
    "synth": {
        "truth": {
            "alpha_par_per_K": -0.2e-6, "alpha_perp_per_K": 26.97e-6,
            "eta1_Pa_s": 0.876e13, "eta2_Pa_s": 4.62e13, "eta3_Pa_s": 0.76e13,
            "alpha_steel_per_K": 17.4e-6,
            "release_amplitude": -6e-4, "release_tau_s": 2500.0,
            "crys_amplitude": -1e-3, "crys_tau_s": 900.0,
        },
        "noise_sigma": 0.0,
        "mesh": {"ne_x": 20, "ne_y": 4, "ne_z": 1},
    },
    "thermal_dma": {"nx": 8, "ny": 4, "nz": 7, "nt": 200},
    "fit": {
        "mesh": {"ne_x": 20, "ne_y": 4, "ne_z": 1},
        "max_evaluations": 2500,
        "bounds": {
            "alpha_par_per_K": [-2e-6, 5e-6],
            "alpha_perp_per_K": [1e-5, 5e-5],
            "eta1_Pa_s": [1e12, 2e14],
            "eta2_Pa_s": [1e12, 2e14],
            "eta3_Pa_s": [1e12, 2e14],
            "alpha_steel_per_K": [1e-5, 2.5e-5],
        },
        "initial_guess": {
            "alpha_par_per_K": -0.15e-6, "alpha_perp_per_K": 33e-6,
            "eta1_Pa_s": 1.2e13, "eta2_Pa_s": 3.4e13, "eta3_Pa_s": 1.0e13,
            "alpha_steel_per_K": 1.74e-5,
        },
    },
    "train_ini": {"chain_length": 20, "batch_chains": 8, "learning_rate": 0.01,
                  "epochs": 300, "train_fraction": 0.8},
    "train_crys": {"chain_length": 20, "batch_chains": 8, "learning_rate": 0.01,
                   "epochs": 150, "train_fraction": 0.8},
    "micro": {"e_f_GPa": 240.0, "e_r_GPa": 4.0, "nu_r": 0.4, "v_f": 0.6,
              "lambda": 1.0},
    "dsc": {"csv": None, "t_lo_C": 150.0, "t_hi_C": 180.0,
            "heating_rate_K_per_min": 10.0, "dh_final_J_per_g": None},
    "print": {
        "length_mm": 280.0, "speed_mm_per_s": 10.0,
        "t_base_C": 160.0, "t_head_C": 380.0, "t_inf_C": 20.0,
        "h_air_W_per_m2K": 25.0, "h_base_W_per_m2K": 60.0,
        "thermal_mesh": {"nx": 181, "nz": 21},
        "mech_mesh": {"ne_x": 40, "ne_y": 8, "ne_z": 2},
        "include_release": True,
        "include_crystallization": True,
        # material-point history after deposition: hold near the bed plateau
        # temperature, then cool to ambient.  Sampled at history_dt_s, which
        # must stay comparable to the DMA sampling step: the Kelvin-Voigt
        # viscosity ansatz (zero fiber-direction entry) is indefinite and the
        # implicit stepping is only stable for steps of tens of seconds.
        "history_dt_s": 60.0,
        "hold_duration_s": 1800.0,
        "cool_duration_s": 1800.0,
        "settle_duration_s": 7200.0,
    },
}

# file-name registry for cross-command artifact lookup
ART = {
    "dma1_csv": "dma1_synthetic.csv",
    "dma2_csv": "dma2_synthetic.csv",
    "truth": "synth_truth.txt",
    "thermal": "thermal_dma_summary.txt",
    "fit": "fit_result.txt",
    "fit_trace": "fit_trace.csv",
    "fit_curves": "fit_curves.csv",
    "model_ini": "model_ini.pt",
    "ini_report": "train_ini_report.csv",
    "ini_metrics": "train_ini_metrics.txt",
    "model_crys": "model_crys.pt",
    "crys_report": "train_crys_report.csv",
    "crys_metrics": "train_crys_metrics.txt",
    "width": "width_profile.csv",
    "print_summary": "print_summary.txt",
    "report": "report.txt",
}


def _merge(base: dict, override: dict, path="") -> dict:
    out = copy.deepcopy(base)
    for k, v in override.items():
        if k not in base:
            raise _config_error(f"unknown configuration key {path + k!r}")
        if isinstance(base[k], dict) and isinstance(v, dict):
            out[k] = _merge(base[k], v, path + k + ".")
        else:
            out[k] = v
    return out


def load_config(path: str | None, out_dir: str | None = None,
                seed: int | None = None) -> dict:
    cfg = copy.deepcopy(DEFAULT_CONFIG)
    if path is not None:
        p = Path(path)
        if not p.exists():
            raise _config_error(f"config file {path} does not exist")
        try:
            user = yaml.safe_load(p.read_text()) or {}
        except yaml.YAMLError as exc:
            raise _config_error(f"invalid YAML in {path}: {exc}")
        if not isinstance(user, dict):
            raise _config_error("config root must be a mapping")
        cfg = _merge(cfg, user)
    if out_dir is not None:
        cfg["output_dir"] = out_dir
    if seed is not None:
        cfg["seed"] = int(seed)
    for section in ("dma1", "dma2", "dsc"):
        csv = cfg[section]["csv"]
        if csv is not None and not Path(csv).exists():
            raise _config_error(f"{section}.csv points at a missing file: {csv}")
    return cfg


# ---------------------------------------------------------------------------
# config -> domain objects


def _geometry(cfg) -> core.Geometry:
    g = cfg["geometry"]
    return core.Geometry(g["length_mm"] * 1e-3, g["width_mm"] * 1e-3,
                         g["thickness_mm"] * 1e-3)


def _thermal(cfg) -> core.ThermalMaterial:
    t = cfg["thermal"]
    return core.ThermalMaterial(
        k_par=t["k_par_W_per_mK"], k_perp=t["k_perp_W_per_mK"],
        rho=t["rho_kg_per_m3"], c_p=t["c_p_J_per_kgK"],
        h_air=t["h_air_W_per_m2K"], t0=celsius_to_kelvin(t["t0_C"]))


def _mechanical(cfg) -> core.MechanicalMaterial:
    m = cfg["mechanical"]
    return core.MechanicalMaterial(
        e_par=m["e_par_GPa"] * 1e9, e_perp=m["e_perp_GPa"] * 1e9,
        nu12=m["nu12"], nu13=m["nu13"], nu23=m["nu23"],
        g_nt=m["g_nt_GPa"] * 1e9, g_tt=m["g_tt_GPa"] * 1e9)


def _cycle(cfg, which: str) -> core.ThermalCycle:
    d = cfg[which]
    return core.dma_cycle(d["test_temp_C"], d["start_temp_C"],
                          d["sample_dt_s"], d["rate_K_per_min"])


def _micro(cfg) -> micromech.Micro:
    m = cfg["micro"]
    return micromech.Micro(e_f=m["e_f_GPa"] * 1e9, e_r=m["e_r_GPa"] * 1e9,
                           nu_r=m["nu_r"], v_f=m["v_f"])


_KEYMAP = {
    "alpha_par": "alpha_par_per_K", "alpha_perp": "alpha_perp_per_K",
    "eta1": "eta1_Pa_s", "eta2": "eta2_Pa_s", "eta3": "eta3_Pa_s",
    "alpha_steel": "alpha_steel_per_K",
}


def _si_params(section: dict) -> dict:
    return {si: float(section[k]) for si, k in _KEYMAP.items()}


def _truth(cfg) -> synth.SyntheticTruth:
    t = cfg["synth"]["truth"]
    return synth.SyntheticTruth(
        **_si_params(t),
        release_amplitude=t["release_amplitude"],
        release_tau=t["release_tau_s"],
        crys_amplitude=t["crys_amplitude"],
        crys_tau=t["crys_tau_s"],
        t_glass=celsius_to_kelvin(cfg["glass_transition_C"]))


def _mesh(section) -> fem.MechConfig:
    return fem.MechConfig(section["ne_x"], section["ne_y"], section["ne_z"])


def _out(cfg) -> Path:
    out = Path(cfg["output_dir"])
    out.mkdir(parents=True, exist_ok=True)
    return out


def _dma_csv_path(cfg, which: str) -> Path:
    configured = cfg[which]["csv"]
    if configured is not None:
        return Path(configured)
    path = _out(cfg) / ART[f"{which}_csv"]
    if not path.exists():
        raise _prerequisite_error(path, "synth")
    return path


def _save_plot(fig, path):
    fig.savefig(path, format="svg", metadata={"Date": None})
    plt.close(fig)


def _line_plot(path, x, ys: dict, xlabel, ylabel, title):
    fig, ax = plt.subplots(figsize=(6, 4))
    for label, y in ys.items():
        ax.plot(x, y, label=label, linewidth=1.2)
    ax.set_xlabel(xlabel)
    ax.set_ylabel(ylabel)
    ax.set_title(title)
    if len(ys) > 1:
        ax.legend()
    fig.tight_layout()
    _save_plot(fig, path)


# ---------------------------------------------------------------------------
# subcommands


def cmd_synth(cfg) -> list[str]:
    out = _out(cfg)
    truth = _truth(cfg)
    mech = _mechanical(cfg)
    geom = _geometry(cfg)
    mesh = _mesh(cfg["synth"]["mesh"])
    sigma = cfg["synth"]["noise_sigma"]
    written = []
    for which in ("dma1", "dma2"):
        cycle = _cycle(cfg, which)
        times, temps, raw, _ = synth.generate_synthetic(
            truth, cycle, mech, geom, noise_sigma=sigma,
            seed=cfg["seed"], cfg=mesh)
        path = out / ART[f"{which}_csv"]
        synth.write_dma_csv(path, times, temps, raw)
        written.append(str(path))
    truth_path = out / ART["truth"]
    with open(truth_path, "w") as fh:
        fh.write("# tapesim-synth-truth v1\n")
        for si, key in _KEYMAP.items():
            fh.write(f"{si} {getattr(truth, si):.8e}\n")
        fh.write(f"release_amplitude {truth.release_amplitude:.8e}\n")
        fh.write(f"release_tau {truth.release_tau:.8e}\n")
        fh.write(f"crys_amplitude {truth.crys_amplitude:.8e}\n")
        fh.write(f"crys_tau {truth.crys_tau:.8e}\n")
        fh.write(f"noise_sigma {sigma:.8e}\n")
    written.append(str(truth_path))
    return written


def cmd_thermal_dma(cfg) -> list[str]:
    out = _out(cfg)
    th = cfg["thermal_dma"]
    pcfg = pgd.PgdConfig(nx=th["nx"], ny=th["ny"], nz=th["nz"], nt=th["nt"])
    try:
        field = pgd.solve_transient_dma(_thermal(cfg), _geometry(cfg),
                                        _cycle(cfg, "dma1"), pcfg,
                                        seed=cfg["seed"])
    except pgd.PgdConvergenceError as exc:
        raise CliError("solver", EXIT_SOLVER, str(exc))
    tensor = field.tensor()            # (nx*ny, nz, nt)
    t_grid = field.axes[-1].coords[0]
    spatial = tensor.reshape(-1, tensor.shape[-1])
    t_min, t_max = spatial.min(axis=0), spatial.max(axis=0)
    spread = t_max - t_min
    homog = out / "thermal_dma_homogeneity.csv"
    np.savetxt(homog, np.column_stack([t_grid, t_min, t_max, spread]),
               delimiter=",", comments="# ",
               header="tapesim-thermal-homogeneity v1\ntime_s,T_min_K,T_max_K,spread_K")
    _line_plot(out / "thermal_dma_homogeneity.svg", t_grid / 3600.0,
               {"min": t_min - 273.15, "max": t_max - 273.15},
               "time (h)", "temperature (degC)", "DMA-1 tape temperature envelope")
    summary = out / ART["thermal"]
    with open(summary, "w") as fh:
        fh.write("# tapesim-thermal-summary v1\n")
        fh.write(f"modes {field.rank}\n")
        fh.write(f"max_spatial_spread_K {spread.max():.6e}\n")
        fh.write(f"residual {field.diagnostics['residuals'][-1]:.6e}\n")
    return [str(homog), str(summary)]


def _load_experiment(cfg, which: str):
    """Ingested DMA trace plus the configured cycle and stage slices."""
    path = _dma_csv_path(cfg, which)
    try:
        series, temps = synth.ingest_dma(path)
    except synth.DmaCsvError as exc:
        raise CliError("data", EXIT_DATA, f"{path}: {exc}")
    cycle = _cycle(cfg, which)
    slices = core.dma_stage_bounds(cycle, series.times)
    return series, temps, cycle, slices


def cmd_fit(cfg) -> list[str]:
    out = _out(cfg)
    series, temps, cycle, slices = _load_experiment(cfg, "dma1")
    f = cfg["fit"]
    bounds = {si: tuple(map(float, f["bounds"][k]))
              for si, k in _KEYMAP.items()}
    problem = identify.FitProblem(
        experimental=series, cycle=cycle, mechanical=_mechanical(cfg),
        geometry=_geometry(cfg), stage_slices=slices, bounds=bounds,
        p0=_si_params(f["initial_guess"]), mech_config=_mesh(f["mesh"]))
    try:
        result = identify.fit(problem, max_evaluations=f["max_evaluations"],
                              seed=cfg["seed"])
    except (fem.SingularSystemError, ValueError) as exc:
        raise CliError("solver", EXIT_SOLVER, str(exc))
    fit_path = out / ART["fit"]
    identify.export_fit_result(fit_path, result, bounds)
    np.savetxt(out / ART["fit_trace"],
               np.column_stack([np.arange(1, result.trace.size + 1),
                                result.trace]),
               delimiter=",", comments="# ",
               header="tapesim-fit-trace v1\nevaluation,best_objective")
    # fitted curves for plotting / reconstruction
    sim = identify._simulate(result.params, problem, {})
    corrected = identify.subtract_fixture(series, result.params["alpha_steel"],
                                          temps - temps[0])
    aligned = identify.align_tail(corrected, sim)
    np.savetxt(out / ART["fit_curves"],
               np.column_stack([series.times, temps, aligned.values, sim.values]),
               delimiter=",", comments="# ",
               header="tapesim-fit-curves v1\ntime_s,temperature_K,"
                      "experimental_corrected,simulated")
    _line_plot(out / "fit_strain_vs_time.svg", series.times / 3600.0,
               {"experimental (corrected)": 100 * aligned.values,
                "simulated": 100 * sim.values},
               "time (h)", "strain (%)", "DMA-1 identification")
    _line_plot(out / "fit_strain_vs_temperature.svg", temps - 273.15,
               {"experimental (corrected)": 100 * aligned.values,
                "simulated": 100 * sim.values},
               "temperature (degC)", "strain (%)", "DMA-1 identification")
    return [str(fit_path)]


def _fitted_params(cfg) -> dict:
    path = _out(cfg) / ART["fit"]
    if not path.exists():
        raise _prerequisite_error(path, "fit")
    return identify.load_fit_result(path)


def _corrected_experiment(cfg, which, params):
    """(aligned experimental, simulated, temps, cycle, slices) for a DMA set."""
    series, temps, cycle, slices = _load_experiment(cfg, which)
    eta = core.ViscosityTensor(params["eta1"], params["eta2"], params["eta3"])
    alpha = core.ExpansionVector(params["alpha_par"], params["alpha_perp"])
    sim = fem.run_dma_sim(_mechanical(cfg), eta, alpha, series.times, temps,
                          _geometry(cfg), _mesh(cfg["fit"]["mesh"]))
    corrected = identify.subtract_fixture(series, params["alpha_steel"],
                                          temps - temps[0])
    aligned = identify.align_tail(corrected, sim)
    return aligned, sim, temps, cycle, slices


def cmd_train_ini(cfg) -> list[str]:
    out = _out(cfg)
    params = _fitted_params(cfg)
    aligned, sim, temps, cycle, slices = _corrected_experiment(cfg, "dma1",
                                                               params)
    mask = np.zeros(aligned.times.size, bool)
    mask[slices[0]] = True
    target = snode.build_ini_targets(aligned, sim, mask)
    ds = snode.SeriesDataset.from_series(temps[mask], sim.values[mask], target)
    tcfg = _train_config(cfg, "train_ini")
    head, tail = snode.split_train_test(ds, tcfg.train_fraction)
    try:
        model, rep = snode.train(head, tcfg)
    except RuntimeError as exc:
        raise CliError("solver", EXIT_SOLVER, str(exc))
    snode.save_model(out / ART["model_ini"], model)
    rep.write_csv(out / ART["ini_report"])
    pred_head = snode.rollout(model, head.features, head.times.size - 1,
                              initial=head.target[0])
    pred_tail = snode.rollout(model, tail.features, tail.times.size - 1,
                              initial=tail.target[0])
    err_train = snode.error_inf(pred_head, head.target)
    err_test = snode.error_inf(pred_tail, tail.target)
    pred_all = snode.rollout(model, ds.features, ds.times.size - 1)
    with open(out / ART["ini_metrics"], "w") as fh:
        fh.write("# tapesim-train-metrics v1\n")
        fh.write(f"error_inf_train_pct {err_train:.6f}\n")
        fh.write(f"error_inf_test_pct {err_test:.6f}\n")
        fh.write(f"target_inf_norm {np.max(np.abs(ds.target)):.6e}\n")
        fh.write(f"max_abs_rollout_error "
                 f"{np.max(np.abs(pred_all - ds.target)):.6e}\n")
    np.savetxt(out / "ini_targets.csv",
               np.column_stack([ds.times, ds.target, pred_all]),
               delimiter=",", comments="# ",
               header="tapesim-ini-curves v1\ntime_s,target,predicted")
    _line_plot(out / "train_ini.svg", ds.times / 3600.0,
               {"target": 100 * ds.target, "predicted": 100 * pred_all},
               "time (h)", "strain (%)", "initial strain release")
    return [str(out / ART["model_ini"])]


def _train_config(cfg, section) -> snode.TrainConfig:
    s = cfg[section]
    return snode.TrainConfig(
        chain_length=s["chain_length"], batch_chains=s["batch_chains"],
        learning_rate=s["learning_rate"], epochs=s["epochs"],
        train_fraction=s["train_fraction"], seed=cfg["seed"])


def _release_on_grid(cfg, model, temps, times, eps_sim, stage1: slice):
    """Roll the release model over a cycle's first heating, frozen after."""
    n1 = stage1.stop
    feats = np.column_stack([temps[:n1] - temps[0], times[:n1], eps_sim[:n1]])
    pred = snode.rollout(model, feats, n1 - 1)
    full = np.full(times.size, pred[-1])
    full[:n1] = pred
    return full


def cmd_train_crys(cfg) -> list[str]:
    out = _out(cfg)
    params = _fitted_params(cfg)
    ini_path = out / ART["model_ini"]
    if not ini_path.exists():
        raise _prerequisite_error(ini_path, "train-ini")
    model_ini = snode.load_model(ini_path)
    aligned, sim, temps, cycle, slices = _corrected_experiment(cfg, "dma2",
                                                               params)
    ini_full = _release_on_grid(cfg, model_ini, temps, aligned.times,
                                sim.values, slices[0])
    target = snode.build_crys_targets(aligned, sim, ini_full)
    tg = celsius_to_kelvin(cfg["glass_transition_C"])
    above = np.flatnonzero(temps > tg)
    if above.size == 0:
        raise CliError("data", EXIT_DATA,
                       "DMA-2 never exceeds the glass transition")
    onset = max(int(above[0]) - 2, 0)
    # crystallization strain is zero until the glass transition is first
    # approached; anchoring there removes the arbitrary instrument datum
    # that tail alignment leaves in the decomposition
    target = target.with_values(target.values - target.values[onset])
    feats = np.column_stack([temps - temps[0], aligned.times, sim.values])

    def window(lo, hi):
        return snode.SeriesDataset(aligned.times[lo:hi], feats[lo:hi],
                                   target.values[lo:hi])

    phase1 = window(onset, slices[0].stop)          # first onset only
    phase2 = window(onset, slices[3].start + 1)     # up to final cooling
    held = window(slices[3].start, aligned.times.size)  # T4, testing only
    tcfg = _train_config(cfg, "train_crys")
    try:
        model, rep = snode.train([phase1, phase2], tcfg)
    except RuntimeError as exc:
        raise CliError("solver", EXIT_SOLVER, str(exc))
    snode.save_model(out / ART["model_crys"], model)
    rep.write_csv(out / ART["crys_report"])
    pred_tr = snode.rollout(model, phase2.features, phase2.times.size - 1,
                            initial=phase2.target[0])
    pred_t4 = snode.rollout(model, held.features, held.times.size - 1,
                            initial=held.target[0])
    err_train = snode.error_rel(pred_tr, phase2.target)
    err_t4 = snode.error_rel(pred_t4, held.target)
    with open(out / ART["crys_metrics"], "w") as fh:
        fh.write("# tapesim-train-metrics v1\n")
        fh.write(f"error_rel_train_pct {err_train:.6f}\n")
        fh.write(f"error_rel_heldout_T4_pct {err_t4:.6f}\n")
        fh.write(f"target_inf_norm {np.max(np.abs(phase2.target)):.6e}\n")
        max_err = max(np.max(np.abs(pred_tr - phase2.target)),
                      np.max(np.abs(pred_t4 - held.target)))
        fh.write(f"max_abs_rollout_error {max_err:.6e}\n")
    np.savetxt(out / "crys_targets.csv",
               np.column_stack([phase2.times, phase2.target, pred_tr]),
               delimiter=",", comments="# ",
               header="tapesim-crys-curves v1\ntime_s,target,predicted")
    _line_plot(out / "train_crys.svg", phase2.times / 3600.0,
               {"target": 100 * phase2.target, "predicted": 100 * pred_tr},
               "time (h)", "strain (%)", "crystallization strain")
    return [str(out / ART["model_crys"])]


def _crystallinity_scale(cfg) -> float:
    """1/X_c scale from DSC data, or 1 when no DSC trace is configured."""
    d = cfg["dsc"]
    if d["csv"] is None:
        return 1.0
    if d["dh_final_J_per_g"] is None:
        raise _config_error("dsc.dh_final_J_per_g is required with dsc.csv")
    trace = micromech.read_dsc_csv(d["csv"])
    rate = d["heating_rate_K_per_min"] / 60.0
    dh_c = micromech.integrate_enthalpy(trace, celsius_to_kelvin(d["t_lo_C"]),
                                        celsius_to_kelvin(d["t_hi_C"]), rate)
    x_c = micromech.crystallinity_fraction(dh_c, d["dh_final_J_per_g"],
                                           cfg["micro"]["lambda"])
    return 1.0 / x_c if x_c > 0 else 1.0


def cmd_print_sim(cfg) -> list[str]:
    out = _out(cfg)
    params = _fitted_params(cfg)
    p = cfg["print"]
    geom_print = core.Geometry(p["length_mm"] * 1e-3,
                               _geometry(cfg).width, _geometry(cfg).thickness)
    pconf = pgd.PrintConfig(
        v_deposition=p["speed_mm_per_s"] * 1e-3,
        t_base=celsius_to_kelvin(p["t_base_C"]),
        t_head=celsius_to_kelvin(p["t_head_C"]),
        t_inf=celsius_to_kelvin(p["t_inf_C"]),
        h_air=p["h_air_W_per_m2K"], h_base=p["h_base_W_per_m2K"],
        geom=geom_print)
    tm = p["thermal_mesh"]
    try:
        field = pgd.solve_steady_print(
            _thermal(cfg), pconf, pgd.PgdConfig(nx=tm["nx"], nz=tm["nz"],
                                                enrich_tol=1e-9),
            seed=cfg["seed"])
    except pgd.PgdConvergenceError as exc:
        raise CliError("solver", EXIT_SOLVER, str(exc))
    tensor = field.tensor()                 # (nx, nz)
    xs = field.axes[0].coords[0]
    mid = tensor[:, tensor.shape[1] // 2]   # centerline temperature along x
    plateau = float(mid[-1])

    # material-point temperature history after deposition: the tape drops to
    # the bed plateau within seconds (the steady profile above), holds there
    # while printing continues, then cools to ambient and settles.  The
    # history is sampled at a DMA-like step because the indefinite viscosity
    # ansatz is only stable for implicit steps of that size.
    dt = float(p["history_dt_s"])
    t_hold = p["hold_duration_s"]
    t_cool = p["cool_duration_s"]
    t_end = t_hold + t_cool + p["settle_duration_s"]
    times = np.arange(0.0, t_end + dt / 2, dt)
    temps_hist = np.interp(
        times,
        [0.0, dt, t_hold, t_hold + t_cool, t_end],
        [pconf.t_head, plateau, plateau, pconf.t_inf, pconf.t_inf])
    # eigenstrain datum: the tape is strain-free at deposition temperature
    delta_t = temps_hist - temps_hist[0]
    alpha = core.ExpansionVector(params["alpha_par"], params["alpha_perp"])
    # surrogate feature datum: training used temperature rise above the DMA
    # start (room) temperature, so the print history is fed the same way
    delta_feat = temps_hist - celsius_to_kelvin(cfg["dma1"]["start_temp_C"])
    eps_thermal_axial = params["alpha_par"] * delta_feat

    def _surrogate_rollout(key, command):
        mpath = out / ART[key]
        if not mpath.exists():
            raise _prerequisite_error(mpath, command)
        model = snode.load_model(mpath)
        feats = np.column_stack([delta_feat, times, eps_thermal_axial])
        try:
            return snode.rollout(model, feats, times.size - 1, dt=dt)
        except snode.RolloutDivergenceError as exc:
            raise CliError("solver", EXIT_SOLVER,
                           f"{key} surrogate diverged on the print history: {exc}")

    eps_ini = np.zeros_like(times)
    if p["include_release"]:
        eps_ini = _surrogate_rollout("model_ini", "train-ini")
    eps_crys = np.zeros_like(times)
    if p["include_crystallization"]:
        eps_crys = _surrogate_rollout("model_crys", "train-crys") \
            * _crystallinity_scale(cfg)

    eps0 = micromech.assemble_eps0(alpha, delta_t, eps_ini, eps_crys,
                                   _micro(cfg))
    eta = core.ViscosityTensor(params["eta1"], params["eta2"], params["eta3"])
    try:
        state, x_nodes, width = fem.run_print_mech(
            _mechanical(cfg), eta, eps0, times, geom_print,
            _mesh(p["mech_mesh"]))
    except fem.SingularSystemError as exc:
        raise CliError("solver", EXIT_SOLVER, str(exc))
    fem.export_width_profile(out / ART["width"], x_nodes, width)
    _line_plot(out / "width_profile.svg", x_nodes * 1e3,
               {"predicted width": width * 1e3,
                "nominal": np.full_like(width, geom_print.width * 1e3)},
               "x (mm)", "width (mm)", "deposited tape width")

    recon_line = ""
    dma2_ok = (cfg["dma2"]["csv"] is not None
               or (out / ART["dma2_csv"]).exists())
    if (dma2_ok and (out / ART["model_ini"]).exists()
            and (out / ART["model_crys"]).exists()):
        recon = _reconstruction_check(cfg, params)
        recon_line = f"reconstruction_max_abs_error {recon:.6e}\n"

    summary = out / ART["print_summary"]
    with open(summary, "w") as fh:
        fh.write("# tapesim-print-summary v1\n")
        fh.write(f"nominal_width_mm {geom_print.width * 1e3:.6f}\n")
        fh.write(f"width_min_mm {width.min() * 1e3:.6f}\n")
        fh.write(f"width_mean_mm {width.mean() * 1e3:.6f}\n")
        fh.write(f"width_max_mm {width.max() * 1e3:.6f}\n")
        fh.write(f"plateau_C {kelvin_to_celsius(mid[-1]):.3f}\n")
        fh.write(recon_line)
    return [str(out / ART["width"]), str(summary)]


def _reconstruction_check(cfg, params) -> float:
    """Max |experimental - (simulated + release + crystallization)| on DMA-2."""
    out = _out(cfg)
    model_ini = snode.load_model(out / ART["model_ini"])
    model_crys = snode.load_model(out / ART["model_crys"])
    aligned, sim, temps, cycle, slices = _corrected_experiment(cfg, "dma2",
                                                               params)
    ini_full = _release_on_grid(cfg, model_ini, temps, aligned.times,
                                sim.values, slices[0])
    feats = np.column_stack([temps - temps[0], aligned.times, sim.values])
    # the crystallization surrogate starts from zero at the first approach
    # of the glass transition, exactly as during training
    tg = celsius_to_kelvin(cfg["glass_transition_C"])
    above = np.flatnonzero(temps > tg)
    crys = np.zeros(aligned.times.size)
    if above.size:
        onset = max(int(above[0]) - 2, 0)
        crys[onset:] = snode.rollout(model_crys, feats[onset:],
                                     aligned.times.size - 1 - onset)
    total = sim.values + ini_full + crys
    # the instrument datum is arbitrary; anchor both curves at zero strain
    # at the cycle start before comparing
    measured = aligned.values - aligned.values[0]
    total = total - total[0]
    np.savetxt(out / "reconstruction_dma2.csv",
               np.column_stack([aligned.times, measured, total]),
               delimiter=",", comments="# ",
               header="tapesim-reconstruction v1\ntime_s,experimental,"
                      "reconstructed")
    return float(np.max(np.abs(measured - total)))


def cmd_report(cfg) -> list[str]:
    out = _out(cfg)
    lines = ["# tapesim-report v1"]
    manifest = []

    def grab(key, required_by=None):
        path = out / ART[key]
        if path.exists():
            manifest.append(str(path))
            return path
        if required_by:
            raise _prerequisite_error(path, required_by)
        return None

    fit_path = grab("fit", required_by="fit")
    params = identify.load_fit_result(fit_path)
    lines.append("[fitted parameters]")
    for name, value in params.items():
        lines.append(f"{name} {value:.8e}")
    for key, label in (("ini_metrics", "initial release"),
                       ("crys_metrics", "crystallization")):
        path = grab(key)
        if path:
            lines.append(f"[{label} training]")
            lines.extend(path.read_text().splitlines()[1:])
    path = grab("print_summary")
    if path:
        lines.append("[print prediction]")
        lines.extend(path.read_text().splitlines()[1:])
    for key in ("thermal", "width", "model_ini", "model_crys"):
        grab(key)
    lines.append("[manifest]")
    lines.extend(sorted(manifest))
    report = out / ART["report"]
    report.write_text("\n".join(lines) + "\n")
    return [str(report)]


# ---------------------------------------------------------------------------
# entry point


COMMANDS = {
    "synth": cmd_synth,
    "thermal-dma": cmd_thermal_dma,
    "fit": cmd_fit,
    "train-ini": cmd_train_ini,
    "train-crys": cmd_train_crys,
    "print-sim": cmd_print_sim,
    "report": cmd_report,
}


def main(argv=None) -> int:
    parser = argparse.ArgumentParser(
        prog="tapesim",
        description="Deposited-tape dimensional change prediction pipeline")
    parser.add_argument("command", choices=sorted(COMMANDS))
    parser.add_argument("--config", default=None, help="YAML config file")
    parser.add_argument("--out", default=None, help="output directory")
    parser.add_argument("--seed", type=int, default=None, help="RNG seed")
    args = parser.parse_args(argv)
    try:
        cfg = load_config(args.config, args.out, args.seed)
        written = COMMANDS[args.command](cfg)
    except CliError as exc:
        print(f"tapesim-error: {exc.category}: {exc}", file=sys.stderr)
        return exc.code
    except FileNotFoundError as exc:
        print(f"tapesim-error: data: {exc}", file=sys.stderr)
        return EXIT_DATA
    for path in written:
        print(path)
    return 0


if __name__ == "__main__":
    sys.exit(main())

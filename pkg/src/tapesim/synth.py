"""Synthetic DMA data generation and DMA CSV ingestion.

The raw experimental traces behind the original study are not shipped, so
round-trip tests and pipeline demonstrations run on synthetic data with
known ground truth: a forward Kelvin-Voigt simulation plus a saturating
initial-release term, a crystallization term activated above the glass
transition, the (negative) apparent strain of the fixture steel bars, and
Gaussian noise.

CSV schema (both written and ingested):
    time_s,temperature_C,strain_percent
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .core import (
    ExpansionVector,
    Geometry,
    MechanicalMaterial,
    StrainSeries,
    ThermalCycle,
    ViscosityTensor,
    celsius_to_kelvin,
    kelvin_to_celsius,
    sample_cycle,
)
from .fem import KelvinVoigtSolver, MechConfig

CSV_HEADER = "time_s,temperature_C,strain_percent"


@dataclass(frozen=True)
class SyntheticTruth:
    """Ground-truth parameters behind one synthetic DMA data set."""

    alpha_par: float
    alpha_perp: float
    eta1: float
    eta2: float
    eta3: float
    alpha_steel: float
    release_amplitude: float = 0.0   # signed saturation level of eps_ini
    release_tau: float = 3000.0      # s
    crys_amplitude: float = 0.0      # signed saturation level of eps_crys
    crys_tau: float = 2000.0         # s
    t_glass: float = celsius_to_kelvin(147.0)

    def as_param_dict(self) -> dict:
        return {
            "alpha_par": self.alpha_par, "alpha_perp": self.alpha_perp,
            "eta1": self.eta1, "eta2": self.eta2, "eta3": self.eta3,
            "alpha_steel": self.alpha_steel,
        }


def release_series(times: np.ndarray, amplitude: float,
                   tau: float) -> np.ndarray:
    """Saturating first-heating release: amplitude * (1 - exp(-t/tau))."""
    return amplitude * (1.0 - np.exp(-np.asarray(times, float) / tau))


def crystallization_series(times: np.ndarray, temps: np.ndarray,
                           amplitude: float, tau: float,
                           t_glass: float) -> np.ndarray:
    """Crystallization strain growing towards `amplitude` while T > T_g.

    ds/dt = (1 - s)/tau above the glass transition, frozen below it;
    captures the onset-and-saturate shape of cold crystallization.
    """
    times = np.asarray(times, float)
    temps = np.asarray(temps, float)
    s = np.zeros_like(times)
    for i in range(1, times.size):
        dt = times[i] - times[i - 1]
        if temps[i] > t_glass:
            s[i] = s[i - 1] + dt * (1.0 - s[i - 1]) / tau
        else:
            s[i] = s[i - 1]
    return amplitude * s


def simulate_physical(truth: SyntheticTruth, cycle: ThermalCycle,
                      mech: MechanicalMaterial, geom: Geometry,
                      cfg: MechConfig = MechConfig(),
                      solver: KelvinVoigtSolver | None = None):
    """Forward viscoelastic strain for the ground-truth parameters.

    Returns (times, temps, eps_sim) on the cycle's sampling grid.
    """
    times, temps = sample_cycle(cycle)
    eta = ViscosityTensor(truth.eta1, truth.eta2, truth.eta3)
    if solver is None:
        solver = KelvinVoigtSolver(mech, eta, geom, cfg, constraints="dma")
    alpha = ExpansionVector(truth.alpha_par, truth.alpha_perp)
    eps0 = np.outer(temps - temps[0], alpha.as_voigt())
    state = solver.solve_history(times, eps0)
    return times, temps, solver.tip_strain(state)


def generate_synthetic(truth: SyntheticTruth, cycle: ThermalCycle,
                       mech: MechanicalMaterial, geom: Geometry,
                       noise_sigma: float = 0.0, seed: int = 0,
                       cfg: MechConfig = MechConfig()):
    """Synthetic raw DMA measurement with known ground truth.

    Returns (times, temps, raw_strain, components) where components is a
    dict of the individual contributions (for test assertions).
    """
    times, temps, eps_sim = simulate_physical(truth, cycle, mech, geom, cfg)
    eps_ini = release_series(times, truth.release_amplitude, truth.release_tau)
    eps_crys = crystallization_series(times, temps, truth.crys_amplitude,
                                      truth.crys_tau, truth.t_glass)
    fixture = -truth.alpha_steel * (temps - temps[0])
    rng = np.random.default_rng(seed)
    noise = noise_sigma * rng.standard_normal(times.size) if noise_sigma else 0.0
    raw = eps_sim + eps_ini + eps_crys + fixture + noise
    components = {
        "simulated": eps_sim, "release": eps_ini,
        "crystallization": eps_crys, "fixture": fixture,
    }
    return times, temps, raw, components


def write_dma_csv(path, times: np.ndarray, temps: np.ndarray,
                  strain: np.ndarray):
    """Write a DMA trace in the ingestion schema (strain in percent)."""
    with open(path, "w") as fh:
        fh.write(CSV_HEADER + "\n")
        for t, temp, eps in zip(times, temps, strain):
            fh.write(f"{t:.12g},{kelvin_to_celsius(temp):.12g},"
                     f"{100.0 * eps:.12g}\n")


class DmaCsvError(ValueError):
    """Malformed DMA CSV input."""


def ingest_dma(path) -> tuple[StrainSeries, np.ndarray]:
    """Load a DMA CSV; returns (strain series in SI, temperatures in K)."""
    with open(path) as fh:
        header = fh.readline().strip()
        if header != CSV_HEADER:
            raise DmaCsvError(
                f"unexpected header {header!r}; expected {CSV_HEADER!r}")
        times, temps, strains = [], [], []
        for lineno, line in enumerate(fh, start=2):
            if not line.strip():
                continue
            parts = line.split(",")
            if len(parts) != 3:
                raise DmaCsvError(f"line {lineno}: expected 3 columns")
            try:
                t, temp_c, pct = map(float, parts)
            except ValueError as exc:
                raise DmaCsvError(f"line {lineno}: {exc}") from exc
            if times and t <= times[-1]:
                raise DmaCsvError(f"line {lineno}: non-monotone time {t}")
            times.append(t)
            temps.append(celsius_to_kelvin(temp_c))
            strains.append(pct / 100.0)
    series = StrainSeries(np.array(times), np.array(strains),
                          label="experimental")
    return series, np.array(temps)

"""Fiber/resin micromechanics and DSC crystallinity scaling.

Converts axial strain contributions measured on the tape into full
eigenstrain vectors: the resin's intrinsic (spherical) transformation
strain is back-computed from the measured axial tape strain using a
rule-of-mixtures equilibrium in the fiber direction, then propagated to
the lateral directions.
"""

from __future__ import annotations

import csv
import warnings
from dataclasses import dataclass

import numpy as np

from .core import ExpansionVector, celsius_to_kelvin


@dataclass(frozen=True)
class Micro:
    """Constituent properties: fiber modulus, resin modulus and Poisson
    ratio, fiber volume fraction."""

    e_f: float
    e_r: float
    nu_r: float
    v_f: float

    def __post_init__(self):
        if not (0.0 < self.v_f < 1.0):
            raise ValueError("fiber volume fraction must lie in (0, 1)")
        if self.e_f <= 0.0 or self.e_r <= 0.0:
            raise ValueError("constituent moduli must be > 0")


@dataclass(frozen=True)
class DscTrace:
    """DSC heat-flow samples (W/g) on a monotone temperature ramp (K)."""

    temperature: np.ndarray
    heat_flow: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "temperature", np.asarray(self.temperature, float))
        object.__setattr__(self, "heat_flow", np.asarray(self.heat_flow, float))
        if self.temperature.shape != self.heat_flow.shape:
            raise ValueError("temperature and heat flow arrays must match")
        if np.any(np.diff(self.temperature) <= 0.0):
            raise ValueError("temperature must be strictly monotone along the ramp")


def read_dsc_csv(path) -> DscTrace:
    """Load a DSC trace CSV with header `temperature_C,heat_flow_W_per_g`."""
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader)
        if [h.strip() for h in header[:2]] != ["temperature_C", "heat_flow_W_per_g"]:
            raise ValueError(f"unexpected DSC header {header!r}")
        rows = [(float(r[0]), float(r[1])) for r in reader if r]
    temp_c, hf = np.array(rows).T
    return DscTrace(celsius_to_kelvin(temp_c), hf)


def crystallinity_fraction(dh_c: float, dh_final: float, lam: float = 1.0) -> float:
    """Crystallized fraction from a partial enthalpy release dh_c relative
    to the total release lam * dh_final (J/g)."""
    if dh_final <= 0.0 or lam <= 0.0:
        raise ValueError("dh_final and lam must be > 0")
    x_c = dh_c / (lam * dh_final)
    if not (0.0 <= x_c <= 1.0):
        warnings.warn(f"crystallinity fraction {x_c:.3g} outside [0, 1]; clamping",
                      stacklevel=2)
        x_c = min(max(x_c, 0.0), 1.0)
    return x_c


def integrate_enthalpy(trace: DscTrace, t_lo: float, t_hi: float,
                       heating_rate: float) -> float:
    """Enthalpy (J/g) between two ramp temperatures (K).

    Heat flow is baseline-subtracted (linear between the bound endpoints)
    and integrated over time, using the constant heating rate (K/s) to map
    temperature to time.
    """
    temp = trace.temperature
    if t_lo < temp[0] or t_hi > temp[-1] or t_lo >= t_hi:
        raise ValueError("integration bounds outside the trace range")
    if heating_rate <= 0.0:
        raise ValueError("heating rate must be > 0")
    grid = np.unique(np.concatenate((temp[(temp > t_lo) & (temp < t_hi)],
                                     [t_lo, t_hi])))
    hf = np.interp(grid, temp, trace.heat_flow)
    baseline = np.interp(grid, [t_lo, t_hi], [hf[0], hf[-1]])
    return float(np.trapezoid(hf - baseline, grid) / heating_rate)


def scale_to_final(eps_crys_c: float, x_c: float) -> float:
    """Extrapolate a partially-crystallized strain to full crystallization."""
    if not (0.0 < x_c <= 1.0):
        raise ValueError("crystallinity fraction must lie in (0, 1]")
    return eps_crys_c / x_c


def intrinsic_resin_strain(y: float, micro: Micro) -> float:
    """Intrinsic resin transformation strain X reproducing a measured axial
    tape strain y under fiber/resin iso-strain equilibrium."""
    return y * (1.0 + micro.e_f * micro.v_f / (micro.e_r * (1.0 - micro.v_f)))


def axial_stresses(y: float, micro: Micro) -> tuple[float, float]:
    """Constituent axial stresses (fiber, resin) for measured tape strain y.

    The tape carries no net axial load, so the resin stress balances the
    fiber stress through the volume fractions.
    """
    sig_f = y * micro.e_f
    sig_r = -micro.v_f * sig_f / (1.0 - micro.v_f)
    return sig_f, sig_r


def lateral_strain(y: float, micro: Micro) -> float:
    """Lateral tape strain (identical for y and z) induced by an axial
    transformation strain whose measured tape value is y.

    The resin strain is the spherical intrinsic strain X minus the Poisson
    effect of its axial stress; the fibers contribute only their elastic
    Poisson response.
    """
    x = intrinsic_resin_strain(y, micro)
    sig_f, sig_r = axial_stresses(y, micro)
    eps_resin = x - micro.nu_r * sig_r / micro.e_r
    eps_fiber = -sig_f / micro.e_f
    return (1.0 - micro.v_f) * eps_resin + micro.v_f * eps_fiber


def eigenstrain_vector(axial: float, micro: Micro) -> np.ndarray:
    """(xx, yy, zz) eigenstrain triple for one axial contribution."""
    lat = lateral_strain(axial, micro)
    return np.array([axial, lat, lat])


def assemble_eps0(alpha: ExpansionVector, delta_t: np.ndarray,
                  eps_ini_axial: np.ndarray, eps_crys_axial: np.ndarray,
                  micro: Micro) -> np.ndarray:
    """Total eigenstrain series, shape (n, 3): thermal expansion plus the
    micromechanics-expanded release and crystallization contributions."""
    delta_t = np.asarray(delta_t, float)
    eps_ini_axial = np.asarray(eps_ini_axial, float)
    eps_crys_axial = np.asarray(eps_crys_axial, float)
    if not (delta_t.shape == eps_ini_axial.shape == eps_crys_axial.shape):
        raise ValueError("contribution series must share one time grid")
    thermal = np.outer(delta_t, [alpha.alpha_par, alpha.alpha_perp, alpha.alpha_perp])
    lat_ini = lateral_strain(1.0, micro) * eps_ini_axial
    lat_crys = lateral_strain(1.0, micro) * eps_crys_axial
    out = thermal.copy()
    out[:, 0] += eps_ini_axial + eps_crys_axial
    out[:, 1] += lat_ini + lat_crys
    out[:, 2] += lat_ini + lat_crys
    return out

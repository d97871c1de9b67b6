"""Shared domain types, unit conventions and constitutive-tensor assembly.

All quantities are strict SI internally (K, s, m, Pa).  Celsius, minutes and
percent only appear at ingestion boundaries; use the conversion helpers here.

Voigt ordering is fixed as (xx, yy, zz, yz, xz, xy) with engineering shear
strains.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass, field

import numpy as np

KELVIN_OFFSET = 273.15


def celsius_to_kelvin(t_c):
    return np.asarray(t_c, dtype=float) + KELVIN_OFFSET


def kelvin_to_celsius(t_k):
    return np.asarray(t_k, dtype=float) - KELVIN_OFFSET


def per_minute_to_per_second(rate):
    return float(rate) / 60.0


class SingularStiffnessError(np.linalg.LinAlgError):
    """Compliance matrix could not be inverted to a stiffness matrix."""


@dataclass(frozen=True)
class Geometry:
    """Tape dimensions in meters: length, width, thickness."""

    length: float
    width: float
    thickness: float

    def __post_init__(self):
        if min(self.length, self.width, self.thickness) <= 0.0:
            raise ValueError("all tape dimensions must be strictly positive")
        if not (self.thickness < self.width < self.length):
            warnings.warn(
                "geometry is not tape-like (expected thickness < width < length)",
                stacklevel=2,
            )


@dataclass(frozen=True)
class ThermalMaterial:
    """Homogenized thermal properties of the prepreg tape.

    k_par / k_perp are the fiber-parallel and transverse conductivities
    (W/m.K), h_air the convection coefficient with ambient air (W/m^2.K)
    and t0 the initial temperature (K).
    """

    k_par: float
    k_perp: float
    rho: float
    c_p: float
    h_air: float
    t0: float

    def __post_init__(self):
        for name in ("k_par", "k_perp", "rho", "c_p", "h_air"):
            if getattr(self, name) <= 0.0:
                raise ValueError(f"{name} must be > 0")

    @property
    def diffusivity_par(self) -> float:
        return self.k_par / (self.rho * self.c_p)


@dataclass(frozen=True)
class MechanicalMaterial:
    """Orthotropic elastic constants of the tape (moduli in Pa).

    Only the independent constants are stored; nu21, nu31 and nu32 follow
    from the reciprocity relations nu21 = nu12*E_perp/E_par,
    nu31 = nu13*E_perp/E_par and nu32 = nu23.
    """

    e_par: float
    e_perp: float
    nu12: float
    nu13: float
    nu23: float
    g_nt: float
    g_tt: float

    def __post_init__(self):
        for name in ("e_par", "e_perp", "g_nt", "g_tt"):
            if getattr(self, name) <= 0.0:
                raise ValueError(f"{name} must be > 0")
        for name in ("nu12", "nu13", "nu23"):
            nu = getattr(self, name)
            if not (0.0 < nu < 0.5):
                raise ValueError(f"{name} must lie in (0, 0.5)")

    @property
    def nu21(self) -> float:
        return self.nu12 * self.e_perp / self.e_par

    @property
    def nu31(self) -> float:
        return self.nu13 * self.e_perp / self.e_par

    @property
    def nu32(self) -> float:
        return self.nu23


@dataclass(frozen=True)
class ViscosityTensor:
    """The three independent entries of the orthotropic viscous tensor (Pa.s).

    The fiber direction is purely elastic, so the (1,1) entry of the 6x6
    assembly is zero, as is the whole shear block.
    """

    eta1: float
    eta2: float
    eta3: float

    def __post_init__(self):
        for name in ("eta1", "eta2", "eta3"):
            v = getattr(self, name)
            if not np.isfinite(v) or v < 0.0:
                raise ValueError(f"{name} must be finite and >= 0")


@dataclass(frozen=True)
class ExpansionVector:
    """Thermal expansion coefficients (1/K); axial value may be slightly
    negative for carbon-fiber dominated tapes."""

    alpha_par: float
    alpha_perp: float

    def __post_init__(self):
        if not (np.isfinite(self.alpha_par) and np.isfinite(self.alpha_perp)):
            raise ValueError("expansion coefficients must be finite")

    def as_voigt(self) -> np.ndarray:
        return np.array(
            [self.alpha_par, self.alpha_perp, self.alpha_perp, 0.0, 0.0, 0.0]
        )


@dataclass(frozen=True)
class Stage:
    """One stage of an imposed-temperature program.

    kind is "heat", "cool" or "soak".  Ramps carry a rate (K/s, positive)
    and a target (K); soaks carry a duration (s).
    """

    kind: str
    rate: float | None = None
    duration: float | None = None
    target: float | None = None

    def __post_init__(self):
        if self.kind not in ("heat", "cool", "soak"):
            raise ValueError(f"unknown stage kind {self.kind!r}")
        if self.kind == "soak":
            if self.duration is None or self.duration <= 0.0:
                raise ValueError("soak stage needs a positive duration")
        else:
            if self.rate is None or self.rate <= 0.0:
                raise ValueError("ramp stage needs a positive rate")
            if self.target is None:
                raise ValueError("ramp stage needs a target temperature")


@dataclass(frozen=True)
class ThermalCycle:
    """Piecewise-linear imposed ambient temperature program.

    start_temp is the temperature at t=0 (K); dt the sampling step (s).
    """

    start_temp: float
    stages: tuple[Stage, ...]
    dt: float

    def __post_init__(self):
        if self.dt <= 0.0:
            raise ValueError("sampling step dt must be > 0")
        # validate ramp directions against the running temperature
        t_cur = self.start_temp
        for st in self.stages:
            if st.kind == "heat" and st.target <= t_cur:
                raise ValueError("heat stage target below current temperature")
            if st.kind == "cool" and st.target >= t_cur:
                raise ValueError("cool stage target above current temperature")
            if st.kind != "soak":
                t_cur = st.target

    def breakpoints(self) -> tuple[np.ndarray, np.ndarray]:
        """Stage boundary times and temperatures, starting at (0, start_temp)."""
        times = [0.0]
        temps = [self.start_temp]
        for st in self.stages:
            if st.kind == "soak":
                times.append(times[-1] + st.duration)
                temps.append(temps[-1])
            else:
                dur = abs(st.target - temps[-1]) / st.rate
                times.append(times[-1] + dur)
                temps.append(st.target)
        return np.array(times), np.array(temps)

    @property
    def end_time(self) -> float:
        return float(self.breakpoints()[0][-1])

    def temperature(self, t) -> np.ndarray:
        """Piecewise-linear ambient temperature at time(s) t (K)."""
        bt, bT = self.breakpoints()
        return np.interp(np.asarray(t, dtype=float), bt, bT)


@dataclass(frozen=True)
class StrainSeries:
    """Time-stamped dimensionless strain trace with a provenance label."""

    times: np.ndarray
    values: np.ndarray
    label: str = ""

    def __post_init__(self):
        object.__setattr__(self, "times", np.asarray(self.times, dtype=float))
        object.__setattr__(self, "values", np.asarray(self.values, dtype=float))
        if self.times.shape != self.values.shape or self.times.ndim != 1:
            raise ValueError("times and values must be 1-D arrays of equal length")
        if self.times.size > 1 and np.any(np.diff(self.times) <= 0.0):
            raise ValueError("times must be strictly increasing")

    def __len__(self):
        return self.times.size

    def with_values(self, values, label=None) -> "StrainSeries":
        return StrainSeries(self.times, values, self.label if label is None else label)


@dataclass(frozen=True)
class MaterialCard:
    """Complete material description for one prepreg tape."""

    thermal: ThermalMaterial
    mechanical: MechanicalMaterial
    viscosity: ViscosityTensor
    expansion: ExpansionVector


def build_compliance(mat: MechanicalMaterial) -> np.ndarray:
    """6x6 orthotropic compliance matrix (1/Pa), Voigt order (xx,yy,zz,yz,xz,xy)."""
    s = np.zeros((6, 6))
    s[0, 0] = 1.0 / mat.e_par
    s[1, 1] = 1.0 / mat.e_perp
    s[2, 2] = 1.0 / mat.e_perp
    s[0, 1] = -mat.nu21 / mat.e_perp
    s[0, 2] = -mat.nu31 / mat.e_perp
    s[1, 0] = -mat.nu12 / mat.e_par
    s[2, 0] = -mat.nu13 / mat.e_par
    s[1, 2] = -mat.nu32 / mat.e_perp
    s[2, 1] = -mat.nu23 / mat.e_perp
    s[3, 3] = 1.0 / mat.g_tt
    s[4, 4] = 1.0 / mat.g_nt
    s[5, 5] = 1.0 / mat.g_nt
    return s


def build_stiffness(mat: MechanicalMaterial) -> tuple[np.ndarray, float]:
    """Invert the compliance to a stiffness matrix.

    The result is symmetrized as (C + C^T)/2; the returned float is the
    relative asymmetry that was removed (diagnostic, normally ~1e-16).
    Raises SingularStiffnessError if the compliance is singular.
    """
    s = build_compliance(mat)
    try:
        c = np.linalg.inv(s)
    except np.linalg.LinAlgError as exc:
        raise SingularStiffnessError("compliance matrix is singular") from exc
    asym = float(np.max(np.abs(c - c.T)) / np.max(np.abs(c)))
    c_sym = 0.5 * (c + c.T)
    eig = np.linalg.eigvalsh(c_sym)
    if eig.min() <= 0.0:
        raise SingularStiffnessError("stiffness matrix is not positive definite")
    return c_sym, asym


def build_viscosity(eta1: float, eta2: float, eta3: float) -> np.ndarray:
    """6x6 orthotropic viscous tensor (Pa.s).

    Fiber direction elastic (zero (1,1) entry), normal/normal couplings
    eta1, transverse normals eta2, transverse coupling eta3, shear block
    zero.
    """
    for v in (eta1, eta2, eta3):
        if not np.isfinite(v) or v < 0.0:
            raise ValueError("viscosities must be finite and >= 0")
    eta = np.zeros((6, 6))
    eta[0, 1] = eta[0, 2] = eta[1, 0] = eta[2, 0] = eta1
    eta[1, 1] = eta[2, 2] = eta2
    eta[1, 2] = eta[2, 1] = eta3
    return eta


def sample_cycle(cycle: ThermalCycle) -> tuple[np.ndarray, np.ndarray]:
    """Sample the imposed temperature program at the cycle's step.

    Each stage is sampled from its own start so stage boundaries are hit
    exactly (no accumulation drift); the returned grid is therefore only
    approximately uniform when stage durations are not multiples of dt.
    """
    if not cycle.stages:
        raise ValueError("cycle has no stages")
    bt, bT = cycle.breakpoints()
    times = [np.array([0.0])]
    for k in range(len(bt) - 1):
        t0, t1 = bt[k], bt[k + 1]
        inner = np.arange(t0 + cycle.dt, t1, cycle.dt)
        # drop an inner point that would all but coincide with the boundary
        if inner.size and t1 - inner[-1] < 1e-9 * max(t1, 1.0):
            inner = inner[:-1]
        times.append(inner)
        times.append(np.array([t1]))
    t = np.concatenate(times)
    return t, np.interp(t, bt, bT)


def dma_cycle(test_temp_c: float, start_temp_c: float = 25.0, dt: float = 60.0,
              rate_k_per_min: float = 0.5) -> ThermalCycle:
    """Standard four-step iso-stress DMA program.

    Heat to the test temperature, soak 60 min, cool to 30 C, soak 180 min,
    then repeat the heat/soak/cool/soak sequence once more.
    """
    rate = per_minute_to_per_second(rate_k_per_min)
    hot = celsius_to_kelvin(test_temp_c)
    cold = celsius_to_kelvin(30.0)
    stages = (
        Stage("heat", rate=rate, target=hot),
        Stage("soak", duration=60 * 60.0),
        Stage("cool", rate=rate, target=cold),
        Stage("soak", duration=180 * 60.0),
        Stage("heat", rate=rate, target=hot),
        Stage("soak", duration=60 * 60.0),
        Stage("cool", rate=rate, target=cold),
        Stage("soak", duration=180 * 60.0),
    )
    return ThermalCycle(celsius_to_kelvin(start_temp_c), stages, dt)


def dma_stage_bounds(cycle: ThermalCycle, times: np.ndarray) -> list[slice]:
    """Slices of `times` covering the four DMA stages.

    A "stage" here is a ramp together with the soak that follows it, i.e.
    heating-1, cooling-1, heating-2, cooling-2.  Boundaries are assigned by
    the stage breakpoint times.
    """
    bt, _ = cycle.breakpoints()
    if len(cycle.stages) % 2 != 0:
        raise ValueError("expected ramp/soak stage pairs")
    edges = bt[::2]  # start of each ramp, plus the final time
    idx = np.searchsorted(times, edges[1:-1], side="left")
    bounds = np.concatenate(([0], idx, [len(times)]))
    return [slice(int(a), int(b)) for a, b in zip(bounds[:-1], bounds[1:])]


# Homogenized tape properties used throughout the examples and defaults
# (manufacturer datasheet values for an LM-PAEK / carbon fiber prepreg).
def default_thermal() -> ThermalMaterial:
    return ThermalMaterial(
        k_par=14.48, k_perp=1.52, rho=1078.0, c_p=1054.0, h_air=25.0,
        t0=celsius_to_kelvin(25.0),
    )


def default_mechanical() -> MechanicalMaterial:
    return MechanicalMaterial(
        e_par=140e9, e_perp=7.78e9, nu12=0.293, nu13=0.293, nu23=0.2794,
        g_nt=4.4e9, g_tt=4.4e9,
    )


def default_geometry() -> Geometry:
    return Geometry(length=20e-3, width=6.35e-3, thickness=0.177e-3)

"""Separated-representation (greedy rank-one) thermal solvers.

Two problems are covered:

* the transient heat equation over a tape during a DMA thermal cycle,
  solved in the separated form T(x,y,z,t) = sum_i F_i(x,y) Z_i(z) G_i(t)
  with Robin (convection) conditions on every face; and
* the steady convection-diffusion equation in the deposition-head frame,
  solved as T(x,z) = sum_i X_i(x) Z_i(z) with SUPG stabilization of the
  transport term.

Both are driven by one algebraic engine: the discrete problem is written
as sum_k (A_k^1 x A_k^2 x ...) u = sum_j (b_j^1 x b_j^2 x ...), and modes
are enriched greedily, each computed by a fixed-point alternation over the
factors that minimizes the discrete residual norm.  Minimizing the
residual (rather than a Galerkin projection) keeps every factor solve
symmetric positive definite and makes the residual norm non-increasing
across modes by construction.

Factor discretizations: bilinear quadrilaterals in (x,y), linear elements
in z; the time factor uses an implicit (backward-difference) operator,
i.e. upwinding in time.
"""

from __future__ import annotations

import math
import warnings
from dataclasses import dataclass, field

import numpy as np
import scipy.sparse as sp
import scipy.sparse.linalg as spla

from .core import Geometry, ThermalCycle, ThermalMaterial


class PgdConvergenceError(RuntimeError):
    """Fixed-point enrichment failed to converge on every restart."""


class OutOfDomainError(ValueError):
    """Evaluation point outside the field's domain."""


@dataclass(frozen=True)
class PgdConfig:
    """Discretization and stopping parameters for the separated solvers."""

    nx: int = 12
    ny: int = 6
    nz: int = 21
    nt: int = 400
    fp_tol: float = 1e-8
    max_sweeps: int = 25
    enrich_tol: float = 1e-6
    max_modes: int = 50

    def __post_init__(self):
        if self.nz < 3:
            raise ValueError("nz must be >= 3")
        if min(self.fp_tol, self.enrich_tol) <= 0.0:
            raise ValueError("tolerances must be > 0")


@dataclass(frozen=True)
class PrintConfig:
    """Operating point of the deposition (printing) thermal problem."""

    v_deposition: float
    t_base: float
    t_head: float
    t_inf: float
    h_air: float
    h_base: float
    geom: Geometry

    def __post_init__(self):
        if self.v_deposition <= 0.0:
            raise ValueError("deposition velocity must be > 0")
        for name in ("t_base", "t_head", "t_inf"):
            if getattr(self, name) <= 0.0:
                raise ValueError(f"{name} must be > 0 K")


# ---------------------------------------------------------------------------
# 1D finite-element building blocks
# ---------------------------------------------------------------------------

def mass_1d(n: int, h: float, lumped: bool = False) -> sp.csr_matrix:
    if lumped:
        d = np.full(n, h)
        d[0] = d[-1] = h / 2.0
        return sp.diags(d).tocsr()
    main = np.full(n, 4.0)
    main[0] = main[-1] = 2.0
    off = np.ones(n - 1)
    return (h / 6.0) * sp.diags([off, main, off], [-1, 0, 1]).tocsr()


def stiffness_1d(n: int, h: float) -> sp.csr_matrix:
    main = np.full(n, 2.0)
    main[0] = main[-1] = 1.0
    off = -np.ones(n - 1)
    return (1.0 / h) * sp.diags([off, main, off], [-1, 0, 1]).tocsr()


def convection_1d(n: int, h: float) -> sp.csr_matrix:
    """Galerkin first-derivative matrix: C[i,j] = int phi_i phi_j' dx."""
    c = sp.lil_matrix((n, n))
    # element contribution [[-1, 1], [-1, 1]] / 2 on nodes (e, e+1)
    for e in range(n - 1):
        c[e, e] += -0.5
        c[e, e + 1] += 0.5
        c[e + 1, e] += -0.5
        c[e + 1, e + 1] += 0.5
    return c.tocsr()


def end_mass(n: int, left: float = 0.0, right: float = 0.0) -> sp.csr_matrix:
    d = np.zeros(n)
    d[0], d[-1] = left, right
    return sp.diags(d).tocsr()


# ---------------------------------------------------------------------------
# Separated field container
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class Axis:
    """One factor axis: kind "xy" (bilinear in-plane factor) or a 1-D
    coordinate ("x", "z" or "t")."""

    kind: str
    coords: tuple[np.ndarray, ...]

    @property
    def size(self) -> int:
        n = 1
        for c in self.coords:
            n *= len(c)
        return n


class SeparatedField:
    """Rank-n sum of factored modes over a list of axes."""

    def __init__(self, axes: list[Axis], modes: list[list[np.ndarray]],
                 diagnostics: dict | None = None):
        for m in modes:
            if len(m) != len(axes):
                raise ValueError("each mode needs one factor per axis")
            for ax, f in zip(axes, m):
                if f.shape != (ax.size,):
                    raise ValueError("factor length does not match its axis")
        self.axes = list(axes)
        self.modes = [list(m) for m in modes]
        self.diagnostics = diagnostics or {}

    @property
    def rank(self) -> int:
        return len(self.modes)

    def _factor_value(self, axis: Axis, factor: np.ndarray, coords: dict):
        if axis.kind == "xy":
            xs, ys = axis.coords
            x, y = coords["x"], coords["y"]
            if not (xs[0] - 1e-12 <= x <= xs[-1] + 1e-12
                    and ys[0] - 1e-12 <= y <= ys[-1] + 1e-12):
                raise OutOfDomainError(f"(x, y)=({x}, {y}) outside domain")
            grid = factor.reshape(len(xs), len(ys))
            ix = min(np.searchsorted(xs, x) - 1, len(xs) - 2)
            iy = min(np.searchsorted(ys, y) - 1, len(ys) - 2)
            ix, iy = max(ix, 0), max(iy, 0)
            tx = (x - xs[ix]) / (xs[ix + 1] - xs[ix])
            ty = (y - ys[iy]) / (ys[iy + 1] - ys[iy])
            return ((1 - tx) * (1 - ty) * grid[ix, iy]
                    + tx * (1 - ty) * grid[ix + 1, iy]
                    + (1 - tx) * ty * grid[ix, iy + 1]
                    + tx * ty * grid[ix + 1, iy + 1])
        (cs,) = axis.coords
        v = coords[axis.kind]
        if not (cs[0] - 1e-12 <= v <= cs[-1] + 1e-12):
            raise OutOfDomainError(f"{axis.kind}={v} outside domain")
        return float(np.interp(v, cs, factor))

    def evaluate(self, **coords) -> float:
        """Multilinear evaluation, e.g. field.evaluate(x=..., y=..., z=..., t=...)."""
        total = 0.0
        for mode in self.modes:
            prod = 1.0
            for axis, factor in zip(self.axes, mode):
                prod *= self._factor_value(axis, factor, coords)
            total += prod
        return total

    def tensor(self) -> np.ndarray:
        """Full nodal tensor (one dimension per axis; use on small grids)."""
        shape = tuple(ax.size for ax in self.axes)
        out = np.zeros(shape)
        for mode in self.modes:
            term = mode[0]
            for f in mode[1:]:
                term = np.multiply.outer(term, f)
            out += term
        return out

    def export_csv(self, prefix: str):
        """One CSV per factor axis: coordinate columns then mode columns."""
        for d, axis in enumerate(self.axes):
            if axis.kind == "xy":
                xs, ys = axis.coords
                xg, yg = np.meshgrid(xs, ys, indexing="ij")
                coords = np.column_stack([xg.ravel(), yg.ravel()])
                names = "x_m,y_m"
            else:
                coords = axis.coords[0][:, None]
                names = {"x": "x_m", "z": "z_m", "t": "t_s"}[axis.kind]
            cols = np.column_stack([coords] + [m[d] for m in self.modes])
            header = (f"tapesim-separated-field v1 axis={axis.kind}\n"
                      + names + "," + ",".join(
                          f"mode{i}" for i in range(self.rank)))
            np.savetxt(f"{prefix}_{axis.kind}.csv", cols, delimiter=",",
                       header=header, comments="# ")


# ---------------------------------------------------------------------------
# Greedy least-squares rank-one engine
# ---------------------------------------------------------------------------

def _residual_gram(dims, terms):
    """Residual norm from its separated terms: ||sum_t c_t (x)_d t_d||."""
    if not terms:
        return 0.0
    total = None
    for d in range(dims):
        mat = np.column_stack([t[d] for t in terms])
        g = mat.T @ mat
        total = g if total is None else total * g
    return math.sqrt(max(float(total.sum()), 0.0))


def _residual_terms(op_terms, rhs_terms, modes):
    terms = [list(b) for b in rhs_terms]
    for mode in modes:
        for ops in op_terms:
            vec = [op @ f for op, f in zip(ops, mode)]
            vec[0] = -vec[0]
            terms.append(vec)
    return terms


def fixed_point_enrich(op_terms, rhs_terms, modes, *, fp_tol=1e-8,
                       max_sweeps=25, rng=None):
    """Compute one new rank-one mode by alternating factor solves.

    op_terms: list of K tuples of factor operators (one matrix per axis);
    rhs_terms: list of J tuples of factor vectors; modes: current modes
    (the new mode is fitted to the residual they leave).  Returns
    (factors, info) where info carries the amplitude history and a
    `converged` flag; the factors are normalized with the amplitude folded
    into the last (time-like) factor.
    """
    dims = len(op_terms[0])
    sizes = [op_terms[0][d].shape[0] for d in range(dims)]
    rng = np.random.default_rng(0) if rng is None else rng
    res_terms = _residual_terms(op_terms, rhs_terms, modes)
    if _residual_gram(dims, res_terms) == 0.0:
        # nothing left to fit: a zero mode is the exact minimizer
        zero = [np.zeros(n) for n in sizes]
        return zero, {"amplitudes": [0.0], "converged": True}
    res_mats = [np.column_stack([t[d] for t in res_terms]) for d in range(dims)]

    # gram products of factor operators, reused across sweeps
    grams = [[[(op_terms[k][d].T @ op_terms[l][d]).tocsr()
               for l in range(len(op_terms))]
              for k in range(len(op_terms))] for d in range(dims)]

    y = [np.ones(n) + 0.01 * rng.standard_normal(n) for n in sizes]
    amp_prev = None
    amps = []
    converged = False
    for _ in range(max_sweeps):
        for d in range(dims):
            w = [[op_terms[k][dd] @ y[dd] for dd in range(dims)]
                 for k in range(len(op_terms))]
            m = None
            for k in range(len(op_terms)):
                for l in range(len(op_terms)):
                    coef = 1.0
                    for dd in range(dims):
                        if dd != d:
                            coef *= float(w[k][dd] @ w[l][dd])
                    m = coef * grams[d][k][l] if m is None else m + coef * grams[d][k][l]
            rhs = np.zeros(sizes[d])
            for k in range(len(op_terms)):
                gamma = np.ones(res_mats[0].shape[1])
                for dd in range(dims):
                    if dd != d:
                        gamma *= w[k][dd] @ res_mats[dd]
                rhs += op_terms[k][d].T @ (res_mats[d] @ gamma)
            y[d] = spla.spsolve(m.tocsc(), rhs)
        amp = float(np.prod([np.linalg.norm(f) for f in y]))
        amps.append(amp)
        if amp == 0.0:
            converged = True
            break
        if amp_prev is not None and abs(amp - amp_prev) <= fp_tol * amp:
            converged = True
            break
        amp_prev = amp
    # normalize: unit factors except the last, amplitude into the last
    scale = 1.0
    for d in range(dims - 1):
        nrm = np.linalg.norm(y[d])
        if nrm > 0:
            y[d] = y[d] / nrm
            scale *= nrm
    y[-1] = y[-1] * scale
    return y, {"amplitudes": amps, "converged": converged}


def greedy_separated_solve(op_terms, rhs_terms, *, fp_tol=1e-8, max_sweeps=25,
                           enrich_tol=1e-6, max_modes=50, restarts=2,
                           update_last_factor=True, seed=0):
    """Greedy rank-one solution of a separated linear system.

    After each enrichment the last (time-like) factors of all modes are
    jointly re-solved against the full right-hand side, which sharply
    accelerates convergence of the greedy sequence.  Returns
    (modes, diagnostics).
    """
    dims = len(op_terms[0])
    rng = np.random.default_rng(seed)
    modes: list[list[np.ndarray]] = []
    b_norm = _residual_gram(dims, [list(b) for b in rhs_terms])
    res_hist = [b_norm]
    first_amp = None
    for _ in range(max_modes):
        best = None
        for attempt in range(restarts + 1):
            factors, info = fixed_point_enrich(
                op_terms, rhs_terms, modes, fp_tol=fp_tol,
                max_sweeps=max_sweeps, rng=rng)
            amp = np.linalg.norm(factors[-1])
            if best is None or amp > best[1]:
                best = (factors, amp, info)
            if info["converged"]:
                best = (factors, amp, info)
                break
        factors, amp, info = best
        if first_amp is None:
            first_amp = amp if amp > 0 else 1.0
        if amp < enrich_tol * first_amp:
            break
        modes.append(factors)
        if update_last_factor:
            _joint_update_last(op_terms, rhs_terms, modes)
        res = _residual_gram(dims, _residual_terms(op_terms, rhs_terms, modes))
        if not info["converged"] and res >= res_hist[-1] * (1.0 - 1e-12):
            # every restart stagnated; an error only if the residual is
            # still far from the numerical floor
            modes.pop()
            if b_norm > 0 and res_hist[-1] / b_norm > 1e-4:
                raise PgdConvergenceError(
                    "fixed-point alternation stagnated on a significant mode")
            break
        res_hist.append(min(res, res_hist[-1]))
        if b_norm > 0 and res / b_norm < min(enrich_tol * 1e-2, 1e-8):
            break
    return modes, {"residuals": np.array(res_hist), "b_norm": b_norm}


def _joint_update_last(op_terms, rhs_terms, modes, d=None):
    """Re-solve one factor of every mode jointly (least squares); defaults
    to the last (time-like) factor."""
    dims = len(op_terms[0])
    d = dims - 1 if d is None else d
    r = len(modes)
    n = op_terms[0][d].shape[0]
    if r * n > 40000:
        return
    w = [[[op_terms[k][dd] @ modes[m][dd] for dd in range(dims)]
          for k in range(len(op_terms))] for m in range(r)]
    big = np.zeros((r * n, r * n))
    rhs = np.zeros(r * n)
    for mi in range(r):
        for mj in range(r):
            block = np.zeros((n, n))
            for k in range(len(op_terms)):
                for l in range(len(op_terms)):
                    coef = 1.0
                    for dd in range(dims):
                        if dd != d:
                            coef *= float(w[mi][k][dd] @ w[mj][l][dd])
                    block += coef * (op_terms[k][d].T @ op_terms[l][d]).toarray()
            big[mi * n:(mi + 1) * n, mj * n:(mj + 1) * n] = block
        for k in range(len(op_terms)):
            for b in rhs_terms:
                coef = 1.0
                for dd in range(dims):
                    if dd != d:
                        coef *= float(w[mi][k][dd] @ b[dd])
                rhs[mi * n:(mi + 1) * n] += coef * (op_terms[k][d].T @ b[d])
    try:
        sol = np.linalg.solve(big, rhs)
    except np.linalg.LinAlgError:
        sol, *_ = np.linalg.lstsq(big, rhs, rcond=None)
    for mi in range(r):
        modes[mi][d] = sol[mi * n:(mi + 1) * n]


# ---------------------------------------------------------------------------
# Transient DMA solve
# ---------------------------------------------------------------------------

def _inplane_matrices(geom: Geometry, nx: int, ny: int):
    hx = geom.length / (nx - 1)
    hy = geom.width / (ny - 1)
    mx, my = mass_1d(nx, hx), mass_1d(ny, hy)
    ax, ay = stiffness_1d(nx, hx), stiffness_1d(ny, hy)
    ex = end_mass(nx, 1.0, 1.0)
    ey = end_mass(ny, 1.0, 1.0)
    m_xy = sp.kron(mx, my).tocsr()
    return m_xy, sp.kron(ax, my).tocsr(), sp.kron(mx, ay).tocsr(), \
        (sp.kron(ex, my) + sp.kron(mx, ey)).tocsr()


def transient_operator_terms(mat: ThermalMaterial, geom: Geometry,
                             cfg: PgdConfig, t_grid: np.ndarray,
                             t_inf: np.ndarray):
    """Separated operator and right-hand-side terms of the implicit
    transient heat problem (axes: in-plane, z, t), scaled by 1/(rho c_p)."""
    nt = len(t_grid)
    dt = t_grid[1] - t_grid[0]
    c = mat.rho * mat.c_p

    m_xy, ax_xy, ay_xy, b_xy = _inplane_matrices(geom, cfg.nx, cfg.ny)
    a_xy = mat.k_par * ax_xy + mat.k_perp * ay_xy

    hz = geom.thickness / (cfg.nz - 1)
    m_z = mass_1d(cfg.nz, hz)
    a_z = mat.k_perp * stiffness_1d(cfg.nz, hz)
    b_z = end_mass(cfg.nz, 1.0, 1.0)

    # implicit (backward) difference in time; row 0 reserved for the IC
    d_main = np.full(nt, 1.0 / dt)
    d_main[0] = 0.0
    d_t = sp.diags([np.full(nt - 1, -1.0 / dt), d_main], [-1, 0]).tolil()
    d_t[0, :] = 0.0
    d_t = d_t.tocsr()
    e_t = sp.diags(np.concatenate(([0.0], np.ones(nt - 1)))).tocsr()
    p0 = sp.diags(np.concatenate(([1.0 / dt], np.zeros(nt - 1)))).tocsr()

    ones_xy = np.ones(m_xy.shape[0])
    ones_z = np.ones(cfg.nz)
    op_terms = [
        (m_xy, m_z, d_t),
        (((a_xy + mat.h_air * b_xy) / c).tocsr(), m_z, e_t),
        (m_xy, ((a_z + mat.h_air * b_z) / c).tocsr(), e_t),
        (m_xy, m_z, p0),
    ]
    g = e_t @ t_inf
    rhs_terms = [
        ((mat.h_air / c) * (b_xy @ ones_xy), m_z @ ones_z, g),
        ((mat.h_air / c) * (m_xy @ ones_xy), b_z @ ones_z, g),
        (m_xy @ ones_xy, m_z @ ones_z,
         np.concatenate(([mat.t0 / dt], np.zeros(nt - 1)))),
    ]
    return op_terms, rhs_terms


def solve_transient_dma(mat: ThermalMaterial, geom: Geometry,
                        cycle: ThermalCycle, cfg: PgdConfig = PgdConfig(),
                        seed: int = 0) -> SeparatedField:
    """Transient tape temperature during a DMA thermal cycle.

    Robin convection to the cycle's ambient temperature on every face,
    uniform initial condition, no internal heat source.  The returned
    field carries enrichment diagnostics in `field.diagnostics`.
    """
    if cfg.nz < 5:
        warnings.warn("nz < 5: through-thickness mesh is very coarse",
                      stacklevel=2)
    t_grid = np.linspace(0.0, cycle.end_time, cfg.nt)
    t_inf = cycle.temperature(t_grid)
    op_terms, rhs_terms = transient_operator_terms(mat, geom, cfg, t_grid, t_inf)
    modes, diag = greedy_separated_solve(
        op_terms, rhs_terms, fp_tol=cfg.fp_tol, max_sweeps=cfg.max_sweeps,
        enrich_tol=cfg.enrich_tol, max_modes=cfg.max_modes, seed=seed)
    xs = np.linspace(0.0, geom.length, cfg.nx)
    ys = np.linspace(0.0, geom.width, cfg.ny)
    zs = np.linspace(0.0, geom.thickness, cfg.nz)
    axes = [Axis("xy", (xs, ys)), Axis("z", (zs,)), Axis("t", (t_grid,))]
    diag["t_inf"] = t_inf
    return SeparatedField(axes, modes, diag)


# ---------------------------------------------------------------------------
# Steady deposition (print) solve with SUPG
# ---------------------------------------------------------------------------

def supg_tau(h_e: float, v: float, k_eff: float, rho_cp: float) -> float:
    """Optimal streamline stabilization time scale for linear elements.

    tau = (h_e / 2|v|) (coth Pe - 1/Pe) with the element Peclet number
    Pe = |v| h_e / (2 kappa), kappa = k_eff / (rho c_p).  Returns 0 for
    v = 0 (pure diffusion needs no stabilization).
    """
    v = abs(v)
    if v == 0.0:
        return 0.0
    if h_e <= 0.0:
        raise ValueError("element length must be > 0")
    kappa = k_eff / rho_cp
    pe = v * h_e / (2.0 * kappa)
    if pe > 30.0:
        xi = 1.0 - 1.0 / pe  # coth saturates at 1
    else:
        xi = 1.0 / math.tanh(pe) - 1.0 / pe
    return h_e / (2.0 * v) * xi


def solve_steady_print(mat: ThermalMaterial, pcfg: PrintConfig,
                       cfg: PgdConfig = PgdConfig(nx=181, nz=21,
                                                  enrich_tol=1e-9),
                       seed: int = 0) -> SeparatedField:
    """Steady tape temperature in the deposition-head frame.

    Inlet Dirichlet T_head at x=0 (imposed through a lift), Robin h_air to
    the ambient on the top face and h_base to the build platform on the
    bottom face, natural outflow at x=L.  Transport at the deposition
    velocity is SUPG-stabilized; mass matrices in the face-exchange terms
    are lumped, which keeps the discrete solution monotone along x.
    """
    geom = pcfg.geom
    nx, nz = cfg.nx, cfg.nz
    hx = geom.length / (nx - 1)
    hz = geom.thickness / (nz - 1)
    c = mat.rho * mat.c_p
    v = pcfg.v_deposition

    pe = v * hx / (2.0 * mat.k_par / c)
    if pe > 1e4:
        warnings.warn(f"element Peclet number {pe:.3g} is extreme; "
                      "consider refining the x mesh", stacklevel=2)
    tau = supg_tau(hx, v, mat.k_par, c)

    m_x = mass_1d(nx, hx, lumped=True)
    a_x = stiffness_1d(nx, hx)
    c_x = convection_1d(nx, hx)
    m_z = mass_1d(nz, hz, lumped=True)
    a_z = mat.k_perp * stiffness_1d(nz, hz)
    b_z = end_mass(nz, pcfg.h_base, pcfg.h_air)  # bottom z=0, top z=H

    adv_x = (c * v * c_x + (mat.k_par + c * tau * v * v) * a_x) / c
    exch_z = (a_z + b_z) / c

    ones_z = np.ones(nz)
    robin_z = np.zeros(nz)
    robin_z[0] = pcfg.h_base * pcfg.t_base / c
    robin_z[-1] = pcfg.h_air * pcfg.t_inf / c

    # Dirichlet lift: T_head carried by the inlet hat function
    lift_x = np.zeros(nx)
    lift_x[0] = pcfg.t_head

    full_ops = [(adv_x, m_z), (m_x, exch_z)]
    rhs_full = [(m_x @ np.ones(nx), robin_z)]
    # move the lift to the right-hand side
    for ox, oz in full_ops:
        rhs_full.append((-(ox @ lift_x), oz @ ones_z))

    # eliminate the Dirichlet node from the x factors
    op_terms = [(ox[1:, 1:].tocsr(), oz.tocsr()) for ox, oz in full_ops]
    rhs_terms = [(bx[1:], bz) for bx, bz in rhs_full]

    modes, diag = greedy_separated_solve(
        op_terms, rhs_terms, fp_tol=cfg.fp_tol, max_sweeps=cfg.max_sweeps,
        enrich_tol=cfg.enrich_tol, max_modes=cfg.max_modes, seed=seed)
    if modes:
        # final joint re-solve of the streamwise factors: the best solution
        # in the found subspace inherits the monotone SUPG profile
        _joint_update_last(op_terms, rhs_terms, modes, d=0)

    xs = np.linspace(0.0, geom.length, nx)
    zs = np.linspace(0.0, geom.thickness, nz)
    axes = [Axis("x", (xs,)), Axis("z", (zs,))]
    padded = [[np.concatenate(([0.0], mx)), mz] for mx, mz in modes]
    padded.insert(0, [lift_x, ones_z])
    diag["tau"] = tau
    diag["peclet"] = pe
    return SeparatedField(axes, padded, diag)


def flux_balance_plateau(pcfg: PrintConfig) -> float:
    """Far-field temperature where top and bottom convective fluxes cancel."""
    return ((pcfg.h_air * pcfg.t_inf + pcfg.h_base * pcfg.t_base)
            / (pcfg.h_air + pcfg.h_base))

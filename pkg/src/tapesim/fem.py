"""Quasi-static orthotropic Kelvin-Voigt finite-element solver.

Structured 8-node trilinear hexahedra on a box mesh, 2x2x2 Gauss
quadrature.  The constitutive law is sigma = C eps + eta deps/dt with a
backward-Euler discretization of the strain rate, which keeps the solver
unconditionally stable at the very slow thermal rates of interest.
Eigenstrains (thermal expansion, release, crystallization) enter through
sigma0 = C eps0 + eta deps0/dt on the right-hand side.

Inertia and body forces are neglected throughout.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
import scipy.sparse as sp
import scipy.sparse.linalg as spla
from scipy.signal import savgol_filter

from .core import (
    ExpansionVector,
    Geometry,
    MechanicalMaterial,
    StrainSeries,
    ViscosityTensor,
    build_stiffness,
    build_viscosity,
)


class SingularSystemError(RuntimeError):
    """The constrained stiffness system is singular (insufficient BCs)."""


@dataclass(frozen=True)
class MechConfig:
    """Mesh resolution (elements per direction)."""

    ne_x: int = 40
    ne_y: int = 8
    ne_z: int = 2

    def __post_init__(self):
        if min(self.ne_x, self.ne_y, self.ne_z) < 1:
            raise ValueError("element counts must be >= 1")


@dataclass
class MechState:
    """Displacement history of one quasi-static solve."""

    times: np.ndarray
    displacements: np.ndarray  # (nt, ndof), constrained dofs exactly zero
    eigenstrain: np.ndarray    # (nt, 6) Voigt eigenstrain driving the run


_CORNERS = np.array([
    [0, 0, 0], [1, 0, 0], [1, 1, 0], [0, 1, 0],
    [0, 0, 1], [1, 0, 1], [1, 1, 1], [0, 1, 1],
])


class HexMesh:
    """Uniform structured hexahedral mesh of a box."""

    def __init__(self, geom: Geometry, cfg: MechConfig):
        self.geom = geom
        self.cfg = cfg
        self.nn = (cfg.ne_x + 1, cfg.ne_y + 1, cfg.ne_z + 1)
        self.h = (geom.length / cfg.ne_x, geom.width / cfg.ne_y,
                  geom.thickness / cfg.ne_z)
        nx, ny, nz = self.nn
        ix, iy, iz = np.meshgrid(np.arange(nx), np.arange(ny), np.arange(nz),
                                 indexing="ij")
        self.coords = np.column_stack([
            (ix * self.h[0]).ravel(), (iy * self.h[1]).ravel(),
            (iz * self.h[2]).ravel(),
        ])
        self.n_nodes = nx * ny * nz
        self.ndof = 3 * self.n_nodes
        self.conn = self._connectivity()

    def node_id(self, ix, iy, iz):
        nx, ny, nz = self.nn
        return (ix * ny + iy) * nz + iz

    def _connectivity(self) -> np.ndarray:
        cfg = self.cfg
        ex, ey, ez = np.meshgrid(np.arange(cfg.ne_x), np.arange(cfg.ne_y),
                                 np.arange(cfg.ne_z), indexing="ij")
        ex, ey, ez = ex.ravel(), ey.ravel(), ez.ravel()
        conn = np.empty((ex.size, 8), dtype=np.int64)
        for a, (dx, dy, dz) in enumerate(_CORNERS):
            conn[:, a] = self.node_id(ex + dx, ey + dy, ez + dz)
        return conn


def _gauss_b_matrices(h):
    """B matrices (6 x 24) and integration weights at the 8 Gauss points of
    a uniform hex with edge lengths h."""
    g = 1.0 / np.sqrt(3.0)
    signs = 2.0 * _CORNERS - 1.0  # corner signs in (-1, 1)^3
    det_j = h[0] * h[1] * h[2] / 8.0
    b_list, w_list = [], []
    for gp in signs * g:
        dN = np.empty((8, 3))
        for a in range(8):
            sx, sy, sz = signs[a]
            dN[a, 0] = sx * (1 + sy * gp[1]) * (1 + sz * gp[2]) / 8.0 * 2.0 / h[0]
            dN[a, 1] = (1 + sx * gp[0]) * sy * (1 + sz * gp[2]) / 8.0 * 2.0 / h[1]
            dN[a, 2] = (1 + sx * gp[0]) * (1 + sy * gp[1]) * sz / 8.0 * 2.0 / h[2]
        b = np.zeros((6, 24))
        for a in range(8):
            u, v, w = 3 * a, 3 * a + 1, 3 * a + 2
            b[0, u] = dN[a, 0]
            b[1, v] = dN[a, 1]
            b[2, w] = dN[a, 2]
            b[3, v] = dN[a, 2]
            b[3, w] = dN[a, 1]
            b[4, u] = dN[a, 2]
            b[4, w] = dN[a, 0]
            b[5, u] = dN[a, 1]
            b[5, v] = dN[a, 0]
        b_list.append(b)
        w_list.append(det_j)
    return b_list, w_list


class KelvinVoigtSolver:
    """Assembled operators for one mesh / material pair.

    `constraints` selects the boundary-condition set:

    - "dma":   fully clamped at x=0; at x=L all nodes share one axial dof
               (the measured tip displacement) with v = w = 0.
    - "print": as "dma" plus w = 0 on the whole bottom face z = 0.
    - "free":  symmetry supports u(x=0)=0, v(y=0)=0, w(z=0)=0 with the tied
               tip dof kept; admits uniform-eigenstrain affine fields.
    """

    def __init__(self, mat: MechanicalMaterial, eta, geom: Geometry,
                 cfg: MechConfig = MechConfig(), constraints: str = "dma"):
        self.mesh = HexMesh(geom, cfg)
        self.c_mat, _ = build_stiffness(mat)
        if isinstance(eta, ViscosityTensor):
            eta = build_viscosity(eta.eta1, eta.eta2, eta.eta3)
        self.eta_mat = np.asarray(eta, dtype=float)
        if self.eta_mat.shape != (6, 6):
            raise ValueError("eta must be a 6x6 matrix or a ViscosityTensor")
        b_list, w_list = _gauss_b_matrices(self.mesh.h)
        ke_c = sum(w * b.T @ self.c_mat @ b for b, w in zip(b_list, w_list))
        ke_eta = sum(w * b.T @ self.eta_mat @ b for b, w in zip(b_list, w_list))
        ge = sum(w * b.T for b, w in zip(b_list, w_list))  # 24 x 6
        self.k_c = self._assemble(ke_c)
        self.k_eta = self._assemble(ke_eta)
        self.g_map = self._assemble_load_map(ge)
        self.constraints = constraints
        self.t_map, self.master_col = self._constraint_map(constraints)
        self._lu_cache: dict[float, object] = {}

    # -- assembly -----------------------------------------------------
    def _elem_dofs(self) -> np.ndarray:
        conn = self.mesh.conn
        dofs = np.empty((conn.shape[0], 24), dtype=np.int64)
        for a in range(8):
            dofs[:, 3 * a] = 3 * conn[:, a]
            dofs[:, 3 * a + 1] = 3 * conn[:, a] + 1
            dofs[:, 3 * a + 2] = 3 * conn[:, a] + 2
        return dofs

    def _assemble(self, ke: np.ndarray) -> sp.csr_matrix:
        dofs = self._elem_dofs()
        ne = dofs.shape[0]
        rows = np.repeat(dofs, 24, axis=1).ravel()
        cols = np.tile(dofs, (1, 24)).ravel()
        data = np.tile(ke.ravel(), ne)
        k = sp.coo_matrix((data, (rows, cols)),
                          shape=(self.mesh.ndof, self.mesh.ndof))
        return k.tocsr()

    def _assemble_load_map(self, ge: np.ndarray) -> np.ndarray:
        g = np.zeros((self.mesh.ndof, 6))
        dofs = self._elem_dofs()
        for comp in range(6):
            np.add.at(g[:, comp], dofs.ravel(),
                      np.tile(ge[:, comp], dofs.shape[0]))
        return g

    # -- constraints ---------------------------------------------------
    def _constraint_map(self, mode: str):
        mesh = self.mesh
        x, y, z = mesh.coords.T
        tol = 1e-12 + 1e-9 * mesh.geom.length
        at_x0 = x < tol
        at_xl = x > mesh.geom.length - tol
        fixed = np.zeros((mesh.n_nodes, 3), dtype=bool)
        tied_u = at_xl.copy()
        if mode == "dma":
            fixed[at_x0, :] = True
            fixed[at_xl, 1] = True
            fixed[at_xl, 2] = True
        elif mode == "print":
            fixed[at_x0, :] = True
            fixed[at_xl, 1] = True
            fixed[at_xl, 2] = True
            fixed[z < 1e-12 + 1e-9 * mesh.geom.thickness, 2] = True
        elif mode == "free":
            fixed[at_x0, 0] = True
            fixed[y < 1e-12 + 1e-9 * mesh.geom.width, 1] = True
            fixed[z < 1e-12 + 1e-9 * mesh.geom.thickness, 2] = True
        else:
            raise ValueError(f"unknown constraint mode {mode!r}")
        tied_u &= ~fixed[:, 0]

        col_of = np.full(mesh.ndof, -1, dtype=np.int64)
        next_col = 0
        master_col = None
        for node in range(mesh.n_nodes):
            for comp in range(3):
                dof = 3 * node + comp
                if fixed[node, comp]:
                    continue
                if comp == 0 and tied_u[node]:
                    if master_col is None:
                        master_col = next_col
                        next_col += 1
                    col_of[dof] = master_col
                else:
                    col_of[dof] = next_col
                    next_col += 1
        rows = np.nonzero(col_of >= 0)[0]
        t = sp.coo_matrix((np.ones(rows.size), (rows, col_of[rows])),
                          shape=(mesh.ndof, next_col)).tocsr()
        return t, master_col

    # -- solves ---------------------------------------------------------
    def _factorize(self, dt: float):
        key = round(float(dt), 12)
        if key not in self._lu_cache:
            a = self.k_c + (self.k_eta / dt if dt > 0 else 0.0 * self.k_eta)
            a_red = (self.t_map.T @ a @ self.t_map).tocsc()
            try:
                self._lu_cache[key] = spla.splu(a_red)
            except RuntimeError as exc:
                raise SingularSystemError(
                    "constrained system is singular") from exc
        return self._lu_cache[key]

    def solve_history(self, times: np.ndarray, eps0: np.ndarray,
                      tip_force: float = 0.0,
                      eigenstrain_rate: str = "backward") -> MechState:
        """March the quasi-static problem over a time grid.

        eps0 is the (nt, 6) Voigt eigenstrain history (spatially uniform).
        tip_force is an optional external axial force (N) applied to the
        tied tip dof.  eigenstrain_rate selects how deps0/dt is formed:
        "backward" differences (matching the displacement discretization)
        or "sg" (smoothed rate, see rate_of_eigenstrain).
        """
        times = np.asarray(times, dtype=float)
        eps0 = np.asarray(eps0, dtype=float)
        if eps0.shape != (times.size, 6):
            raise ValueError("eps0 must have shape (nt, 6)")
        if not np.all(np.isfinite(eps0)):
            raise ValueError("eigenstrain history contains non-finite values")
        if eigenstrain_rate == "sg" and times.size >= 9:
            eps0_rate = np.column_stack([
                rate_of_eigenstrain(StrainSeries(times, eps0[:, k])).values
                for k in range(6)
            ])
        elif eigenstrain_rate in ("backward", "sg"):
            eps0_rate = np.zeros_like(eps0)
            dt_all = np.diff(times)
            eps0_rate[1:] = np.diff(eps0, axis=0) / dt_all[:, None]
        else:
            raise ValueError(f"unknown eigenstrain_rate {eigenstrain_rate!r}")

        u = np.zeros((times.size, self.mesh.ndof))
        u_red = np.zeros(self.t_map.shape[1])
        for n in range(1, times.size):
            dt = times[n] - times[n - 1]
            sig0 = self.c_mat @ eps0[n] + self.eta_mat @ eps0_rate[n]
            f = self.g_map @ sig0 + self.k_eta @ u[n - 1] / dt
            f_red = self.t_map.T @ f
            if tip_force and self.master_col is not None:
                f_red[self.master_col] += tip_force
            u_red = self._factorize(dt).solve(f_red)
            u[n] = self.t_map @ u_red
        # step 0 with zero rate (initial equilibrium under eps0[0])
        if np.any(eps0[0]):
            sig0 = self.c_mat @ eps0[0]
            f_red = self.t_map.T @ (self.g_map @ sig0)
            if tip_force and self.master_col is not None:
                f_red[self.master_col] += tip_force
            lu0 = spla.splu((self.t_map.T @ self.k_c @ self.t_map).tocsc())
            u[0] = self.t_map @ lu0.solve(f_red)
        return MechState(times=times, displacements=u, eigenstrain=eps0)

    def tip_strain(self, state: MechState) -> np.ndarray:
        """Average axial strain u_L(t)/L from the tied tip dof."""
        tip_nodes = np.nonzero(
            self.mesh.coords[:, 0] > self.mesh.geom.length * (1 - 1e-9))[0]
        u_tip = state.displacements[:, 3 * tip_nodes].mean(axis=1)
        return u_tip / self.mesh.geom.length

    def width_profile(self, state: MechState, step: int = -1):
        """Deformed width W(x) from the lateral displacements of the two
        long edges, averaged through the thickness."""
        mesh = self.mesh
        nx, ny, nz = mesh.nn
        u = state.displacements[step].reshape(mesh.n_nodes, 3)
        v = u[:, 1].reshape(nx, ny, nz)
        x = np.arange(nx) * mesh.h[0]
        w = mesh.geom.width + (v[:, -1, :] - v[:, 0, :]).mean(axis=1)
        return x, w


def rate_of_eigenstrain(series: StrainSeries, window: int = 9,
                        polyorder: int = 3) -> StrainSeries:
    """Smoothed time derivative of an eigenstrain series.

    Uses the Savitzky-Golay derivative filter (least-squares local
    polynomial fit), which combines finite differencing and smoothing in
    one convolution and recovers derivatives of cubics exactly at interior
    points.  Endpoints use the asymmetric polynomial fit of the same order.
    Requires at least `window` samples and a uniform time grid.
    """
    if len(series) < window:
        raise ValueError(f"series too short: need >= {window} samples")
    dt_all = np.diff(series.times)
    if not np.allclose(dt_all, dt_all[0], rtol=1e-8):
        raise ValueError("rate_of_eigenstrain requires a uniform time grid")
    rate = savgol_filter(series.values, window, polyorder, deriv=1,
                         delta=dt_all[0], mode="interp")
    return series.with_values(rate, label=f"{series.label}_rate")


def run_dma_sim(mat: MechanicalMaterial, eta, alpha: ExpansionVector,
                times: np.ndarray, temps: np.ndarray, geom: Geometry,
                cfg: MechConfig = MechConfig(), constraints: str = "dma",
                solver: KelvinVoigtSolver | None = None) -> StrainSeries:
    """Simulated DMA axial strain for an imposed temperature history.

    The thermal field is taken spatially uniform (the transient thermal
    solves show sub-0.5 K spread across the tape), so the eigenstrain is
    alpha * (T(t) - T(0)).  Pass a prebuilt solver to amortize assembly
    across repeated calls with identical mesh and material.
    """
    if solver is None:
        solver = KelvinVoigtSolver(mat, eta, geom, cfg, constraints)
    temps = np.asarray(temps, float)
    eps0 = np.outer(temps - temps[0], alpha.as_voigt())
    state = solver.solve_history(np.asarray(times, float), eps0)
    return StrainSeries(state.times, solver.tip_strain(state), label="simulated")


def run_print_mech(mat: MechanicalMaterial, eta, eps0_series: np.ndarray,
                   times: np.ndarray, geom: Geometry,
                   cfg: MechConfig = MechConfig(ne_x=180, ne_y=8, ne_z=2),
                   constraints: str = "print"):
    """Deformed printed tape under a combined eigenstrain history.

    eps0_series has shape (nt, 3): normal eigenstrain components
    (thermal + release + crystallization, already expanded by
    micromechanics).  Returns (state, x, width) where width is the
    deformed width profile W(x) at the final step.
    """
    eps0_series = np.asarray(eps0_series, float)
    if eps0_series.ndim != 2 or eps0_series.shape[1] != 3:
        raise ValueError("eps0_series must have shape (nt, 3)")
    solver = KelvinVoigtSolver(mat, eta, geom, cfg, constraints)
    eps0 = np.hstack([eps0_series, np.zeros((eps0_series.shape[0], 3))])
    state = solver.solve_history(np.asarray(times, float), eps0)
    x, w = solver.width_profile(state)
    return state, x, w


def export_width_profile(path, x: np.ndarray, width: np.ndarray):
    """CSV export of a deformed width profile."""
    header = "tapesim-width-profile v1\nx_m,width_m"
    np.savetxt(path, np.column_stack([x, width]), delimiter=",",
               header=header, comments="# ")


def export_point_cloud(path, solver: KelvinVoigtSolver, state: MechState,
                       step: int = -1, scale: float = 1.0):
    """Deformed nodal point cloud (x,y,z) text export for visualization."""
    pts = solver.mesh.coords + scale * state.displacements[step].reshape(-1, 3)
    np.savetxt(path, pts, header="tapesim-points v1\nx_m y_m z_m",
               comments="# ")

"""Forward-model contract and the two concrete design problems.

heat_flux: steady diffusion on [0,2]x[0,1]; the design is the influx profile
on the left edge (one variable per edge node), outputs are temperatures at 11
points on the vertical midline, and the random field is the log-conductivity.

topo: plane-stress cantilever on [0,1.6]x[0,1] clamped on the left with a
downward point force at the free bottom corner; the design field mixes void
and material through a sigmoid per element, outputs are downward bottom-edge
displacements, and the random field is the log of the solid-phase modulus.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import scipy.sparse as sp

from . import mesh_fem
from .mesh_fem import (
    BoundaryConditions,
    Mesh,
    assemble_diffusion,
    assemble_elasticity,
    boundary_nodes,
    edge_mass_loads,
    element_dofs,
    grid_interpolation_weights,
    solve_forward,
    unit_diffusion_element_matrices,
    unit_elasticity_element_matrices,
)
from .random_field import FieldPrior, build_covariance


def sigmoid(x):
    out = np.empty_like(x, dtype=float)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


@dataclass
class ConstraintDescriptor:
    """Soft volume-fraction equality constraint on the sigmoid-mixed design."""

    target_VF: float
    eps_c2: float


def constraint_value_and_gradient(desc: ConstraintDescriptor, z: np.ndarray):
    """c(z) = mean(sigmoid(z)) - VF and its gradient."""
    s = sigmoid(np.asarray(z, dtype=float))
    c = float(np.mean(s) - desc.target_VF)
    f = s * (1.0 - s) / z.shape[0]
    return c, f


def log_utility(model, u: np.ndarray) -> float:
    """Log of the exponential closeness utility, -(tau_Q/2)||u_target - u||^2."""
    r = model.u_target - np.asarray(u)
    return -0.5 * model.tau_Q * float(r @ r)


class StaleFactorizationError(RuntimeError):
    pass


class ForwardModel:
    """Shared plumbing: call counting, solution caching, Jacobian dispatch.

    Subclasses implement _solve(theta, z) -> SystemSolution and
    _jacobians(solution, theta, z) -> (G_theta, G_z).
    """

    d_theta: int
    d_z: int
    n: int
    u_target: np.ndarray
    tau_Q: float
    field_prior: FieldPrior
    constraint: ConstraintDescriptor | None = None

    def __init__(self):
        self.forward_calls = 0
        self._last = None  # (theta, z, solution)

    def evaluate(self, theta, z) -> np.ndarray:
        theta = np.asarray(theta, dtype=float)
        z = np.asarray(z, dtype=float)
        if theta.shape != (self.d_theta,) or z.shape != (self.d_z,):
            raise ValueError(
                f"expected shapes ({self.d_theta},) and ({self.d_z},), "
                f"got {theta.shape} and {z.shape}")
        sol = self._solve(theta, z)
        self.forward_calls += 1
        self._last = (theta.copy(), z.copy(), sol)
        return sol.outputs

    def last_jacobians(self):
        """Adjoint Jacobians at the most recent evaluate() point; no new solve."""
        if self._last is None:
            raise StaleFactorizationError("no retained forward solution")
        theta, z, sol = self._last
        return self._jacobians(sol, theta, z)

    def evaluate_with_jacobians(self, theta, z):
        u = self.evaluate(theta, z)
        G_theta, G_z = self.last_jacobians()
        return u, G_theta, G_z

    def jacobians_from(self, solution):
        """Jacobians for an externally held solution; it must be the cached one."""
        if self._last is None or self._last[2] is not solution:
            raise StaleFactorizationError("solution does not match the retained factorization")
        theta, z, sol = self._last
        return self._jacobians(sol, theta, z)


class HeatFluxProblem(ForwardModel):
    def __init__(self, mesh: Mesh, field_prior: FieldPrior, tau_Q: float,
                 u_target: np.ndarray, obs_points: np.ndarray):
        super().__init__()
        self.mesh = mesh
        self.field_prior = field_prior
        self.tau_Q = float(tau_Q)
        self.u_target = np.asarray(u_target, dtype=float)
        self.d_theta = mesh.n_elements
        self.n = self.u_target.shape[0]
        self.constraint = None

        self.bc = BoundaryConditions.build(mesh, 1, {"right": 0.0})
        self.design_nodes = boundary_nodes(mesh, "left")
        self.d_z = self.design_nodes.shape[0]
        self.B = self._design_load_matrix()

        nx, ny, Lx, Ly = mesh.grid
        idx, w = grid_interpolation_weights(nx, ny, Lx, Ly, obs_points)
        rows = idx.ravel()
        cols = np.repeat(np.arange(self.n), 3)
        self.L_obs = sp.coo_matrix((w.ravel(), (rows, cols)),
                                   shape=(mesh.n_nodes, self.n)).tocsc()
        self._ke_unit = unit_diffusion_element_matrices(mesh)
        self._dofs = mesh.triangles
        self._Gz_cache = None

    def _design_load_matrix(self):
        cols = []
        for j, node in enumerate(self.design_nodes):
            cols.append(edge_mass_loads(self.mesh, "left", {node: 1.0}))
        return np.column_stack(cols)

    def _solve(self, theta, z):
        lam = np.exp(theta)
        K = assemble_diffusion(self.mesh, lam)
        load = self.B @ z
        return solve_forward(K, self.bc, load, observation=self.L_obs)

    def _jacobians(self, sol, theta, z):
        Lam = sol.adjoint(self.L_obs.toarray())
        # outputs are exactly linear in the flux design, so G_z is constant
        G_z = Lam.T @ self.B
        base = mesh_fem.element_bilinear(self._ke_unit, self._dofs, Lam, sol.nodal_field)
        G_theta = -base * np.exp(theta)[None, :]
        return G_theta, G_z


class TopologyProblem(ForwardModel):
    E_MIN = 1e-10

    def __init__(self, mesh: Mesh, field_prior: FieldPrior, tau_Q: float,
                 u_target: np.ndarray, obs_points: np.ndarray, constraint,
                 nu: float = 0.3, point_load=1e-3):
        super().__init__()
        self.mesh = mesh
        self.field_prior = field_prior
        self.tau_Q = float(tau_Q)
        self.u_target = np.asarray(u_target, dtype=float)
        self.nu = nu
        self.d_theta = mesh.n_elements
        self.d_z = mesh.n_elements
        self.n = self.u_target.shape[0]
        self.constraint = constraint

        nx, ny, Lx, Ly = mesh.grid
        corner = int(np.argmin(np.sum((mesh.nodes - [Lx, 0.0]) ** 2, axis=1)))
        self.bc = BoundaryConditions.build(
            mesh, 2, {"left": (0.0, 0.0)},
            point_loads=[(corner, 1, -float(point_load))])
        self.load = self.bc.load_vector()

        # downward-positive vertical outputs: -u2 interpolated on the bottom edge
        idx, w = grid_interpolation_weights(nx, ny, Lx, Ly, obs_points)
        rows = (2 * idx + 1).ravel()
        cols = np.repeat(np.arange(self.n), 3)
        self.L_obs = sp.coo_matrix((-w.ravel(), (rows, cols)),
                                   shape=(2 * mesh.n_nodes, self.n)).tocsc()
        self._ke_unit = unit_elasticity_element_matrices(mesh, nu)
        self._dofs = element_dofs(mesh, 2)

    def youngs_field(self, theta, z):
        lam = np.exp(theta)
        return self.E_MIN + sigmoid(z) * (lam - self.E_MIN)

    def _solve(self, theta, z):
        K = assemble_elasticity(self.mesh, self.youngs_field(theta, z), self.nu)
        return solve_forward(K, self.bc, self.load, observation=self.L_obs)

    def _jacobians(self, sol, theta, z):
        Lam = sol.adjoint(self.L_obs.toarray())
        base = mesh_fem.element_bilinear(self._ke_unit, self._dofs, Lam, sol.nodal_field)
        lam = np.exp(theta)
        s = sigmoid(z)
        G_theta = -base * (s * lam)[None, :]
        G_z = -base * (s * (1.0 - s) * (lam - self.E_MIN))[None, :]
        return G_theta, G_z


def make_heat_problem(nx=40, ny=20, Lx=2.0, Ly=1.0, sigma_g2=0.223, x0=0.1,
                      mu_theta0=-0.112, tau_Q_inv=0.01, obs_x1=None,
                      obs_x2=None) -> HeatFluxProblem:
    """Numerical illustration defaults: 40x20 grid, 11 midline observation
    points at x2 = 0.25 + 0.05 k, tent-shaped temperature target."""
    mesh = mesh_fem.build_regular_mesh(nx, ny, Lx, Ly)
    prior = build_covariance(mesh.element_centroids, sigma_g2, x0, mu_theta0)
    if obs_x2 is None:
        obs_x2 = 0.25 + 0.05 * np.arange(11)
    obs_x2 = np.asarray(obs_x2, dtype=float)
    x1 = Lx / 2.0 if obs_x1 is None else obs_x1
    pts = np.column_stack([np.full(obs_x2.shape, x1), obs_x2])
    u_target = 20.0 - 40.0 * np.abs(obs_x2 - 0.5)
    return HeatFluxProblem(mesh, prior, 1.0 / tau_Q_inv, u_target, pts)


def make_topo_problem(nx=52, ny=34, Lx=1.6, Ly=1.0, sigma_g2=0.223, x0=0.1,
                      mu_theta0=-0.112, tau_Q_inv=5e-6, VF=0.4, eps_c2=1e-10,
                      n_obs=8) -> TopologyProblem:
    """Numerical illustration defaults: 52x34 grid, 8 bottom-edge outputs at
    x1 = 0.2 k with linearly increasing downward-displacement targets."""
    mesh = mesh_fem.build_regular_mesh(nx, ny, Lx, Ly)
    prior = build_covariance(mesh.element_centroids, sigma_g2, x0, mu_theta0)
    k = np.arange(1, n_obs + 1)
    pts = np.column_stack([Lx * k / n_obs, np.zeros(n_obs)])
    u_target = 6.25e-3 * k
    constraint = ConstraintDescriptor(VF, eps_c2)
    return TopologyProblem(mesh, prior, 1.0 / tau_Q_inv, u_target, pts, constraint)

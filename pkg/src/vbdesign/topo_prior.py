"""Hierarchical bimodal prior on the design mean with a spatial spin
hyperprior, sampled by a Metropolized-Gibbs sweep.

Each element carries a spin phi_j in {-1, +1} selecting a Gaussian mode at
+-m for mu_z,j; spins interact through a coupling beta over the
shared-edge neighbor graph of the triangulation. The joint over spins is

    p(phi | beta) ~ exp(-(beta/2) sum_j sum_{k ~ j} phi_j phi_k)

with the double sum visiting every ordered neighbor pair, so the full
conditional at site j carries -beta phi_j sum_{k~j} phi_k. Negative beta
favors aligned neighbors.

The inner site scan is the one genuinely hot Python loop in the package;
a compiled kernel is used when available, with a bit-identical pure-Python
fallback (see benchmarks/bench_gibbs.py).
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

try:
    from ._ising_kernel import sweep_spins
    COMPILED_KERNEL = True
except ImportError:  # pragma: no cover - depends on build environment
    from ._ising_py import sweep_spins
    COMPILED_KERNEL = False

from .mesh_fem import Mesh

MODE_LOCATION = math.log(999.0)  # sigmoid(+-m) = 1 - 1e-3 / 1e-3
MODE_VARIANCE = 1.0
BETA_BOUNDS = (-2.0, 2.0)
BETA_STEP = 0.1


@dataclass
class TopoPriorState:
    phi: np.ndarray          # int8 spins
    beta: float
    m: float
    s2: float
    neighbors: np.ndarray    # (d, 3) int32, -1 padded
    phi_mean: np.ndarray


def build_neighbor_graph(mesh: Mesh) -> np.ndarray:
    """Elements are neighbors iff they share an edge; (d, 3) int32, -1 padded."""
    edge_owner = {}
    lists = [[] for _ in range(mesh.n_elements)]
    for e, tri in enumerate(mesh.triangles):
        for a, b in ((tri[0], tri[1]), (tri[1], tri[2]), (tri[2], tri[0])):
            key = (a, b) if a < b else (b, a)
            other = edge_owner.pop(key, None)
            if other is None:
                edge_owner[key] = e
            else:
                lists[e].append(other)
                lists[other].append(e)
    out = np.full((mesh.n_elements, 3), -1, dtype=np.int32)
    for e, nbs in enumerate(lists):
        out[e, :len(nbs)] = sorted(nbs)
    return out


def new_state(neighbors: np.ndarray, mu_z=None, m: float = MODE_LOCATION,
              s2: float = MODE_VARIANCE, beta: float = 0.0) -> TopoPriorState:
    """Spins start on the data side of each mode (positive side on ties)."""
    d = neighbors.shape[0]
    if mu_z is None:
        phi = np.ones(d, dtype=np.int8)
    else:
        phi = np.where(np.asarray(mu_z) >= 0.0, 1, -1).astype(np.int8)
    return TopoPriorState(phi, float(beta), float(m), float(s2), neighbors,
                          np.zeros(d))


def _neighbor_sums(state: TopoPriorState) -> np.ndarray:
    nb = state.neighbors
    vals = state.phi[np.where(nb >= 0, nb, 0)].astype(float)
    vals[nb < 0] = 0.0
    return vals.sum(axis=1)


def _pseudo_loglik(phi, drive, beta, nbr_sums):
    a = drive - beta * nbr_sums
    return float(np.sum(phi * a - np.logaddexp(a, -a)))


def gibbs_sweep(state: TopoPriorState, mu_z: np.ndarray, rng: np.random.Generator,
                update_beta: bool = True) -> TopoPriorState:
    """One fixed-order scan of all sites, then a random-walk move on beta.

    Site j is offered a flip accepted with min(1, p(-phi_j)/p(phi_j)) under
    its full conditional. The beta move targets the Besag pseudo-likelihood
    (the exact conditional would need the spin partition function, which is
    out of reach); proposals outside the prior box are rejected.
    """
    d = state.phi.shape[0]
    drive = (state.m / state.s2) * np.asarray(mu_z, dtype=float)
    log_u = np.log(rng.random(d))
    sweep_spins(state.phi, state.neighbors, drive, state.beta, log_u)
    if update_beta:
        prop = state.beta + BETA_STEP * rng.standard_normal()
        log_a = np.log(rng.random())
        if BETA_BOUNDS[0] <= prop <= BETA_BOUNDS[1]:
            sums = _neighbor_sums(state)
            phi = state.phi.astype(float)
            if log_a < (_pseudo_loglik(phi, drive, prop, sums)
                        - _pseudo_loglik(phi, drive, state.beta, sums)):
                state.beta = float(prop)
    return state


def estimate_phi_mean(state: TopoPriorState, mu_z: np.ndarray, sweeps: int,
                      burn_in: int, rng: np.random.Generator,
                      update_beta: bool = True) -> np.ndarray:
    """Post-burn-in empirical spin mean, also stored on the state."""
    if sweeps <= burn_in:
        raise ValueError("sweeps must exceed burn_in")
    acc = np.zeros(state.phi.shape[0])
    for t in range(sweeps):
        gibbs_sweep(state, mu_z, rng, update_beta=update_beta)
        if t >= burn_in:
            acc += state.phi
    state.phi_mean = acc / (sweeps - burn_in)
    return state.phi_mean.copy()


def log_prior_mu_z(mu_z: np.ndarray, phi_mean: np.ndarray, m: float, s2: float) -> float:
    """-(1/2s^2) <|mu_z - m phi|^2> using <phi_j^2> = 1."""
    mu_z = np.asarray(mu_z, dtype=float)
    d = mu_z.shape[0]
    return -0.5 / s2 * (float(mu_z @ mu_z) - 2.0 * m * float(mu_z @ phi_mean)
                        + m * m * d)


def grad_log_prior_mu_z(mu_z, phi_mean, m, s2):
    return -(np.asarray(mu_z, dtype=float) - m * np.asarray(phi_mean)) / s2

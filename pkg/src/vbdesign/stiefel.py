"""Feasible ascent over column-orthonormal matrices.

The basis objective F_W is ascended along the orthogonality-preserving
Cayley curve W(a) = (I + a/2 A)^{-1} (I - a/2 A) W with A built from the
objective gradient; steps come from alternating Barzilai-Borwein formulas
safeguarded by a non-monotone (window 5) line search. The d_z x d_z curve
inverse is evaluated through an equivalent 2 d_y x 2 d_y system.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np


class CayleyStepError(RuntimeError):
    """Small Cayley system singular; the caller should halve the step."""


@dataclass
class StiefelProblem:
    """Data defining F_W; the Gram of G_z is only ever applied to W."""

    G_z: np.ndarray          # (n, d_z)
    cross: np.ndarray        # (d_z, d_y) = G_z^T G_theta C_thy
    C_yy: np.ndarray
    tau_z: float
    tau_Q: float
    f: np.ndarray = None     # constraint gradient, optional
    eps_c2: float = None

    @property
    def G_z_gram(self) -> np.ndarray:
        return self.G_z.T @ self.G_z

    def shifted_C(self):
        return self.C_yy - np.eye(self.C_yy.shape[0]) / self.tau_z


def _require_feasible(W, tol=1e-8):
    drift = np.max(np.abs(W.T @ W - np.eye(W.shape[1])))
    if drift > tol:
        raise ValueError(f"W violates orthonormality by {drift:.3e}")


def objective_FW(problem: StiefelProblem, W: np.ndarray) -> float:
    _require_feasible(W)
    Cm = problem.shifted_C()
    A = problem.G_z @ W
    val = -0.5 * problem.tau_Q * float(np.sum((A.T @ A) * Cm))
    val -= problem.tau_Q * float(np.sum(W * problem.cross))
    if problem.f is not None:
        fW = W.T @ problem.f
        val -= 0.5 / problem.eps_c2 * float(fW @ Cm @ fW)
    return val


def gradient_J(problem: StiefelProblem, W: np.ndarray) -> np.ndarray:
    """Euclidean gradient of F_W with respect to W."""
    Cm = problem.shifted_C()
    A = problem.G_z @ W
    J = -problem.tau_Q * (problem.G_z.T @ (A @ Cm)) - problem.tau_Q * problem.cross
    if problem.f is not None:
        fW = W.T @ problem.f
        J = J - np.outer(problem.f, Cm @ fW) / problem.eps_c2
    return J


def tangent_project(W: np.ndarray, J: np.ndarray) -> np.ndarray:
    """Canonical projection J - W sym(W^T J)."""
    WtJ = W.T @ J
    return J - W @ (0.5 * (WtJ + WtJ.T))


def cayley_step(W: np.ndarray, J: np.ndarray, a: float) -> np.ndarray:
    """W' = (I + a/2 A)^{-1} (I - a/2 A) W for A = J W^T - W J^T.

    Computed through the rank-2d_y identity
    W' = W - a U (I + a/2 V^T U)^{-1} V^T W with U = [J, W], V = [W, -J].
    """
    if a == 0.0:
        return W.copy()
    d_y = W.shape[1]
    U = np.hstack([J, W])
    V = np.hstack([W, -J])
    small = np.eye(2 * d_y) + 0.5 * a * (V.T @ U)
    try:
        sol = np.linalg.solve(small, V.T @ W)
    except np.linalg.LinAlgError as exc:
        raise CayleyStepError(f"Cayley system singular at step {a:g}") from exc
    return W - a * (U @ sol)


@dataclass
class StiefelResult:
    W: np.ndarray
    F_W: float
    steps: int
    grad_norm: float
    stalled: bool
    reorthonormalized: int


def _qr_fix(W):
    Q, R = np.linalg.qr(W)
    return Q * np.sign(np.diag(R))


def optimize_W(problem: StiefelProblem, W0: np.ndarray, max_steps: int = 100,
               grad_tol: float = 1e-8, window: int = 5, rho: float = 1e-4,
               max_halvings: int = 30) -> StiefelResult:
    """Ascend F_W from W0; the returned objective never falls below F_W(W0)."""
    _require_feasible(W0, tol=1e-8)
    W = W0.copy()
    F = objective_FW(problem, W)
    best_W, best_F = W.copy(), F
    g_window = [-F]
    stalled = False
    refixes = 0
    a = None
    prev = None  # (W, G_descent)
    steps = 0

    for it in range(max_steps):
        J = gradient_J(problem, W)
        grad_norm = float(np.linalg.norm(tangent_project(W, J)))
        if grad_norm <= grad_tol * (1.0 + abs(F)):
            break
        G = -J  # descend the negated objective
        M = G.T @ W
        A_norm2 = 2.0 * (float(np.sum(G * G)) - float(np.sum(M * M.T)))  # |A|_F^2
        A_norm2 = max(A_norm2, 0.0)
        if A_norm2 <= 1e-300:
            break

        if prev is None:
            a = 0.1 / (np.sqrt(A_norm2) + 1e-30)
        else:
            # alternating Barzilai-Borwein steps with the signed curvature
            # test: in locally concave stretches (s.v <= 0) take a long step
            # to escape, and let the line search cut it back if needed
            s = W - prev[0]
            v = G - prev[1]
            sv = float(np.sum(s * v))
            if sv > 0:
                if it % 2 == 0:
                    a = float(np.sum(s * s)) / sv
                else:
                    vv = float(np.sum(v * v))
                    a = sv / vv if vv > 0 else a
            else:
                a = max(2.0 * a, 1.0 / (np.sqrt(A_norm2) + 1e-30))
        a = float(np.clip(a, 1e-10, 1e10))

        g_ref = max(g_window)
        accepted = False
        trial = a
        for _ in range(max_halvings + 1):
            try:
                W_new = cayley_step(W, G, trial)
                F_new = objective_FW(problem, W_new)
            except (CayleyStepError, ValueError):
                trial *= 0.5
                continue
            if -F_new <= g_ref - rho * trial * 0.5 * A_norm2:
                accepted = True
                break
            trial *= 0.5
        if not accepted:
            stalled = True
            break

        prev = (W.copy(), G)
        W, F = W_new, F_new
        steps += 1
        drift = np.max(np.abs(W.T @ W - np.eye(W.shape[1])))
        if drift > 1e-10:
            W = _qr_fix(W)
            F = objective_FW(problem, W)
            refixes += 1
        g_window.append(-F)
        if len(g_window) > window:
            g_window.pop(0)
        if F > best_F:
            best_F, best_W = F, W.copy()

    grad_norm = float(np.linalg.norm(tangent_project(best_W, gradient_J(problem, best_W))))
    return StiefelResult(best_W, best_F, steps, grad_norm, stalled, refixes)

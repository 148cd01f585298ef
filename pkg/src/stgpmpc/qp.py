"""Self-contained dense convex QP solver.

Primal-dual interior-point method with Mehrotra predictor-corrector for

    minimize    0.5 z' H z + g' z
    subject to  G z <= h,    lb <= z <= ub

sized for condensed receding-horizon problems (a few hundred variables).
Box bounds are kept out of the general constraint matrix so their normal-
equation contribution stays diagonal.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import scipy.linalg

from .errors import NumericalError


@dataclass
class QPSolution:
    z: np.ndarray
    status: str                  # "optimal" | "max_iterations"
    iterations: int
    duality_gap: float
    lam_general: np.ndarray
    lam_lower: np.ndarray
    lam_upper: np.ndarray

    @property
    def ok(self) -> bool:
        return self.status == "optimal"


def solve_qp(
    H: np.ndarray,
    g: np.ndarray,
    G: np.ndarray | None = None,
    h: np.ndarray | None = None,
    lb: np.ndarray | None = None,
    ub: np.ndarray | None = None,
    tol: float = 1e-9,
    max_iterations: int = 60,
) -> QPSolution:
    H = np.asarray(H, dtype=float)
    g = np.asarray(g, dtype=float).reshape(-1)
    n = g.size
    G = np.zeros((0, n)) if G is None else np.asarray(G, dtype=float).reshape(-1, n)
    h = np.zeros(0) if h is None else np.asarray(h, dtype=float).reshape(-1)
    lb = np.full(n, -np.inf) if lb is None else np.asarray(lb, dtype=float).reshape(-1)
    ub = np.full(n, np.inf) if ub is None else np.asarray(ub, dtype=float).reshape(-1)

    # Internal scaling: normalizing the objective and equilibrating the
    # constraint rows leaves the minimizer unchanged but keeps the central
    # path well-behaved when costs span many orders of magnitude (e.g. large
    # L1 slack weights). Multipliers are scaled back on exit.
    obj_scale = max(1.0, np.abs(g).max(initial=0.0), np.abs(H).max(initial=0.0))
    H = H / obj_scale
    g = g / obj_scale
    row_scale = np.ones(G.shape[0])
    if G.shape[0]:
        row_scale = np.maximum(np.abs(G).max(axis=1), 1e-8)
        G = G / row_scale[:, np.newaxis]
        h = h / row_scale

    lo_idx = np.flatnonzero(np.isfinite(lb))
    up_idx = np.flatnonzero(np.isfinite(ub))
    m_g, m_lo, m_up = G.shape[0], lo_idx.size, up_idx.size
    m = m_g + m_lo + m_up

    if m == 0:
        z = _solve_spd(H, -g)
        return QPSolution(
            z=z, status="optimal", iterations=0, duality_gap=0.0,
            lam_general=np.zeros(0), lam_lower=np.zeros(n), lam_upper=np.zeros(n),
        )

    def residual_primal(z: np.ndarray) -> np.ndarray:
        parts = []
        if m_g:
            parts.append(G @ z - h)
        if m_up:
            parts.append(z[up_idx] - ub[up_idx])
        if m_lo:
            parts.append(lb[lo_idx] - z[lo_idx])
        return np.concatenate(parts) if parts else np.zeros(0)

    def constraint_t_apply(v: np.ndarray) -> np.ndarray:
        """C' v for the stacked constraint matrix [G; I_ub; -I_lb]."""
        out = np.zeros(n)
        if m_g:
            out += G.T @ v[:m_g]
        if m_up:
            out[up_idx] += v[m_g : m_g + m_up]
        if m_lo:
            out[lo_idx] -= v[m_g + m_up :]
        return out

    def constraint_apply(v: np.ndarray) -> np.ndarray:
        parts = []
        if m_g:
            parts.append(G @ v)
        if m_up:
            parts.append(v[up_idx])
        if m_lo:
            parts.append(-v[lo_idx])
        return np.concatenate(parts)

    z = np.clip(np.zeros(n), lb, ub)
    slack = np.maximum(-residual_primal(z), 1.0)
    lam = np.ones(m)

    g_scale = 1.0 + np.abs(g).max(initial=0.0)
    h_scale = 1.0 + np.abs(h).max(initial=0.0) if m_g else 1.0

    status = "max_iterations"
    iteration = 0
    for iteration in range(1, max_iterations + 1):
        rp = residual_primal(z) + slack
        rd = H @ z + g + constraint_t_apply(lam)
        mu = float(slack @ lam) / m

        if np.abs(rd).max() <= tol * g_scale and np.abs(rp).max() <= tol * h_scale and mu <= tol:
            status = "optimal"
            break

        d = lam / slack
        kkt = H.copy()
        if m_g:
            scaled = G * np.sqrt(d[:m_g])[:, np.newaxis]
            kkt += scaled.T @ scaled
        if m_up:
            kkt[up_idx, up_idx] += d[m_g : m_g + m_up]
        if m_lo:
            kkt[lo_idx, lo_idx] += d[m_g + m_up :]
        try:
            chol = _factor_spd(kkt)
        except NumericalError:
            # Endgame breakdown: complementarity pairs have collapsed beyond
            # what the factorization can represent. Accept the current point
            # if it is reasonably converged.
            relaxed = 1e4 * tol
            if np.abs(rd).max() <= relaxed * g_scale and np.abs(rp).max() <= relaxed * h_scale and mu <= relaxed:
                status = "optimal"
                break
            raise

        def newton_step(rc: np.ndarray):
            rhs = -rd + constraint_t_apply(rc / slack - d * rp)
            dz = scipy.linalg.cho_solve(chol, rhs, check_finite=False)
            ds = -rp - constraint_apply(dz)
            dlam = -(rc + lam * ds) / slack
            return dz, ds, dlam

        # Affine (predictor) direction.
        rc_aff = slack * lam
        dz_a, ds_a, dlam_a = newton_step(rc_aff)
        alpha_aff = _max_step(slack, ds_a, lam, dlam_a)
        mu_aff = float((slack + alpha_aff * ds_a) @ (lam + alpha_aff * dlam_a)) / m
        sigma = min(1.0, max(mu_aff / mu, 0.0)) ** 3 if mu > 0 else 0.0

        # Centering-plus-corrector direction.
        rc = slack * lam + ds_a * dlam_a - sigma * mu
        dz, ds, dlam = newton_step(rc)
        alpha = 0.99 * _max_step(slack, ds, lam, dlam)
        z = z + alpha * dz
        slack = slack + alpha * ds
        lam = lam + alpha * dlam

    gap = float(slack @ lam) / m * obj_scale
    lam_lower = np.zeros(n)
    lam_upper = np.zeros(n)
    if m_up:
        lam_upper[up_idx] = obj_scale * lam[m_g : m_g + m_up]
    if m_lo:
        lam_lower[lo_idx] = obj_scale * lam[m_g + m_up :]
    return QPSolution(
        z=z, status=status, iterations=iteration, duality_gap=gap,
        lam_general=obj_scale * lam[:m_g] / row_scale, lam_lower=lam_lower, lam_upper=lam_upper,
    )


def _max_step(s: np.ndarray, ds: np.ndarray, lam: np.ndarray, dlam: np.ndarray) -> float:
    alpha = 1.0
    neg_s = ds < 0
    if np.any(neg_s):
        alpha = min(alpha, float(np.min(-s[neg_s] / ds[neg_s])))
    neg_l = dlam < 0
    if np.any(neg_l):
        alpha = min(alpha, float(np.min(-lam[neg_l] / dlam[neg_l])))
    return alpha


def _factor_spd(a: np.ndarray):
    reg = 0.0
    for _ in range(8):
        try:
            return scipy.linalg.cho_factor(a + reg * np.eye(a.shape[0]), lower=True, check_finite=False)
        except np.linalg.LinAlgError:
            reg = max(reg * 100.0, 1e-12)
    raise NumericalError("QP KKT matrix is not positive definite even with regularization")


def _solve_spd(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    return scipy.linalg.cho_solve(_factor_spd(a), b, check_finite=False)

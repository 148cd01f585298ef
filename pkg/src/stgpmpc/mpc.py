"""Zero-order stochastic MPC: uncertainty propagation, chance-constraint
tightening, and a real-time-iteration SQP step over the condensed QP.

The covariance trajectory and the resulting constraint back-offs are computed
from the previous iterate and held fixed inside the QP ("zero order"), so the
state covariances never appear as optimization variables. One call to
:func:`sqp_rti_step` performs exactly one SQP iteration: shift, one model
evaluation pass along the horizon, covariance propagation, linearization, one
convex QP, full step.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Protocol

import numpy as np
import scipy.special

from .errors import NumericalError
from .linalg import require_finite, symmetrize
from .qp import QPSolution, solve_qp


def inverse_normal_cdf(p: float) -> float:
    """Standard normal quantile; the tightening factor for probability p."""
    if not 0.0 < p < 1.0:
        raise ValueError(f"probability must be in (0, 1), got {p}")
    return float(scipy.special.ndtri(p))


# --------------------------------------------------------------------------
# Model interfaces


class DiscreteDynamics(Protocol):
    n_states: int
    n_inputs: int

    def step(self, x: np.ndarray, u: np.ndarray): ...

    def step_batch(self, xs: np.ndarray, us: np.ndarray): ...


@dataclass
class ResidualPrediction:
    """Residual model output along a horizon: moments plus state/input Jacobians."""

    mean: np.ndarray       # (T, n_g)
    variance: np.ndarray   # (T, n_g)
    jac_x: np.ndarray      # (T, n_g, n_x)
    jac_u: np.ndarray      # (T, n_g, n_u)


class ResidualModel(Protocol):
    n_outputs: int

    def predict_along(self, xs: np.ndarray, us: np.ndarray) -> ResidualPrediction: ...


class ZeroResidualModel:
    """Identically-zero residual with zero variance: plugging it in reduces
    the controller to nominal MPC."""

    def __init__(self, n_outputs: int, n_states: int, n_inputs: int):
        self.n_outputs = n_outputs
        self._nx = n_states
        self._nu = n_inputs

    def predict_along(self, xs: np.ndarray, us: np.ndarray) -> ResidualPrediction:
        t = xs.shape[0]
        return ResidualPrediction(
            mean=np.zeros((t, self.n_outputs)),
            variance=np.zeros((t, self.n_outputs)),
            jac_x=np.zeros((t, self.n_outputs, self._nx)),
            jac_u=np.zeros((t, self.n_outputs, self._nu)),
        )


class CostModel(Protocol):
    def stage_quadratics(self, xs: np.ndarray, us: np.ndarray): ...

    def terminal_quadratic(self, x: np.ndarray): ...


@dataclass
class QuadraticCost:
    """Plain tracking cost 0.5 (x - x_ref)' Q (x - x_ref) + 0.5 u' R u."""

    Q: np.ndarray
    R: np.ndarray
    Q_terminal: np.ndarray
    x_ref: np.ndarray

    def stage_quadratics(self, xs, us):
        t = xs.shape[0]
        q = (xs - self.x_ref) @ self.Q.T
        r = us @ self.R.T
        return q, np.broadcast_to(self.Q, (t, *self.Q.shape)), r, np.broadcast_to(self.R, (t, *self.R.shape))

    def terminal_quadratic(self, x):
        return self.Q_terminal @ (x - self.x_ref), self.Q_terminal


class ConstraintModel(Protocol):
    n_stage: int
    n_terminal: int
    stage_probabilities: np.ndarray
    stage_soft: np.ndarray
    terminal_probabilities: np.ndarray
    terminal_soft: np.ndarray

    def stage_values(self, xs: np.ndarray, us: np.ndarray): ...

    def terminal_values(self, x: np.ndarray): ...


class NoConstraints:
    n_stage = 0
    n_terminal = 0
    stage_probabilities = np.zeros(0)
    stage_soft = np.zeros(0, dtype=bool)
    terminal_probabilities = np.zeros(0)
    terminal_soft = np.zeros(0, dtype=bool)

    def stage_values(self, xs, us):
        t = xs.shape[0]
        nx, nu = xs.shape[1], us.shape[1]
        return np.zeros((t, 0)), np.zeros((t, 0, nx)), np.zeros((t, 0, nu))

    def terminal_values(self, x):
        return np.zeros(0), np.zeros((0, x.shape[0]))


# --------------------------------------------------------------------------
# RK4 discretization with exact sensitivities


class RK4Dynamics:
    """Classical RK4 step of a continuous-time model, with Jacobians obtained
    by differentiating the RK4 composition exactly."""

    def __init__(self, model, dt: float):
        if dt <= 0:
            raise ValueError(f"step size must be positive, got {dt}")
        self.model = model
        self.dt = dt
        self.n_states = model.n_states
        self.n_inputs = model.n_inputs

    def step(self, x, u):
        xn, jx, ju = self.step_batch(x[np.newaxis], u[np.newaxis])
        return xn[0], jx[0], ju[0]

    def step_batch(self, xs, us):
        dt = self.dt
        eye = np.eye(self.n_states)
        k1, a1, b1 = self.model.derivative_batch(xs, us)
        k2, a2, b2 = self.model.derivative_batch(xs + 0.5 * dt * k1, us)
        k3, a3, b3 = self.model.derivative_batch(xs + 0.5 * dt * k2, us)
        k4, a4, b4 = self.model.derivative_batch(xs + dt * k3, us)
        x_next = xs + dt / 6.0 * (k1 + 2.0 * k2 + 2.0 * k3 + k4)

        dk1 = a1
        dk2 = a2 @ (eye + 0.5 * dt * dk1)
        dk3 = a3 @ (eye + 0.5 * dt * dk2)
        dk4 = a4 @ (eye + dt * dk3)
        jx = eye + dt / 6.0 * (dk1 + 2.0 * dk2 + 2.0 * dk3 + dk4)

        du1 = b1
        du2 = 0.5 * dt * (a2 @ du1) + b2
        du3 = 0.5 * dt * (a3 @ du2) + b3
        du4 = dt * (a4 @ du3) + b4
        ju = dt / 6.0 * (du1 + 2.0 * du2 + 2.0 * du3 + du4)
        return x_next, jx, ju


# --------------------------------------------------------------------------
# OCP specification and iterate


@dataclass
class OCPSpec:
    horizon: int
    dynamics: DiscreteDynamics
    cost: CostModel
    residual_map: np.ndarray          # B, (n_x, n_g)
    process_noise: np.ndarray         # Sigma_w, (n_x, n_x)
    constraints: ConstraintModel = field(default_factory=NoConstraints)
    u_lower: np.ndarray | None = None
    u_upper: np.ndarray | None = None
    slack_weight: float = 1e4
    qp_tolerance: float = 1e-8

    def __post_init__(self) -> None:
        if self.horizon < 1:
            raise ValueError(f"horizon must be >= 1, got {self.horizon}")
        self.residual_map = np.asarray(self.residual_map, dtype=float)
        self.process_noise = symmetrize(np.asarray(self.process_noise, dtype=float))
        for p in np.concatenate(
            [self.constraints.stage_probabilities, self.constraints.terminal_probabilities]
        ):
            if not 0.5 <= p < 1.0:
                raise ValueError(f"constraint probabilities must be in [0.5, 1), got {p}")

    @property
    def n_states(self) -> int:
        return self.dynamics.n_states

    @property
    def n_inputs(self) -> int:
        return self.dynamics.n_inputs


@dataclass
class OCPIterate:
    mu_x: np.ndarray           # (T+1, n_x)
    u: np.ndarray              # (T, n_u)
    sigma_x: np.ndarray        # (T+1, n_x, n_x)
    beta_stage: np.ndarray     # (T, k_stage)
    beta_terminal: np.ndarray  # (k_terminal,)

    def copy(self) -> "OCPIterate":
        return OCPIterate(
            mu_x=self.mu_x.copy(),
            u=self.u.copy(),
            sigma_x=self.sigma_x.copy(),
            beta_stage=self.beta_stage.copy(),
            beta_terminal=self.beta_terminal.copy(),
        )


def cold_start(spec: OCPSpec, x0: np.ndarray) -> OCPIterate:
    t = spec.horizon
    return OCPIterate(
        mu_x=np.tile(np.asarray(x0, dtype=float), (t + 1, 1)),
        u=np.zeros((t, spec.n_inputs)),
        sigma_x=np.zeros((t + 1, spec.n_states, spec.n_states)),
        beta_stage=np.zeros((t, spec.constraints.n_stage)),
        beta_terminal=np.zeros(spec.constraints.n_terminal),
    )


@dataclass
class StepInfo:
    """Diagnostics from one real-time iteration."""

    status: str
    qp_iterations: int
    control: np.ndarray
    predicted_next_state: np.ndarray
    max_slack: float = 0.0
    qp_data: dict | None = None


def propagate_covariance(
    spec: OCPSpec, jac_total: np.ndarray, residual_variance: np.ndarray
) -> np.ndarray:
    """Stage-wise first-order covariance propagation from Sigma_0 = 0.

    Sigma_{i+1} = A_i Sigma_i A_i' + B diag(var_i) B' + Sigma_w, with A_i the
    Jacobian of the combined nominal-plus-residual-mean dynamics.
    """
    t = spec.horizon
    n_x = spec.n_states
    sigmas = np.zeros((t + 1, n_x, n_x))
    bmap = spec.residual_map
    for i in range(t):
        if not np.all(np.isfinite(jac_total[i])):
            raise NumericalError(f"non-finite dynamics Jacobian at stage {i}")
        gp_term = (bmap * residual_variance[i]) @ bmap.T
        sigmas[i + 1] = symmetrize(
            jac_total[i] @ sigmas[i] @ jac_total[i].T + gp_term + spec.process_noise
        )
    return sigmas


def tighten_constraints(
    sigmas: np.ndarray,
    jac_rows: np.ndarray,
    probabilities: np.ndarray,
) -> np.ndarray:
    """Back-offs alpha_j * sqrt(C_j Sigma C_j') per stage and constraint row.

    ``jac_rows`` has shape (T, k, n_x) and is evaluated at the frozen iterate;
    ``sigmas`` are the stage covariances aligned with those rows.
    """
    t, k = jac_rows.shape[0], jac_rows.shape[1]
    beta = np.zeros((t, k))
    if k == 0:
        return beta
    alpha = np.array([inverse_normal_cdf(p) for p in probabilities])
    for i in range(t):
        quad = np.einsum("jx,xy,jy->j", jac_rows[i], sigmas[i], jac_rows[i])
        beta[i] = alpha * np.sqrt(np.clip(quad, 0.0, None))
    return beta


def shift_iterate(iterate: OCPIterate) -> OCPIterate:
    """Standard RTI warm start: shift one stage, duplicate the last."""
    out = iterate.copy()
    out.mu_x[:-1] = iterate.mu_x[1:]
    out.mu_x[-1] = iterate.mu_x[-1]
    out.u[:-1] = iterate.u[1:]
    out.u[-1] = iterate.u[-1]
    return out


def sqp_rti_step(
    spec: OCPSpec,
    iterate: OCPIterate,
    model: ResidualModel,
    x0: np.ndarray,
    shift: bool = True,
    collect_qp: bool = False,
) -> tuple[OCPIterate, StepInfo]:
    """One real-time iteration of the zero-order SQP scheme.

    Shift the previous solution, run a single residual-model pass along it,
    freeze covariances and tightenings, linearize, solve one convex QP, and
    apply the full step. The first input of the returned iterate is the
    control to apply.
    """
    x0 = np.asarray(x0, dtype=float)
    require_finite("initial state", x0)
    t, n_x, n_u = spec.horizon, spec.n_states, spec.n_inputs
    guess = shift_iterate(iterate) if shift else iterate.copy()
    xs, us = guess.mu_x[:t], guess.u

    # (b) one model evaluation pass along the previous iterate
    pred = model.predict_along(xs, us)
    require_finite("residual model output", pred.mean, pred.variance, pred.jac_x, pred.jac_u)

    # (d) linearize dynamics around the iterate
    f_next, jx, ju = spec.dynamics.step_batch(xs, us)
    bmap = spec.residual_map
    mean_next = f_next + pred.mean @ bmap.T
    jac_total = jx + np.einsum("xg,igy->ixy", bmap, pred.jac_x)
    jac_input = ju + np.einsum("xg,igu->ixu", bmap, pred.jac_u)
    defects = mean_next - guess.mu_x[1:]

    # (c) freeze covariances and tightenings from the pre-step iterate
    sigmas = propagate_covariance(spec, jac_total, pred.variance)
    cons = spec.constraints
    h_stage, cx_stage, cu_stage = cons.stage_values(xs, us)
    h_term, cx_term = cons.terminal_values(guess.mu_x[t])
    beta_stage = tighten_constraints(sigmas[:t], cx_stage, cons.stage_probabilities)
    beta_term = tighten_constraints(
        sigmas[t : t + 1], cx_term[np.newaxis], cons.terminal_probabilities
    )[0]

    # Condensing: dx_i = xbar_i + S_i du
    n_du = t * n_u
    S = np.zeros((t + 1, n_x, n_du))
    xbar = np.zeros((t + 1, n_x))
    xbar[0] = x0 - guess.mu_x[0]
    for i in range(t):
        S[i + 1] = jac_total[i] @ S[i]
        S[i + 1][:, i * n_u : (i + 1) * n_u] += jac_input[i]
        xbar[i + 1] = jac_total[i] @ xbar[i] + defects[i]

    # Quadratic cost model along the iterate
    q_lin, q_hess, r_lin, r_hess = spec.cost.stage_quadratics(xs, us)
    qT_lin, qT_hess = spec.cost.terminal_quadratic(guess.mu_x[t])
    all_q = np.concatenate([q_lin, qT_lin[np.newaxis]], axis=0)
    all_Q = np.concatenate([q_hess, qT_hess[np.newaxis]], axis=0)
    weighted = np.matmul(all_Q, S)
    H_u = np.einsum("inU,inV->UV", S, weighted, optimize=True)
    g_u = np.einsum("inU,in->U", S, all_q + np.einsum("ixy,iy->ix", all_Q, xbar), optimize=True)
    for i in range(t):
        blk = slice(i * n_u, (i + 1) * n_u)
        H_u[blk, blk] += r_hess[i]
        g_u[blk] += r_lin[i]

    # Inequality rows: general constraints on du (and slack columns for the
    # soft ones); input bounds go in as box constraints directly.
    rows, rhs, softness = [], [], []
    for i in range(t):
        for j in range(cons.n_stage):
            rows.append(cx_stage[i, j] @ S[i] + _embed_input_row(cu_stage[i, j], i, n_du))
            rhs.append(-h_stage[i, j] - beta_stage[i, j] - cx_stage[i, j] @ xbar[i])
            softness.append(bool(cons.stage_soft[j]))
    for j in range(cons.n_terminal):
        rows.append(cx_term[j] @ S[t])
        rhs.append(-h_term[j] - beta_term[j] - cx_term[j] @ xbar[t])
        softness.append(bool(cons.terminal_soft[j]))

    n_soft = int(np.sum(softness))
    n_var = n_du + n_soft
    H = np.zeros((n_var, n_var))
    H[:n_du, :n_du] = H_u
    if n_soft:
        H[n_du:, n_du:] = 1e-10 * np.eye(n_soft)
    g_full = np.concatenate([g_u, np.full(n_soft, spec.slack_weight)])

    G = np.zeros((len(rows), n_var))
    soft_index = 0
    for r, (row, is_soft) in enumerate(zip(rows, softness)):
        G[r, :n_du] = row
        if is_soft:
            G[r, n_du + soft_index] = -1.0
            soft_index += 1
    h_vec = np.asarray(rhs)

    lb = np.full(n_var, -np.inf)
    ub = np.full(n_var, np.inf)
    if spec.u_lower is not None:
        lb[:n_du] = (np.tile(spec.u_lower, t) - us.reshape(-1))
    if spec.u_upper is not None:
        ub[:n_du] = (np.tile(spec.u_upper, t) - us.reshape(-1))
    if n_soft:
        lb[n_du:] = 0.0

    # (e) solve the convex QP
    sol = solve_qp(
        H,
        g_full,
        G=G if len(rows) else None,
        h=h_vec if len(rows) else None,
        lb=lb,
        ub=ub,
        tol=spec.qp_tolerance,
    )

    # (f) apply the full step
    du = sol.z[:n_du].reshape(t, n_u)
    new = OCPIterate(
        mu_x=guess.mu_x + xbar + np.einsum("inU,U->in", S, sol.z[:n_du]),
        u=us + du,
        sigma_x=sigmas,
        beta_stage=beta_stage,
        beta_terminal=beta_term,
    )
    info = StepInfo(
        status=sol.status,
        qp_iterations=sol.iterations,
        control=new.u[0].copy(),
        predicted_next_state=new.mu_x[1].copy(),
        max_slack=float(sol.z[n_du:].max(initial=0.0)),
        qp_data={"H": H, "g": g_full, "G": G, "h": h_vec, "lb": lb, "ub": ub} if collect_qp else None,
    )
    return new, info


def _embed_input_row(cu_row: np.ndarray, stage: int, n_du: int) -> np.ndarray:
    out = np.zeros(n_du)
    n_u = cu_row.shape[0]
    out[stage * n_u : (stage + 1) * n_u] = cu_row
    return out

import math

import numpy as np
import pytest

from stgpmpc.mpc import (
    NoConstraints,
    OCPIterate,
    OCPSpec,
    QuadraticCost,
    ResidualPrediction,
    RK4Dynamics,
    ZeroResidualModel,
    cold_start,
    inverse_normal_cdf,
    propagate_covariance,
    shift_iterate,
    sqp_rti_step,
    tighten_constraints,
)
from stgpmpc.temporal_ssm import matrix_exp


def phi(x):
    return 0.5 * (1.0 + math.erf(x / math.sqrt(2.0)))


def quantile_by_bisection(p, lo=-10.0, hi=10.0):
    for _ in range(200):
        mid = 0.5 * (lo + hi)
        if phi(mid) < p:
            lo = mid
        else:
            hi = mid
    return 0.5 * (lo + hi)


class TestInverseNormalCdf:
    def test_median(self):
        assert inverse_normal_cdf(0.5) == 0.0

    def test_known_quantile(self):
        assert inverse_normal_cdf(0.975) == pytest.approx(1.959964, abs=1e-6)

    def test_phi_of_one(self):
        assert inverse_normal_cdf(0.8413447) == pytest.approx(1.0, abs=1e-4)

    def test_against_bisection_oracle(self):
        for p in [0.51, 0.6, 0.75, 0.9, 0.95, 0.99, 0.999]:
            assert inverse_normal_cdf(p) == pytest.approx(quantile_by_bisection(p), abs=1e-9)

    def test_monotone_in_probability(self):
        ps = np.linspace(0.5, 0.999, 40)
        alphas = [inverse_normal_cdf(p) for p in ps]
        assert np.all(np.diff(alphas) > 0)

    def test_domain_validation(self):
        for bad in [0.0, 1.0, -0.5, 1.5]:
            with pytest.raises(ValueError):
                inverse_normal_cdf(bad)


class LinearDynamics:
    """Direct discrete-time linear model implementing the dynamics protocol."""

    def __init__(self, A, B):
        self.A = np.asarray(A, dtype=float)
        self.B = np.asarray(B, dtype=float)
        self.n_states = self.A.shape[0]
        self.n_inputs = self.B.shape[1]

    def step(self, x, u):
        return self.A @ x + self.B @ u, self.A, self.B

    def step_batch(self, xs, us):
        t = xs.shape[0]
        return (
            xs @ self.A.T + us @ self.B.T,
            np.broadcast_to(self.A, (t, *self.A.shape)).copy(),
            np.broadcast_to(self.B, (t, *self.B.shape)).copy(),
        )


class LinearContinuous:
    def __init__(self, A, B):
        self.A = np.asarray(A, dtype=float)
        self.B = np.asarray(B, dtype=float)
        self.n_states = self.A.shape[0]
        self.n_inputs = self.B.shape[1]

    def derivative_batch(self, xs, us):
        t = xs.shape[0]
        return (
            xs @ self.A.T + us @ self.B.T,
            np.broadcast_to(self.A, (t, *self.A.shape)).copy(),
            np.broadcast_to(self.B, (t, *self.B.shape)).copy(),
        )


class TestRK4:
    def test_zero_dynamics(self):
        model = LinearContinuous(np.zeros((3, 3)), np.zeros((3, 1)))
        dyn = RK4Dynamics(model, dt=0.1)
        x = np.array([1.0, -2.0, 0.5])
        xn, jx, ju = dyn.step(x, np.zeros(1))
        assert np.array_equal(xn, x)
        assert np.array_equal(jx, np.eye(3))
        assert np.array_equal(ju, np.zeros((3, 1)))

    def test_linear_matches_matrix_exponential(self):
        # One RK4 step agrees with the matrix exponential to O(dt^5); at
        # dt = 1/30 that is ~1e-9 for ||A|| <= 1 and ~1e-6 for ||A|| <= 5.
        rng = np.random.default_rng(0)
        for _ in range(10):
            A = rng.normal(size=(3, 3))
            A *= rng.uniform(0.2, 1.0) / max(np.linalg.norm(A), 1e-12)
            dyn = RK4Dynamics(LinearContinuous(A, np.zeros((3, 1))), dt=1.0 / 30.0)
            x = rng.normal(size=3)
            xn, jx, _ = dyn.step(x, np.zeros(1))
            expected = matrix_exp(A / 30.0)
            assert np.abs(jx - expected).max() <= 1e-9
            assert np.abs(xn - expected @ x).max() <= 1e-9
        for _ in range(10):
            A = rng.normal(size=(3, 3))
            A *= rng.uniform(1.0, 5.0) / max(np.linalg.norm(A), 1e-12)
            dyn = RK4Dynamics(LinearContinuous(A, np.zeros((3, 1))), dt=1.0 / 30.0)
            _, jx, _ = dyn.step(rng.normal(size=3), np.zeros(1))
            assert np.abs(jx - matrix_exp(A / 30.0)).max() <= 1e-5

    def test_double_integrator_exact(self):
        A = np.array([[0.0, 1.0], [0.0, 0.0]])
        B = np.array([[0.0], [1.0]])
        dyn = RK4Dynamics(LinearContinuous(A, B), dt=1.0)
        xn, _, _ = dyn.step(np.zeros(2), np.ones(1))
        assert xn == pytest.approx([0.5, 1.0], abs=1e-14)


def make_lqr_spec(T=20, seed=0, sigma_w=0.0):
    rng = np.random.default_rng(seed)
    A = np.array([[1.0, 0.1], [0.0, 0.95]])
    B = np.array([[0.0], [0.1]])
    Q = np.diag([2.0, 0.5])
    R = np.array([[0.4]])
    QT = np.diag([4.0, 1.0])
    spec = OCPSpec(
        horizon=T,
        dynamics=LinearDynamics(A, B),
        cost=QuadraticCost(Q=Q, R=R, Q_terminal=QT, x_ref=np.zeros(2)),
        residual_map=np.zeros((2, 1)),
        process_noise=sigma_w * np.eye(2),
    )
    return spec, (A, B, Q, R, QT)


def riccati_solution(A, B, Q, R, QT, x0, T):
    P = QT.copy()
    gains = []
    for _ in range(T):
        K = np.linalg.solve(R + B.T @ P @ B, B.T @ P @ A)
        P = Q + A.T @ P @ (A - B @ K)
        gains.append(K)
    gains.reverse()
    xs = [np.asarray(x0, dtype=float)]
    us = []
    for i in range(T):
        u = -gains[i] @ xs[-1]
        us.append(u)
        xs.append(A @ xs[-1] + B @ u)
    return np.array(xs), np.array(us)


class TestSqpRtiStep:
    def test_lqr_converges_to_riccati(self):
        spec, (A, B, Q, R, QT) = make_lqr_spec(T=25)
        x0 = np.array([1.5, -0.8])
        xs_ref, us_ref = riccati_solution(A, B, Q, R, QT, x0, 25)
        model = ZeroResidualModel(1, 2, 1)
        iterate = cold_start(spec, x0)
        for _ in range(3):
            iterate, info = sqp_rti_step(spec, iterate, model, x0)
            assert info.status == "optimal"
        assert np.abs(iterate.u - us_ref).max() <= 1e-6
        assert np.abs(iterate.mu_x - xs_ref).max() <= 1e-6

    def test_fixed_point_of_repeated_steps(self):
        spec, _ = make_lqr_spec(T=15)
        x0 = np.array([0.7, 0.2])
        model = ZeroResidualModel(1, 2, 1)
        iterate = cold_start(spec, x0)
        iterate, _ = sqp_rti_step(spec, iterate, model, x0)
        prev = iterate.copy()
        iterate, _ = sqp_rti_step(spec, iterate, model, x0)
        assert np.abs(iterate.u - prev.u).max() <= 1e-8
        assert np.abs(iterate.mu_x - prev.mu_x).max() <= 1e-8

    def test_control_is_first_input(self):
        spec, _ = make_lqr_spec(T=10)
        model = ZeroResidualModel(1, 2, 1)
        x0 = np.array([1.0, 0.0])
        iterate, info = sqp_rti_step(spec, cold_start(spec, x0), model, x0)
        assert np.array_equal(info.control, iterate.u[0])
        assert np.array_equal(info.predicted_next_state, iterate.mu_x[1])


class BoundedConstraints:
    """|x_0| <= limit as two soft rows, probability p."""

    def __init__(self, limit, p=0.5, n_states=2, n_inputs=1):
        self.limit = limit
        self.n_stage = 2
        self.n_terminal = 2
        self.stage_probabilities = np.array([p, p])
        self.stage_soft = np.array([True, True])
        self.terminal_probabilities = np.array([p, p])
        self.terminal_soft = np.array([True, True])
        self._nx = n_states
        self._nu = n_inputs

    def stage_values(self, xs, us):
        t = xs.shape[0]
        h = np.stack([xs[:, 0] - self.limit, -xs[:, 0] - self.limit], axis=1)
        cx = np.zeros((t, 2, self._nx))
        cx[:, 0, 0] = 1.0
        cx[:, 1, 0] = -1.0
        return h, cx, np.zeros((t, 2, self._nu))

    def terminal_values(self, x):
        h = np.array([x[0] - self.limit, -x[0] - self.limit])
        cx = np.zeros((2, self._nx))
        cx[0, 0] = 1.0
        cx[1, 0] = -1.0
        return h, cx


def make_constrained_spec(limit=0.5, p=0.5, sigma_w=0.0, slack_weight=1e4):
    A = np.array([[1.0, 0.1], [0.0, 1.0]])
    B = np.array([[0.005], [0.1]])
    spec = OCPSpec(
        horizon=30,
        dynamics=LinearDynamics(A, B),
        cost=QuadraticCost(
            Q=np.diag([1.0, 0.1]),
            R=np.array([[0.05]]),
            Q_terminal=np.diag([1.0, 0.1]),
            x_ref=np.array([1.0, 0.0]),  # reference beyond the limit
        ),
        residual_map=np.zeros((2, 1)),
        process_noise=sigma_w * np.eye(2),
        constraints=BoundedConstraints(limit, p=p),
        u_lower=np.array([-5.0]),
        u_upper=np.array([5.0]),
        slack_weight=slack_weight,
    )
    return spec


class TestConstraintsAndTightening:
    def test_propagate_additive_accumulation(self):
        spec, _ = make_lqr_spec(T=6, sigma_w=0.3)
        jt = np.broadcast_to(np.eye(2), (6, 2, 2)).copy()
        sig = propagate_covariance(spec, jt, np.zeros((6, 1)))
        for i in range(7):
            assert np.allclose(sig[i], 0.3 * i * np.eye(2), atol=1e-14)

    def test_propagate_one_step_formula(self):
        spec, _ = make_lqr_spec(T=1, sigma_w=0.1)
        spec.residual_map = np.array([[1.0], [2.0]])
        jt = np.zeros((1, 2, 2))
        var = np.array([[0.5]])
        sig = propagate_covariance(spec, jt, var)
        expected = 0.5 * np.outer([1.0, 2.0], [1.0, 2.0]) + 0.1 * np.eye(2)
        assert np.allclose(sig[1], expected, atol=1e-14)

    def test_propagate_scalar_geometric_limit(self):
        a, sw = 0.9, 0.04

        class ScalarDyn:
            n_states, n_inputs = 1, 1

        spec = OCPSpec(
            horizon=400,
            dynamics=ScalarDyn(),
            cost=None,
            residual_map=np.zeros((1, 1)),
            process_noise=np.array([[sw]]),
        )
        jt = np.full((400, 1, 1), a)
        sig = propagate_covariance(spec, jt, np.zeros((400, 1)))
        assert sig[-1][0, 0] == pytest.approx(sw / (1 - a * a), rel=1e-6)

    def test_tighten_zero_covariance(self):
        jr = np.random.default_rng(1).normal(size=(4, 3, 2))
        beta = tighten_constraints(np.zeros((4, 2, 2)), jr, np.array([0.9, 0.9, 0.9]))
        assert np.array_equal(beta, np.zeros((4, 3)))

    def test_tighten_median_probability(self):
        sig = np.broadcast_to(4.0 * np.eye(2), (3, 2, 2)).copy()
        jr = np.zeros((3, 1, 2))
        jr[:, 0, 0] = 1.0
        beta = tighten_constraints(sig, jr, np.array([0.5]))
        assert np.array_equal(beta, np.zeros((3, 1)))

    def test_tighten_scalar_formula(self):
        sig = np.array([[[4.0]]])
        jr = np.array([[[1.0]]])
        beta = tighten_constraints(sig, jr, np.array([0.975]))
        assert beta[0, 0] == pytest.approx(1.959964 * 2.0, abs=1e-5)

    def test_tightenings_nonnegative_and_monotone_in_probability(self):
        rng = np.random.default_rng(2)
        sig = np.stack([np.diag(rng.uniform(0.1, 2.0, 2)) for _ in range(5)])
        jr = rng.normal(size=(5, 2, 2))
        prev = None
        for p in [0.5, 0.7, 0.9, 0.99]:
            beta = tighten_constraints(sig, jr, np.array([p, p]))
            assert np.all(beta >= 0.0)
            if prev is not None:
                assert np.all(beta >= prev - 1e-14)
            prev = beta

    def test_soft_constraint_respected_when_feasible(self):
        spec = make_constrained_spec(limit=0.5)
        model = ZeroResidualModel(1, 2, 1)
        x0 = np.zeros(2)
        iterate = cold_start(spec, x0)
        for _ in range(30):
            iterate, info = sqp_rti_step(spec, iterate, model, x0)
            x0 = iterate.mu_x[1]
        # Steady state should hug the constraint without crossing it much.
        assert iterate.mu_x[:, 0].max() <= 0.5 + 1e-4

    def test_tightening_shrinks_reachable_set(self):
        # Sigma_w small enough that the back-offs stay below the limit,
        # otherwise the soft constraints saturate and the comparison is moot.
        loose = make_constrained_spec(limit=0.5, p=0.5, sigma_w=0.001)
        tight = make_constrained_spec(limit=0.5, p=0.8, sigma_w=0.001)
        model = ZeroResidualModel(1, 2, 1)
        x0 = np.zeros(2)
        it_l, _ = sqp_rti_step(loose, cold_start(loose, x0), model, x0)
        it_t, _ = sqp_rti_step(tight, cold_start(tight, x0), model, x0)
        assert np.all(it_t.beta_stage >= it_l.beta_stage)
        assert it_t.beta_stage.max() < 0.5
        assert it_t.mu_x[:, 0].max() < it_l.mu_x[:, 0].max()


class CountingModel:
    def __init__(self, inner):
        self.inner = inner
        self.calls = 0
        self.n_outputs = inner.n_outputs

    def predict_along(self, xs, us):
        self.calls += 1
        return self.inner.predict_along(xs, us)


class TestZeroOrderStructure:
    def test_single_model_pass_per_step(self):
        spec, _ = make_lqr_spec(T=12)
        model = CountingModel(ZeroResidualModel(1, 2, 1))
        x0 = np.array([0.5, 0.0])
        iterate = cold_start(spec, x0)
        for k in range(5):
            iterate, _ = sqp_rti_step(spec, iterate, model, x0)
            assert model.calls == k + 1

    def test_beta_frozen_from_pre_step_iterate(self):
        spec = make_constrained_spec(limit=0.4, p=0.95, sigma_w=0.05)
        model = ZeroResidualModel(1, 2, 1)
        x0 = np.array([0.2, 0.1])
        iterate = cold_start(spec, x0)
        iterate, _ = sqp_rti_step(spec, iterate, model, x0)

        # Recompute the tightenings from the shifted pre-step iterate by hand.
        shifted = shift_iterate(iterate)
        xs, us = shifted.mu_x[:30], shifted.u
        _, jx, ju = spec.dynamics.step_batch(xs, us)
        sig = propagate_covariance(spec, jx, np.zeros((30, 1)))
        _, cx, _ = spec.constraints.stage_values(xs, us)
        expected = tighten_constraints(sig[:30], cx, spec.constraints.stage_probabilities)

        new_it, _ = sqp_rti_step(spec, iterate, model, x0)
        assert np.array_equal(new_it.beta_stage, expected)

    def test_zero_model_reduces_to_nominal_bitwise(self):
        # With p = 0.5 the covariance has no pathway into the QP: the QP data
        # must be bitwise identical whatever Sigma_w is.
        x0 = np.array([0.3, -0.1])
        model = ZeroResidualModel(1, 2, 1)
        qp_data = []
        for sigma_w in [0.0, 5.0]:
            spec = make_constrained_spec(limit=0.5, p=0.5, sigma_w=sigma_w)
            it = cold_start(spec, x0)
            it, info1 = sqp_rti_step(spec, it, model, x0, collect_qp=True)
            it, info2 = sqp_rti_step(spec, it, model, x0, collect_qp=True)
            qp_data.append((info1.qp_data, info2.qp_data))
        for a, b in zip(qp_data[0], qp_data[1]):
            for key in ["H", "g", "G", "h", "lb", "ub"]:
                assert np.array_equal(a[key], b[key]), key

"""Self-validation checks run by the ``validate`` command.

Each check exercises one of the numerical guarantees the library is built
on (kernel/state-space equivalence, square-root vs dense filtering, oracle
equivalence at inducing locations, gradient correctness) and reports the
measured worst case against its tolerance.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import scipy.linalg

from .gp_models import Dataset, SpatialKernelSpec, exact_stgp_predict, rbf_kernel
from .mpc import RK4Dynamics, inverse_normal_cdf
from .stgp import InducingConfig, TrainingBatch, evaluate, evaluate_with_mean_jacobian, init, update
from .temporal_ssm import TemporalKernelSpec, build_ssm, discretize, matern_cov, matrix_exp
from .vehicle import BicycleModel, VehicleParams


@dataclass
class CheckResult:
    name: str
    measured: float
    tolerance: float

    @property
    def passed(self) -> bool:
        return self.measured <= self.tolerance

    def line(self) -> str:
        status = "PASS" if self.passed else "FAIL"
        return f"[{status}] {self.name}: measured {self.measured:.3e} (tolerance {self.tolerance:.1e})"


def check_kernel_ssm_equivalence() -> CheckResult:
    worst = 0.0
    for nu in (0.5, 1.5, 2.5):
        for sigma_t in (0.3, 1.0, 3.0):
            spec = TemporalKernelSpec(nu=nu, sigma_t=sigma_t)
            ssm = build_ssm(spec)
            for tau in np.linspace(0.0, 5.0 * sigma_t, 100):
                k_ssm = (ssm.H @ matrix_exp(tau * ssm.F) @ ssm.P_inf @ ssm.H.T)[0, 0]
                worst = max(worst, abs(k_ssm - float(matern_cov(tau, spec))))
    return CheckResult("kernel/state-space equivalence", worst, 1e-8)


def check_discretization_stationarity() -> CheckResult:
    worst = 0.0
    for nu in (0.5, 1.5, 2.5):
        ssm = build_ssm(TemporalKernelSpec(nu=nu, sigma_t=1.0))
        for dt in (0.0, 1.0 / 30.0, 0.5, 5.0):
            d = discretize(ssm, dt)
            worst = max(worst, np.abs(d.A @ ssm.P_inf @ d.A.T + d.Q - ssm.P_inf).max())
    return CheckResult("discrete stationarity A P A' + Q = P", worst, 1e-10)


def check_matrix_exponential() -> CheckResult:
    rng = np.random.default_rng(0)
    worst = 0.0
    for _ in range(30):
        m = rng.normal(size=(3, 3))
        m *= rng.uniform(0.1, 5.0) / max(np.linalg.norm(m), 1e-12)
        ref = scipy.linalg.expm(m)
        worst = max(worst, np.abs(matrix_exp(m) - ref).max() / max(np.abs(ref).max(), 1.0))
    return CheckResult("matrix exponential vs reference", worst, 1e-12)


def _small_inducing_config(m=3, dt=1.0 / 30.0, noise=0.05):
    rng = np.random.default_rng(7)
    return InducingConfig(
        locations=rng.uniform(-1, 1, size=(m, 2)),
        spatial=SpatialKernelSpec(signal_variance=1.2, lengthscales=(0.8, 1.1)),
        temporal=TemporalKernelSpec(nu=1.5, sigma_t=1.0),
        noise_variance=noise,
        dt=dt,
    )


def check_oracle_equivalence() -> CheckResult:
    config = _small_inducing_config(m=3)
    cache, state = init(config)
    rng = np.random.default_rng(8)
    rows_t, rows_y = [], []
    for _ in range(25):
        y = rng.normal(size=(3, 1))
        update(state, cache, TrainingBatch(Z=config.locations, y=y))
        rows_t.append(np.full(3, state.now))
        rows_y.append(y)
    data = Dataset(
        Z=np.tile(config.locations, (25, 1)),
        t=np.concatenate(rows_t),
        Y=np.vstack(rows_y),
        noise_variance=config.noise_variance,
    )
    post = evaluate(state, cache, config.locations)
    query_t = state.now + config.dt * np.arange(1, 4)
    ref = exact_stgp_predict(data, config.locations, query_t, config.spatial, config.temporal)
    worst = max(
        float(np.abs(post.mean - ref.mean).max() / np.maximum(np.abs(ref.mean), 1e-3).max()),
        float((np.abs(post.variance - ref.variance) / np.maximum(ref.variance, 1e-3)).max()),
    )
    return CheckResult("recursive GP matches exact GP at inducing points", worst, 1e-6)


def check_square_root_vs_dense() -> CheckResult:
    config = _small_inducing_config(m=3, noise=0.04)
    cache, state = init(config)
    ssm = build_ssm(config.temporal)
    disc = discretize(ssm, config.dt)
    m = config.n_inducing
    kvv_eff = rbf_kernel(config.locations, config.locations, config.spatial)
    kvv_eff = kvv_eff + 1e-8 * config.spatial.signal_variance * np.eye(m)
    a_bar = np.kron(np.eye(m), disc.A)
    q_bar = np.kron(kvv_eff, disc.Q)
    h_bar = np.kron(np.eye(m), ssm.H)
    kvv_inv = np.linalg.inv(kvv_eff)
    mean = np.zeros((a_bar.shape[0], 1))
    sigma = np.kron(kvv_eff, ssm.P_inf)

    rng = np.random.default_rng(9)
    worst = 0.0
    for _ in range(300):
        Z = rng.uniform(-1, 1, size=(1, 2))
        y = rng.normal(size=(1, 1))
        update(state, cache, TrainingBatch(Z=Z, y=y))

        mean = a_bar @ mean
        sigma = a_bar @ sigma @ a_bar.T + q_bar
        kzv = rbf_kernel(Z, config.locations, config.spatial)
        obs = kzv @ kvv_inv @ h_bar
        r = (
            rbf_kernel(Z, Z, config.spatial)
            - kzv @ kvv_inv @ kzv.T
            + (config.noise_variance + 1e-8 * config.spatial.signal_variance) * np.eye(1)
        )
        s_mat = obs @ sigma @ obs.T + r
        gain = sigma @ obs.T @ np.linalg.inv(s_mat)
        mean = mean + gain @ (y - obs @ mean)
        closed = np.eye(sigma.shape[0]) - gain @ obs
        sigma = closed @ sigma @ closed.T + gain @ r @ gain.T

        worst = max(worst, float(np.abs(state.mean - mean).max()))
        worst = max(worst, float(np.abs(state.covariance() - sigma).max()))
    return CheckResult("square-root filter matches dense recursion", worst, 1e-8)


def check_gp_mean_jacobian() -> CheckResult:
    config = _small_inducing_config(m=4)
    cache, state = init(config)
    rng = np.random.default_rng(10)
    for _ in range(20):
        update(state, cache, TrainingBatch(Z=rng.uniform(-1, 1, size=(1, 2)), y=rng.normal(size=1)))
    queries = rng.uniform(-1, 1, size=(5, 2))
    _, jac = evaluate_with_mean_jacobian(state, cache, queries)
    eps = 1e-5
    worst = 0.0
    for k in range(queries.shape[0]):
        for d in range(2):
            qp_, qm_ = queries.copy(), queries.copy()
            qp_[k, d] += eps
            qm_[k, d] -= eps
            fd = (evaluate(state, cache, qp_).mean[k] - evaluate(state, cache, qm_).mean[k]) / (2 * eps)
            worst = max(worst, float(np.max(np.abs(jac[k, :, d] - fd) / np.maximum(np.abs(fd), 1.0))))
    return CheckResult("GP posterior-mean Jacobian vs finite differences", worst, 1e-5)


def check_vehicle_jacobians() -> CheckResult:
    model = BicycleModel(VehicleParams())
    rng = np.random.default_rng(11)
    eps = 1e-6
    worst = 0.0
    for _ in range(25):
        x = np.zeros(9)
        x[2] = rng.uniform(-np.pi, np.pi)
        x[3] = rng.uniform(0.3, 3.0)
        x[4] = rng.uniform(-0.6, 0.6)
        x[5] = rng.uniform(-3, 3)
        x[6] = rng.uniform(-1, 1)
        x[7] = rng.uniform(-0.4, 0.4)
        u = rng.uniform(-2, 2, 3)
        _, jx, _ = model.derivative_batch(x[np.newaxis], u[np.newaxis])
        for d in range(9):
            xp_, xm_ = x.copy(), x.copy()
            xp_[d] += eps
            xm_[d] -= eps
            fd = (
                model.derivative_batch(xp_[np.newaxis], u[np.newaxis])[0][0]
                - model.derivative_batch(xm_[np.newaxis], u[np.newaxis])[0][0]
            ) / (2 * eps)
            worst = max(worst, float(np.max(np.abs(jx[0, :, d] - fd) / np.maximum(np.abs(fd), 1.0))))
    return CheckResult("vehicle dynamics Jacobians vs finite differences", worst, 1e-5)


def check_rk4_against_exponential() -> CheckResult:
    class Linear:
        def __init__(self, a):
            self.a = a
            self.n_states = a.shape[0]
            self.n_inputs = 1

        def derivative_batch(self, xs, us):
            t = xs.shape[0]
            return (
                xs @ self.a.T,
                np.broadcast_to(self.a, (t, *self.a.shape)).copy(),
                np.zeros((t, self.n_states, 1)),
            )

    rng = np.random.default_rng(12)
    worst = 0.0
    for _ in range(10):
        a = rng.normal(size=(3, 3))
        a *= rng.uniform(0.2, 1.0) / max(np.linalg.norm(a), 1e-12)
        dyn = RK4Dynamics(Linear(a), dt=1.0 / 30.0)
        _, jx, _ = dyn.step(rng.normal(size=3), np.zeros(1))
        worst = max(worst, float(np.abs(jx - matrix_exp(a / 30.0)).max()))
    return CheckResult("RK4 transition vs matrix exponential", worst, 1e-9)


def check_normal_quantile() -> CheckResult:
    import math

    def phi(x):
        return 0.5 * (1.0 + math.erf(x / math.sqrt(2.0)))

    worst = 0.0
    for p in (0.6, 0.8413447, 0.95, 0.975, 0.999):
        alpha = inverse_normal_cdf(p)
        worst = max(worst, abs(phi(alpha) - p))
    return CheckResult("normal quantile round-trip through erf", worst, 1e-9)


ALL_CHECKS = (
    check_kernel_ssm_equivalence,
    check_discretization_stationarity,
    check_matrix_exponential,
    check_oracle_equivalence,
    check_square_root_vs_dense,
    check_gp_mean_jacobian,
    check_vehicle_jacobians,
    check_rk4_against_exponential,
    check_normal_quantile,
)


def run_all_checks() -> list[CheckResult]:
    return [check() for check in ALL_CHECKS]

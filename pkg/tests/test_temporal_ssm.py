import math

import numpy as np
import pytest
import scipy.linalg

from stgpmpc.errors import ConfigurationError, NumericalError
from stgpmpc.temporal_ssm import (
    TemporalKernelSpec,
    build_ssm,
    discretize,
    matern_cov,
    matrix_exp,
    solve_lyapunov,
)

ALL_NUS = [0.5, 1.5, 2.5]


def taylor_expm_reference(m, terms=60):
    """Independent scaled Taylor-series reference for the matrix exponential."""
    m = np.asarray(m, dtype=float)
    s = max(0, int(np.ceil(np.log2(max(np.linalg.norm(m, np.inf), 1e-300) / 0.5))))
    x = m / 2**s
    acc = np.eye(m.shape[0])
    term = np.eye(m.shape[0])
    for k in range(1, terms):
        term = term @ x / k
        acc = acc + term
    for _ in range(s):
        acc = acc @ acc
    return acc


class TestMaternCov:
    def test_zero_lag_is_one(self):
        for nu in ALL_NUS:
            spec = TemporalKernelSpec(nu=nu, sigma_t=0.7)
            assert matern_cov(0.0, spec) == pytest.approx(1.0, abs=1e-15)

    def test_exponential_closed_form(self):
        spec = TemporalKernelSpec(nu=0.5, sigma_t=1.0)
        assert matern_cov(1.0, spec) == pytest.approx(math.exp(-1.0), abs=1e-12)

    def test_matern32_closed_form(self):
        spec = TemporalKernelSpec(nu=1.5, sigma_t=1.0)
        expected = (1.0 + math.sqrt(3.0)) * math.exp(-math.sqrt(3.0))
        assert matern_cov(1.0, spec) == pytest.approx(expected, abs=1e-12)

    def test_matern52_closed_form(self):
        spec = TemporalKernelSpec(nu=2.5, sigma_t=2.0)
        g = math.sqrt(5.0) / 2.0 * 0.8
        expected = (1.0 + g + g * g / 3.0) * math.exp(-g)
        assert matern_cov(0.8, spec) == pytest.approx(expected, abs=1e-12)

    def test_unsupported_smoothness_rejected(self):
        with pytest.raises(ConfigurationError):
            TemporalKernelSpec(nu=2.0, sigma_t=1.0)
        with pytest.raises(ConfigurationError):
            TemporalKernelSpec(nu=1.5, sigma_t=0.0)

    def test_negative_lag_rejected(self):
        spec = TemporalKernelSpec(nu=0.5, sigma_t=1.0)
        with pytest.raises(ValueError):
            matern_cov(-0.1, spec)


class TestSolveLyapunov:
    def test_scalar(self):
        P = solve_lyapunov(np.array([[-1.0]]), np.array([[1.0]]))
        assert P[0, 0] == pytest.approx(0.5, abs=1e-14)

    def test_decoupled_diagonal(self):
        P = solve_lyapunov(np.diag([-1.0, -2.0]), np.eye(2))
        assert np.allclose(P, np.diag([0.5, 0.25]), atol=1e-14)

    def test_matern32_hand_solution(self):
        spec = TemporalKernelSpec(nu=1.5, sigma_t=1.0)
        ssm = build_ssm(spec)
        expected = np.diag([1.0 / (12.0 * math.sqrt(3.0)), 1.0 / (4.0 * math.sqrt(3.0))])
        assert np.allclose(ssm.P_inf, expected, atol=1e-14)

    def test_residual_small_on_random_hurwitz(self):
        rng = np.random.default_rng(0)
        for _ in range(20):
            d = rng.integers(1, 4)
            F = rng.normal(size=(d, d)) - 3.0 * np.eye(d)
            Wr = rng.normal(size=(d, d))
            W = Wr @ Wr.T
            P = solve_lyapunov(F, W)
            assert np.linalg.norm(F @ P + P @ F.T + W) <= 1e-10 * np.linalg.norm(W)

    def test_non_hurwitz_raises(self):
        with pytest.raises(NumericalError):
            solve_lyapunov(np.array([[0.0]]), np.array([[1.0]]))


class TestMatrixExp:
    def test_zero_matrix(self):
        assert np.array_equal(matrix_exp(np.zeros((3, 3))), np.eye(3))

    def test_nilpotent(self):
        m = np.array([[0.0, 1.0], [0.0, 0.0]])
        assert np.allclose(matrix_exp(m), np.array([[1.0, 1.0], [0.0, 1.0]]), atol=1e-15)

    def test_diagonal(self):
        out = matrix_exp(np.diag([-1.0, -2.0]))
        assert np.allclose(out, np.diag([math.exp(-1.0), math.exp(-2.0)]), rtol=1e-13)

    def test_against_taylor_reference(self):
        rng = np.random.default_rng(7)
        for _ in range(50):
            m = rng.normal(size=(3, 3))
            m *= rng.uniform(0.1, 5.0) / max(np.linalg.norm(m), 1e-12)
            ref = taylor_expm_reference(m)
            assert np.allclose(matrix_exp(m), ref, rtol=1e-12, atol=1e-13)

    def test_against_scipy(self):
        rng = np.random.default_rng(8)
        for _ in range(50):
            m = rng.normal(size=(3, 3))
            m *= rng.uniform(0.1, 10.0) / max(np.linalg.norm(m), 1e-12)
            ref = scipy.linalg.expm(m)
            scale = max(np.abs(ref).max(), 1.0)
            assert np.abs(matrix_exp(m) - ref).max() <= 1e-12 * scale


class TestBuildSSM:
    def test_matern12_scalar_realization(self):
        ssm = build_ssm(TemporalKernelSpec(nu=0.5, sigma_t=1.0))
        assert ssm.F.shape == (1, 1) and ssm.F[0, 0] == pytest.approx(-1.0)
        assert ssm.G[0, 0] == 1.0
        assert ssm.P_inf[0, 0] == pytest.approx(0.5, abs=1e-14)
        assert ssm.H[0, 0] == pytest.approx(math.sqrt(2.0), abs=1e-14)

    def test_matern32_companion_form(self):
        ssm = build_ssm(TemporalKernelSpec(nu=1.5, sigma_t=1.0))
        expected_F = np.array([[0.0, 1.0], [-3.0, -2.0 * math.sqrt(3.0)]])
        assert np.allclose(ssm.F, expected_F, atol=1e-14)
        assert ssm.H[0, 0] == pytest.approx(math.sqrt(12.0 * math.sqrt(3.0)), abs=1e-12)
        assert ssm.H[0, 1] == 0.0

    def test_matern32_scaled_lengthscale(self):
        ssm = build_ssm(TemporalKernelSpec(nu=1.5, sigma_t=2.0))
        assert ssm.gamma == pytest.approx(math.sqrt(3.0) / 2.0)
        assert np.allclose(ssm.F[1], [-0.75, -math.sqrt(3.0)], atol=1e-14)

    @pytest.mark.parametrize("nu", ALL_NUS)
    @pytest.mark.parametrize("sigma_t", [0.3, 1.0, 3.0])
    def test_normalization(self, nu, sigma_t):
        ssm = build_ssm(TemporalKernelSpec(nu=nu, sigma_t=sigma_t))
        assert abs((ssm.H @ ssm.P_inf @ ssm.H.T)[0, 0] - 1.0) <= 1e-10

    @pytest.mark.parametrize("nu", ALL_NUS)
    @pytest.mark.parametrize("sigma_t", [0.3, 1.0, 3.0])
    def test_kernel_ssm_equivalence(self, nu, sigma_t):
        spec = TemporalKernelSpec(nu=nu, sigma_t=sigma_t)
        ssm = build_ssm(spec)
        taus = np.linspace(0.0, 5.0 * sigma_t, 120)
        worst = 0.0
        for tau in taus:
            k_ssm = (ssm.H @ matrix_exp(tau * ssm.F) @ ssm.P_inf @ ssm.H.T)[0, 0]
            worst = max(worst, abs(k_ssm - float(matern_cov(tau, spec))))
        assert worst <= 1e-8

    @pytest.mark.parametrize("nu", ALL_NUS)
    def test_hurwitz(self, nu):
        ssm = build_ssm(TemporalKernelSpec(nu=nu, sigma_t=0.5))
        assert np.all(np.linalg.eigvals(ssm.F).real < 0)


class TestDiscretize:
    def test_zero_step_is_identity(self):
        ssm = build_ssm(TemporalKernelSpec(nu=2.5, sigma_t=1.3))
        d = discretize(ssm, 0.0)
        assert np.array_equal(d.A, np.eye(3))
        assert np.array_equal(d.Q, np.zeros((3, 3)))

    def test_scalar_ou_closed_form(self):
        ssm = build_ssm(TemporalKernelSpec(nu=0.5, sigma_t=1.0))
        d = discretize(ssm, 1.0)
        assert d.A[0, 0] == pytest.approx(math.exp(-1.0), rel=1e-12)
        assert d.Q[0, 0] == pytest.approx(0.5 * (1.0 - math.exp(-2.0)), rel=1e-12)

    @pytest.mark.parametrize("nu", ALL_NUS)
    @pytest.mark.parametrize("dt", [0.0, 1.0 / 30.0, 0.5, 5.0])
    def test_stationarity_identity(self, nu, dt):
        ssm = build_ssm(TemporalKernelSpec(nu=nu, sigma_t=1.0))
        d = discretize(ssm, dt)
        residual = d.A @ ssm.P_inf @ d.A.T + d.Q - ssm.P_inf
        assert np.abs(residual).max() <= 1e-10

    def test_q_is_psd(self):
        ssm = build_ssm(TemporalKernelSpec(nu=2.5, sigma_t=0.3))
        for dt in [1e-6, 1e-3, 0.1, 2.0]:
            d = discretize(ssm, dt)
            assert np.linalg.eigvalsh(d.Q).min() >= 0.0
            assert np.allclose(d.Q, d.Q.T)

    def test_negative_step_rejected(self):
        ssm = build_ssm(TemporalKernelSpec(nu=0.5, sigma_t=1.0))
        with pytest.raises(ValueError):
            discretize(ssm, -0.1)

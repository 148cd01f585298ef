"""Spatial kernels and reference GP regressors.

The exact batch spatio-temporal GP here is the brute-force oracle used to
validate the recursive approximation; the subset-of-data wrapper is the
truncation baseline that keeps only the most recent observations.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
import scipy.linalg

from .errors import ConfigurationError, NumericalError
from .linalg import JITTER_MAX, JITTER_START, symmetrize
from .temporal_ssm import TemporalKernelSpec, matern_cov

DEFAULT_ORACLE_CAP = 2000


@dataclass(frozen=True)
class SpatialKernelSpec:
    """ARD squared-exponential kernel: signal variance and per-dimension lengthscales."""

    signal_variance: float
    lengthscales: tuple[float, ...]

    def __post_init__(self) -> None:
        if not self.signal_variance > 0:
            raise ConfigurationError(f"signal variance must be positive, got {self.signal_variance}")
        object.__setattr__(self, "lengthscales", tuple(float(l) for l in self.lengthscales))
        if not all(l > 0 for l in self.lengthscales):
            raise ConfigurationError(f"lengthscales must be positive, got {self.lengthscales}")

    @property
    def input_dim(self) -> int:
        return len(self.lengthscales)


@dataclass
class Dataset:
    """Timestamped training set: spatial inputs Z, times t, residual targets Y."""

    Z: np.ndarray
    t: np.ndarray
    Y: np.ndarray
    noise_variance: float | np.ndarray

    def __post_init__(self) -> None:
        self.Z = np.atleast_2d(np.asarray(self.Z, dtype=float))
        self.t = np.asarray(self.t, dtype=float).reshape(-1)
        self.Y = np.asarray(self.Y, dtype=float)
        if self.Y.ndim == 1:
            self.Y = self.Y[:, np.newaxis]
        if not (self.Z.shape[0] == self.t.shape[0] == self.Y.shape[0]):
            raise ValueError(
                f"row counts disagree: Z {self.Z.shape[0]}, t {self.t.shape[0]}, Y {self.Y.shape[0]}"
            )
        if self.t.size > 1 and np.any(np.diff(self.t) < 0):
            raise ValueError("timestamps must be nondecreasing")

    def __len__(self) -> int:
        return self.Z.shape[0]

    @property
    def n_outputs(self) -> int:
        return self.Y.shape[1]


@dataclass
class GPPosterior:
    """Posterior mean (N, n_g) and per-output covariance (n_g, N, N)."""

    mean: np.ndarray
    cov: np.ndarray

    @property
    def variance(self) -> np.ndarray:
        """Marginal variances, shape (N, n_g), clipped at zero for round-off."""
        return np.clip(np.diagonal(self.cov, axis1=1, axis2=2).T, 0.0, None)

    @property
    def stddev(self) -> np.ndarray:
        return np.sqrt(self.variance)


def rbf_kernel(Z1: np.ndarray, Z2: np.ndarray, spec: SpatialKernelSpec) -> np.ndarray:
    """Cross-covariance matrix [k(z1_i, z2_j)] for the ARD squared-exponential kernel."""
    Z1 = np.atleast_2d(np.asarray(Z1, dtype=float))
    Z2 = np.atleast_2d(np.asarray(Z2, dtype=float))
    if Z1.shape[1] != spec.input_dim or Z2.shape[1] != spec.input_dim:
        raise ValueError(
            f"input dimension mismatch: kernel expects {spec.input_dim}, "
            f"got {Z1.shape[1]} and {Z2.shape[1]}"
        )
    ell = np.asarray(spec.lengthscales)
    diff = Z1[:, np.newaxis, :] / ell - Z2[np.newaxis, :, :] / ell
    return spec.signal_variance * np.exp(-0.5 * np.einsum("ijk,ijk->ij", diff, diff))


def rbf_kernel_gradient(z: np.ndarray, Z2: np.ndarray, spec: SpatialKernelSpec) -> np.ndarray:
    """d k(z, Z2_j) / dz, shape (len(Z2), n_z): -k(z, v) * (z - v) / ell^2."""
    z = np.asarray(z, dtype=float).reshape(1, -1)
    Z2 = np.atleast_2d(np.asarray(Z2, dtype=float))
    k = rbf_kernel(z, Z2, spec)[0]
    ell2 = np.square(np.asarray(spec.lengthscales))
    return -k[:, np.newaxis] * (z - Z2) / ell2


def _product_gram(Z1, t1, Z2, t2, k_s: SpatialKernelSpec, k_t: TemporalKernelSpec) -> np.ndarray:
    spatial = rbf_kernel(Z1, Z2, k_s)
    lags = np.abs(np.asarray(t1, dtype=float)[:, np.newaxis] - np.asarray(t2, dtype=float)[np.newaxis, :])
    return spatial * matern_cov(lags, k_t)


def _solve_posterior(gram, Ky_center, y, k_star, k_starstar, signal_variance):
    """Shared conditioning path: factorize Ky, return (mean, cov)."""
    n = gram.shape[0]
    jitter = JITTER_START
    chol = None
    while jitter <= JITTER_MAX * (1.0 + 1e-12):
        try:
            chol = np.linalg.cholesky(Ky_center + jitter * signal_variance * np.eye(n))
            break
        except np.linalg.LinAlgError:
            jitter *= 10.0
    if chol is None:
        raise NumericalError("Gram matrix not factorizable even with jitter escalation")
    alpha = scipy.linalg.cho_solve((chol, True), y)
    mean = k_star @ alpha
    v = scipy.linalg.solve_triangular(chol, k_star.T, lower=True)
    cov = symmetrize(k_starstar - v.T @ v)
    return mean, cov


def exact_stgp_predict(
    data: Dataset,
    query_Z: np.ndarray,
    query_t: np.ndarray,
    k_s: SpatialKernelSpec,
    k_t: TemporalKernelSpec,
    oracle_cap: int = DEFAULT_ORACLE_CAP,
) -> GPPosterior:
    """Exact batch GP posterior under the separable kernel k_s(z, z') * k_t(|t - t'|).

    Each output column is treated as an independent GP sharing the kernel.
    Cubic in len(data); refuses more than ``oracle_cap`` points.
    """
    query_Z = np.atleast_2d(np.asarray(query_Z, dtype=float))
    query_t = np.asarray(query_t, dtype=float).reshape(-1)
    if query_Z.shape[0] != query_t.shape[0]:
        raise ValueError("query_Z and query_t row counts disagree")
    n = len(data)
    if n > oracle_cap:
        raise ConfigurationError(f"exact GP oracle capped at {oracle_cap} points, got {n}")
    n_q = query_Z.shape[0]
    k_starstar = _product_gram(query_Z, query_t, query_Z, query_t, k_s, k_t)

    if n == 0:
        n_g = data.n_outputs if data.Y.size else 1
        cov = np.broadcast_to(k_starstar, (n_g, n_q, n_q)).copy()
        return GPPosterior(mean=np.zeros((n_q, n_g)), cov=cov)

    gram = _product_gram(data.Z, data.t, data.Z, data.t, k_s, k_t)
    k_star = _product_gram(query_Z, query_t, data.Z, data.t, k_s, k_t)
    noise = np.asarray(data.noise_variance, dtype=float)
    n_g = data.n_outputs

    if noise.ndim == 0 or np.all(noise == noise.reshape(-1)[0]):
        sigma2 = float(noise.reshape(-1)[0]) if noise.ndim else float(noise)
        mean, cov = _solve_posterior(
            gram, gram + sigma2 * np.eye(n), data.Y, k_star, k_starstar, k_s.signal_variance
        )
        return GPPosterior(mean=mean, cov=np.broadcast_to(cov, (n_g, n_q, n_q)).copy())

    if noise.shape != (n_g,):
        raise ValueError(f"noise variance must be scalar or shape ({n_g},)")
    means = np.empty((n_q, n_g))
    covs = np.empty((n_g, n_q, n_q))
    for j in range(n_g):
        mean_j, cov_j = _solve_posterior(
            gram, gram + noise[j] * np.eye(n), data.Y[:, j], k_star, k_starstar, k_s.signal_variance
        )
        means[:, j] = mean_j
        covs[j] = cov_j
    return GPPosterior(mean=means, cov=covs)


def sod_truncate(data: Dataset, budget: int) -> Dataset:
    """Keep the most recent ``budget`` rows (stable order)."""
    if budget < 1:
        raise ValueError(f"budget must be >= 1, got {budget}")
    n = len(data)
    if n <= budget:
        return data
    return Dataset(
        Z=data.Z[n - budget :],
        t=data.t[n - budget :],
        Y=data.Y[n - budget :],
        noise_variance=data.noise_variance,
    )

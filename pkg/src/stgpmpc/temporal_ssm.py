"""Half-integer Matern temporal kernels and their exact state-space realizations.

A Matern kernel with smoothness nu = D - 1/2 is the output covariance of a
D-dimensional linear stochastic differential equation driven by unit-intensity
white noise. This module builds that realization (companion dynamics F, input
G, output H scaled so the stationary output variance is exactly k(0) = 1, and
stationary covariance P_inf), and discretizes it for a fixed step size.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .errors import ConfigurationError, NumericalError
from .linalg import symmetrize

SUPPORTED_SMOOTHNESS = (0.5, 1.5, 2.5)


@dataclass(frozen=True)
class TemporalKernelSpec:
    """Half-integer Matern kernel: smoothness nu in {1/2, 3/2, 5/2}, lengthscale seconds."""

    nu: float
    sigma_t: float

    def __post_init__(self) -> None:
        if not any(math.isclose(self.nu, s) for s in SUPPORTED_SMOOTHNESS):
            raise ConfigurationError(
                f"unsupported smoothness nu={self.nu}; supported: {SUPPORTED_SMOOTHNESS}"
            )
        if not self.sigma_t > 0:
            raise ConfigurationError(f"temporal lengthscale must be positive, got {self.sigma_t}")

    @property
    def order(self) -> int:
        """State dimension D = nu + 1/2."""
        return int(round(self.nu + 0.5))

    @property
    def decay_rate(self) -> float:
        """gamma = sqrt(2 nu) / sigma_t."""
        return math.sqrt(2.0 * self.nu) / self.sigma_t


@dataclass(frozen=True)
class TemporalSSM:
    """Continuous-time realization: dx = F x dt + G dw, output H x."""

    spec: TemporalKernelSpec
    F: np.ndarray
    G: np.ndarray
    H: np.ndarray
    P_inf: np.ndarray
    gamma: float
    q: float

    @property
    def dim(self) -> int:
        return self.F.shape[0]


@dataclass(frozen=True)
class DiscreteTransition:
    """Exact discretization over a step dt: A = exp(dt F), Q = P_inf - A P_inf A^T."""

    A: np.ndarray
    Q: np.ndarray
    dt: float


def matern_cov(tau, spec: TemporalKernelSpec):
    """Normalized Matern covariance k(tau), k(0) = 1, via the half-integer closed forms."""
    tau = np.asarray(tau, dtype=float)
    if np.any(tau < 0):
        raise ValueError("tau must be nonnegative")
    g = spec.decay_rate * tau
    decay = np.exp(-g)
    if spec.order == 1:
        poly = 1.0
    elif spec.order == 2:
        poly = 1.0 + g
    else:
        poly = 1.0 + g + g * g / 3.0
    return poly * decay


def solve_lyapunov(F: np.ndarray, W: np.ndarray) -> np.ndarray:
    """Solve F P + P F^T = -W by Kronecker vectorization (intended for D <= 3)."""
    F = np.asarray(F, dtype=float)
    W = np.asarray(W, dtype=float)
    d = F.shape[0]
    lhs = np.kron(F, np.eye(d)) + np.kron(np.eye(d), F)
    try:
        p = np.linalg.solve(lhs, -W.reshape(-1))
    except np.linalg.LinAlgError as exc:
        raise NumericalError(f"Lyapunov system is singular (F not Hurwitz?): {exc}") from exc
    P = symmetrize(p.reshape(d, d))
    residual = np.linalg.norm(F @ P + P @ F.T + W)
    if residual > 1e-10 * max(np.linalg.norm(W), 1e-300):
        raise NumericalError(f"Lyapunov residual too large: {residual:g}")
    return P


def matrix_exp(M: np.ndarray) -> np.ndarray:
    """Matrix exponential by scaling-and-squaring with a Taylor core.

    Sized for the small (D <= 3) kernel dynamics matrices; accurate to
    ~1e-14 relative for moderate norms.
    """
    M = np.asarray(M, dtype=float)
    if M.ndim != 2 or M.shape[0] != M.shape[1]:
        raise ValueError("matrix_exp expects a square matrix")
    norm = np.linalg.norm(M, ord=np.inf)
    if norm == 0.0:
        return np.eye(M.shape[0])
    squarings = max(0, int(np.ceil(np.log2(norm / 0.25))))
    scaled = M / (2.0**squarings)
    result = np.eye(M.shape[0])
    term = np.eye(M.shape[0])
    for k in range(1, 21):
        term = term @ scaled / k
        result = result + term
    for _ in range(squarings):
        result = result @ result
    return result


def build_ssm(spec: TemporalKernelSpec) -> TemporalSSM:
    """State-space realization of the kernel.

    F is in companion form with last row -binom(D, i-1) * gamma^(D-i+1);
    the diffusion coefficient q = ((D-1)!)^2 / (2D-2)! * (2 gamma)^(2D-1)
    is split as sqrt(q) into H so that H P_inf H^T = k(0) = 1 with a
    unit-intensity input G = e_D.
    """
    d = spec.order
    gamma = spec.decay_rate
    F = np.zeros((d, d))
    for i in range(d - 1):
        F[i, i + 1] = 1.0
    for i in range(1, d + 1):
        F[d - 1, i - 1] = -math.comb(d, i - 1) * gamma ** (d - i + 1)
    G = np.zeros((d, 1))
    G[d - 1, 0] = 1.0
    q = (math.factorial(d - 1) ** 2 / math.factorial(2 * d - 2)) * (2.0 * gamma) ** (2 * d - 1)
    H = np.zeros((1, d))
    H[0, 0] = math.sqrt(q)
    P_inf = solve_lyapunov(F, G @ G.T)
    return TemporalSSM(spec=spec, F=F, G=G, H=H, P_inf=P_inf, gamma=gamma, q=q)


def discretize(ssm: TemporalSSM, dt: float) -> DiscreteTransition:
    """Exact transition over dt >= 0. dt = 0 yields A = I, Q = 0 (time-invariant GP)."""
    if dt < 0:
        raise ValueError(f"step size must be nonnegative, got {dt}")
    if dt == 0.0:
        d = ssm.dim
        return DiscreteTransition(A=np.eye(d), Q=np.zeros((d, d)), dt=0.0)
    A = matrix_exp(dt * ssm.F)
    Q = symmetrize(ssm.P_inf - A @ ssm.P_inf @ A.T)
    w, v = np.linalg.eigh(Q)
    if w.min() < -1e-12:
        raise NumericalError(f"discretized process noise is indefinite (min eig {w.min():g})")
    Q = (v * np.clip(w, 0.0, None)) @ v.T
    return DiscreteTransition(A=A, Q=symmetrize(Q), dt=float(dt))

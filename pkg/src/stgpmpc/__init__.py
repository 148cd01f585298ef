"""Spatio-temporal GP learning with constant-cost online updates, plus a zero-order GP-MPC racing simulator."""

from .temporal_ssm import (
    DiscreteTransition,
    TemporalKernelSpec,
    TemporalSSM,
    build_ssm,
    discretize,
    matern_cov,
    matrix_exp,
    solve_lyapunov,
)

__all__ = [
    "DiscreteTransition",
    "TemporalKernelSpec",
    "TemporalSSM",
    "build_ssm",
    "discretize",
    "matern_cov",
    "matrix_exp",
    "solve_lyapunov",
]

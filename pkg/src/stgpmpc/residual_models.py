"""Residual-dynamics models for the racing loop.

The unmodeled part of the velocity dynamics is observed once per control
step as the difference between the measured next state and the nominal
one-step prediction, with spatial features (v_x, v_y, omega, a, delta).
Every variant here exposes the same two surfaces: the online-learning side
(tick / observe) driven by the closed loop, and the horizon-prediction side
(predict_along) consumed by the controller.
"""

from __future__ import annotations

from collections import deque
from dataclasses import dataclass

import numpy as np
import scipy.linalg

from .gp_models import (
    Dataset,
    SpatialKernelSpec,
    exact_stgp_predict,
    rbf_kernel,
    sod_truncate,
)
from .linalg import JITTER_START
from .mpc import ResidualPrediction
from .stgp import InducingConfig, OnlineSTGP, TrainingBatch
from .temporal_ssm import TemporalKernelSpec, matern_cov
from .vehicle import N_INPUTS, N_STATES, VELOCITY_ROWS

FEATURE_ROWS = (3, 4, 5, 6, 7)  # v_x, v_y, omega, a, delta
N_FEATURES = len(FEATURE_ROWS)
N_RESIDUALS = len(VELOCITY_ROWS)


def residual_map() -> np.ndarray:
    """B: embeds the residual outputs into the velocity rows of the state."""
    b = np.zeros((N_STATES, N_RESIDUALS))
    for j, row in enumerate(VELOCITY_ROWS):
        b[row, j] = 1.0
    return b


def features_from_states(xs: np.ndarray) -> np.ndarray:
    return np.atleast_2d(xs)[:, list(FEATURE_ROWS)]


def extract_residual(x_next: np.ndarray, x: np.ndarray, u: np.ndarray, nominal) -> tuple[np.ndarray, np.ndarray]:
    """Observed residual y = (x_next - f(x, u)) on the velocity rows, plus
    the spatial features of the originating state."""
    predicted, _, _ = nominal.step(np.asarray(x, dtype=float), np.asarray(u, dtype=float))
    y = (np.asarray(x_next, dtype=float) - predicted)[list(VELOCITY_ROWS)]
    return y, features_from_states(x)[0]


def _embed_feature_jacobian(jac_features: np.ndarray) -> np.ndarray:
    """(T, n_g, n_features) -> (T, n_g, n_x), zero elsewhere (features are states)."""
    t, n_g = jac_features.shape[0], jac_features.shape[1]
    out = np.zeros((t, n_g, N_STATES))
    out[:, :, list(FEATURE_ROWS)] = jac_features
    return out


class ZeroResidual:
    """No model: zero mean, zero variance. The nominal-MPC variant."""

    n_outputs = N_RESIDUALS

    def tick(self) -> None:
        pass

    def observe(self, z: np.ndarray, y: np.ndarray) -> None:
        pass

    def predict_along(self, xs: np.ndarray, us: np.ndarray) -> ResidualPrediction:
        t = xs.shape[0]
        return ResidualPrediction(
            mean=np.zeros((t, N_RESIDUALS)),
            variance=np.zeros((t, N_RESIDUALS)),
            jac_x=np.zeros((t, N_RESIDUALS, N_STATES)),
            jac_u=np.zeros((t, N_RESIDUALS, N_INPUTS)),
        )


class StgpResidual:
    """The recursive spatio-temporal GP in its online configuration."""

    n_outputs = N_RESIDUALS

    def __init__(self, model: OnlineSTGP):
        self.model = model

    @classmethod
    def create(cls, locations, spatial, temporal, noise_variance, dt) -> "StgpResidual":
        return cls(
            OnlineSTGP.create(
                locations=locations,
                spatial=spatial,
                temporal=temporal,
                noise_variance=noise_variance,
                dt=dt,
                n_outputs=N_RESIDUALS,
            )
        )

    def tick(self) -> None:
        self.model.advance()

    def observe(self, z: np.ndarray, y: np.ndarray) -> None:
        self.model.advance(TrainingBatch(Z=z, y=np.atleast_2d(y)))

    @property
    def count(self) -> int:
        return self.model.count

    def predict_along(self, xs: np.ndarray, us: np.ndarray) -> ResidualPrediction:
        post, jac = self.model.evaluate_with_mean_jacobian(features_from_states(xs))
        return ResidualPrediction(
            mean=post.mean,
            variance=post.variance,
            jac_x=_embed_feature_jacobian(jac),
            jac_u=np.zeros((xs.shape[0], N_RESIDUALS, N_INPUTS)),
        )


class ExactSodResidual:
    """Exact batch GP with the separable space-time kernel on a moving
    subset-of-data window. Refit from scratch at every prediction pass."""

    n_outputs = N_RESIDUALS

    def __init__(
        self,
        spatial: SpatialKernelSpec,
        temporal: TemporalKernelSpec,
        noise_variance: float,
        dt: float,
        budget: int = 400,
        uncapped: bool = False,
        oracle_cap: int = 2000,
    ):
        self.spatial = spatial
        self.temporal = temporal
        self.noise_variance = float(noise_variance)
        self.dt = dt
        self.budget = int(budget)
        self.uncapped = uncapped
        self.oracle_cap = oracle_cap
        self.now = 0.0
        self._z: deque = deque()
        self._t: deque = deque()
        self._y: deque = deque()

    def tick(self) -> None:
        self.now += self.dt

    def observe(self, z: np.ndarray, y: np.ndarray) -> None:
        self.now += self.dt
        self._z.append(np.asarray(z, dtype=float).reshape(-1))
        self._t.append(self.now)
        self._y.append(np.asarray(y, dtype=float).reshape(-1))
        limit = self.oracle_cap if self.uncapped else self.budget
        while len(self._z) > limit:
            self._z.popleft()
            self._t.popleft()
            self._y.popleft()

    @property
    def count(self) -> int:
        return len(self._z)

    def _dataset(self) -> Dataset:
        return Dataset(
            Z=np.array(self._z),
            t=np.array(self._t),
            Y=np.array(self._y),
            noise_variance=self.noise_variance,
        )

    def predict_along(self, xs: np.ndarray, us: np.ndarray) -> ResidualPrediction:
        t_h = xs.shape[0]
        zq = features_from_states(xs)
        tq = self.now + self.dt * np.arange(1, t_h + 1)
        if not self._z:
            return ZeroResidual().predict_along(xs, us)
        data = sod_truncate(self._dataset(), self.budget) if not self.uncapped else self._dataset()
        n = len(data)
        gram = rbf_kernel(data.Z, data.Z, self.spatial) * matern_cov(
            np.abs(data.t[:, None] - data.t[None, :]), self.temporal
        )
        chol = np.linalg.cholesky(
            gram
            + (self.noise_variance + JITTER_START * self.spatial.signal_variance) * np.eye(n)
        )
        alpha = scipy.linalg.cho_solve((chol, True), data.Y)

        k_spatial = rbf_kernel(zq, data.Z, self.spatial)
        k_temporal = matern_cov(np.abs(tq[:, None] - data.t[None, :]), self.temporal)
        k_star = k_spatial * k_temporal
        mean = k_star @ alpha
        v = scipy.linalg.solve_triangular(chol, k_star.T, lower=True)
        prior = self.spatial.signal_variance * np.ones(t_h)
        var = np.clip(prior - np.einsum("ij,ij->j", v, v), 0.0, None)

        # d mean / d z through the spatial factor only (the temporal factor is
        # constant in z): sum_j alpha_j k_t * dk_s/dz.
        ell2 = np.square(np.asarray(self.spatial.lengthscales))
        diff = zq[:, None, :] - data.Z[None, :, :]                   # (T, N, n_z)
        dk = -(k_star[:, :, None]) * diff / ell2                     # (T, N, n_z)
        jac = np.einsum("tnz,ng->tgz", dk, alpha)                    # (T, n_g, n_z)

        return ResidualPrediction(
            mean=mean,
            variance=np.broadcast_to(var[:, None], (t_h, N_RESIDUALS)).copy(),
            jac_x=_embed_feature_jacobian(jac),
            jac_u=np.zeros((t_h, N_RESIDUALS, N_INPUTS)),
        )


class SpatialIpResidual:
    """Purely spatial inducing-point GP (time-invariant recursion, dt = 0)
    refreshed on a subset-of-data window so stale observations age out."""

    n_outputs = N_RESIDUALS

    def __init__(
        self,
        locations,
        spatial: SpatialKernelSpec,
        temporal: TemporalKernelSpec,
        noise_variance: float,
        budget: int = 400,
        refit_every: int = 120,
    ):
        self.locations = np.asarray(locations, dtype=float)
        self.spatial = spatial
        self.temporal = temporal
        self.noise_variance = float(noise_variance)
        self.budget = int(budget)
        self.refit_every = int(refit_every)
        self._window: deque = deque(maxlen=self.budget)
        self._since_refit = 0
        self.model = self._fresh()

    def _fresh(self) -> OnlineSTGP:
        return OnlineSTGP.create(
            locations=self.locations,
            spatial=self.spatial,
            temporal=self.temporal,
            noise_variance=self.noise_variance,
            dt=0.0,
            n_outputs=N_RESIDUALS,
        )

    def tick(self) -> None:
        self.model.advance()

    def observe(self, z: np.ndarray, y: np.ndarray) -> None:
        self._window.append((np.asarray(z, dtype=float).reshape(-1), np.asarray(y, dtype=float).reshape(-1)))
        self._since_refit += 1
        if self._since_refit >= self.refit_every:
            # Proper batch fit on the retained window: one joint conditioning
            # pass (the batch observation model accounts for correlations
            # between window points that streaming single-point updates
            # approximate away), discarding anything older than the window.
            self.model = self._fresh()
            zs = np.array([w[0] for w in self._window])
            ys = np.array([w[1] for w in self._window])
            self.model.advance(TrainingBatch(Z=zs, y=ys))
            self._since_refit = 0
        else:
            self.model.advance(TrainingBatch(Z=z, y=np.atleast_2d(y)))

    def predict_along(self, xs: np.ndarray, us: np.ndarray) -> ResidualPrediction:
        post, jac = self.model.evaluate_with_mean_jacobian(features_from_states(xs))
        return ResidualPrediction(
            mean=post.mean,
            variance=post.variance,
            jac_x=_embed_feature_jacobian(jac),
            jac_u=np.zeros((xs.shape[0], N_RESIDUALS, N_INPUTS)),
        )

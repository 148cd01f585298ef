"""Approximate spatio-temporal GP with constant-cost online learning.

The spatial component is summarized by M fixed inducing points; the temporal
component is a half-integer Matern state-space model. Learning is a Kalman
recursion over the stacked inducing state, carried entirely on a
lower-triangular covariance root so the covariance stays positive
semi-definite no matter how many updates are applied. Per-update cost depends
on M, the temporal order, and the batch size, never on how much data has been
ingested.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import scipy.linalg

from .errors import ConfigurationError
from .gp_models import GPPosterior, SpatialKernelSpec, rbf_kernel
from .linalg import (
    cholesky_with_jitter,
    invert_lower_triangular,
    lower_triangular_root,
    psd_sqrt,
    require_finite,
    symmetrize,
)
from .temporal_ssm import TemporalKernelSpec, TemporalSSM, build_ssm, discretize


@dataclass(frozen=True)
class InducingConfig:
    """Fixed spatial inducing locations plus kernel, noise and step-size choices."""

    locations: np.ndarray
    spatial: SpatialKernelSpec
    temporal: TemporalKernelSpec
    noise_variance: float
    dt: float
    n_outputs: int = 1

    def __post_init__(self) -> None:
        locations = np.atleast_2d(np.asarray(self.locations, dtype=float))
        object.__setattr__(self, "locations", locations)
        if locations.shape[0] < 1:
            raise ConfigurationError("at least one inducing location is required")
        if locations.shape[1] != self.spatial.input_dim:
            raise ConfigurationError(
                f"inducing locations have dimension {locations.shape[1]}, "
                f"kernel expects {self.spatial.input_dim}"
            )
        if len(np.unique(locations, axis=0)) != locations.shape[0]:
            raise ConfigurationError("duplicate inducing points make the prior Gram singular")
        if not self.noise_variance > 0:
            raise ConfigurationError(f"noise variance must be positive, got {self.noise_variance}")
        if self.dt < 0:
            raise ConfigurationError(f"step size must be nonnegative, got {self.dt}")
        if self.n_outputs < 1:
            raise ConfigurationError(f"n_outputs must be >= 1, got {self.n_outputs}")

    @property
    def n_inducing(self) -> int:
        return self.locations.shape[0]

    def to_dict(self) -> dict:
        return {
            "locations": self.locations.tolist(),
            "signal_variance": self.spatial.signal_variance,
            "lengthscales": list(self.spatial.lengthscales),
            "nu": self.temporal.nu,
            "sigma_t": self.temporal.sigma_t,
            "noise_variance": self.noise_variance,
            "dt": self.dt,
            "n_outputs": self.n_outputs,
        }

    @classmethod
    def from_dict(cls, payload: dict) -> "InducingConfig":
        return cls(
            locations=np.asarray(payload["locations"], dtype=float),
            spatial=SpatialKernelSpec(
                signal_variance=float(payload["signal_variance"]),
                lengthscales=tuple(payload["lengthscales"]),
            ),
            temporal=TemporalKernelSpec(nu=float(payload["nu"]), sigma_t=float(payload["sigma_t"])),
            noise_variance=float(payload["noise_variance"]),
            dt=float(payload["dt"]),
            n_outputs=int(payload.get("n_outputs", 1)),
        )


@dataclass(frozen=True)
class STGPCache:
    """Invariant matrices precomputed at initialization."""

    config: InducingConfig
    ssm: TemporalSSM
    A: np.ndarray                 # (d, d) temporal transition over dt
    Q: np.ndarray                 # (d, d) temporal process noise over dt
    kvv: np.ndarray               # (M, M) effective inducing Gram (with jitter)
    kvv_inv: np.ndarray           # (M, M) its inverse
    kvv_root: np.ndarray          # (M, M) lower Cholesky factor of K_VV
    kvv_inv_root: np.ndarray      # (M, M) its inverse, lower triangular
    output_map: np.ndarray        # (M, Md) block-diagonal stack of H
    process_root: np.ndarray      # (Md, Md) root of K_VV x Q
    process_cov: np.ndarray       # (Md, Md) K_VV x Q
    whitened_output: np.ndarray   # (M, Md) kvv_inv_root @ output_map

    @property
    def n_inducing(self) -> int:
        return self.config.n_inducing

    @property
    def temporal_dim(self) -> int:
        return self.A.shape[0]

    @property
    def state_dim(self) -> int:
        return self.n_inducing * self.temporal_dim


@dataclass
class STGPState:
    """Inducing-state mean columns and shared lower-triangular covariance root."""

    mean: np.ndarray       # (Md, n_g)
    root: np.ndarray       # (Md, Md) lower triangular
    now: float = 0.0
    count: int = 0

    def copy(self) -> "STGPState":
        return STGPState(mean=self.mean.copy(), root=self.root.copy(), now=self.now, count=self.count)

    def covariance(self) -> np.ndarray:
        return self.root @ self.root.T

    def to_dict(self) -> dict:
        n = self.root.shape[0]
        tril = [float(self.root[i, j]) for i in range(n) for j in range(i + 1)]
        return {
            "mu": self.mean.tolist(),
            "sigma_root": tril,
            "now": float(self.now),
            "count": int(self.count),
        }

    @classmethod
    def from_dict(cls, payload: dict) -> "STGPState":
        mean = np.asarray(payload["mu"], dtype=float)
        if mean.ndim == 1:
            mean = mean[:, np.newaxis]
        n = mean.shape[0]
        tril = np.asarray(payload["sigma_root"], dtype=float)
        if tril.size != n * (n + 1) // 2:
            raise ConfigurationError(
                f"sigma_root has {tril.size} entries, expected {n * (n + 1) // 2} for dimension {n}"
            )
        root = np.zeros((n, n))
        idx = 0
        for i in range(n):
            root[i, : i + 1] = tril[idx : idx + i + 1]
            idx += i + 1
        return cls(mean=mean, root=root, now=float(payload["now"]), count=int(payload["count"]))


@dataclass
class TrainingBatch:
    """One update's worth of observations: spatial inputs and residual targets."""

    Z: np.ndarray
    y: np.ndarray

    def __post_init__(self) -> None:
        self.Z = np.atleast_2d(np.asarray(self.Z, dtype=float))
        self.y = np.asarray(self.y, dtype=float)
        if self.y.ndim == 1:
            self.y = self.y[:, np.newaxis]
        if self.Z.shape[0] != self.y.shape[0]:
            raise ValueError(f"batch rows disagree: Z {self.Z.shape[0]}, y {self.y.shape[0]}")
        if self.Z.shape[0] < 1:
            raise ValueError("batch must contain at least one observation")
        require_finite("training batch", self.Z, self.y)


def _block_apply(A: np.ndarray, x: np.ndarray, m: int) -> np.ndarray:
    """(I_m kron A) @ x without forming the Kronecker product."""
    d = A.shape[0]
    return np.matmul(A, x.reshape(m, d, -1)).reshape(x.shape[0], -1)


def init(config: InducingConfig) -> tuple[STGPCache, STGPState]:
    """Build the invariant caches and the prior inducing-state distribution."""
    ssm = build_ssm(config.temporal)
    disc = discretize(ssm, config.dt)
    m, d = config.n_inducing, ssm.dim

    kvv = rbf_kernel(config.locations, config.locations, config.spatial)
    kvv_root = cholesky_with_jitter(kvv, scale=config.spatial.signal_variance, what="inducing Gram")
    kvv_inv_root = invert_lower_triangular(kvv_root)
    output_map = np.kron(np.eye(m), ssm.H)
    process_root = np.kron(kvv_root, psd_sqrt(disc.Q))
    process_cov = np.kron(kvv_root @ kvv_root.T, disc.Q)
    whitened_output = kvv_inv_root @ output_map

    kvv_eff = kvv_root @ kvv_root.T
    cache = STGPCache(
        config=config,
        ssm=ssm,
        A=disc.A,
        Q=disc.Q,
        kvv=kvv_eff,
        kvv_inv=kvv_inv_root.T @ kvv_inv_root,
        kvv_root=kvv_root,
        kvv_inv_root=kvv_inv_root,
        output_map=output_map,
        process_root=process_root,
        process_cov=process_cov,
        whitened_output=whitened_output,
    )
    state = STGPState(
        mean=np.zeros((m * d, config.n_outputs)),
        root=np.kron(kvv_root, psd_sqrt(ssm.P_inf)),
    )
    return cache, state


def _cross_root(cache: STGPCache, Z: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """K_ZV and the whitened cross factor K_ZV K_VV^{-T/2} used for both R and C."""
    kzv = rbf_kernel(Z, cache.config.locations, cache.config.spatial)
    return kzv, kzv @ cache.kvv_inv_root.T


def update(state: STGPState, cache: STGPCache, batch: TrainingBatch | None = None) -> STGPState:
    """Advance the filter one time step and optionally ingest a batch of data.

    The covariance root is propagated and corrected in rectangular form, then
    re-triangularized orthogonally; it never leaves factored form.
    """
    m = cache.n_inducing
    state.mean = _block_apply(cache.A, state.mean, m)
    rect = np.hstack([_block_apply(cache.A, state.root, m), cache.process_root])

    if batch is not None:
        if batch.Z.shape[1] != cache.config.spatial.input_dim:
            raise ValueError(
                f"batch input dimension {batch.Z.shape[1]} does not match kernel "
                f"dimension {cache.config.spatial.input_dim}"
            )
        if batch.y.shape[1] != cache.config.n_outputs:
            raise ValueError(
                f"batch has {batch.y.shape[1]} output columns, config expects {cache.config.n_outputs}"
            )
        n_y = batch.Z.shape[0]
        kzz = rbf_kernel(batch.Z, batch.Z, cache.config.spatial)
        _, cross = _cross_root(cache, batch.Z)
        R = kzz - cross @ cross.T + cache.config.noise_variance * np.eye(n_y)
        noise_root = cholesky_with_jitter(
            R, scale=cache.config.spatial.signal_variance, what="observation noise"
        )
        # The gain must see exactly the R realized by the appended noise root,
        # otherwise the factored update stops matching the dense recursion.
        R_eff = noise_root @ noise_root.T
        obs = cross @ cache.whitened_output             # (n_y, Md)
        projected = obs @ rect                          # (n_y, 2Md)
        innovation_chol = np.linalg.cholesky(symmetrize(projected @ projected.T + R_eff))
        gain = scipy.linalg.cho_solve((innovation_chol, True), projected @ rect.T).T  # (Md, n_y)
        state.mean = state.mean + gain @ (batch.y - obs @ state.mean)
        rect = np.hstack([rect - gain @ projected, gain @ noise_root])
        state.count += n_y

    state.root = lower_triangular_root(rect)
    state.now += cache.config.dt
    return state


def _stage_projections(state: STGPState, cache: STGPCache, stages: np.ndarray):
    """Per-stage projected moments using the Kronecker structure.

    Advancing the stacked state i steps multiplies it by I_M kron A^i, so the
    stage-i output row is kron(w_i, H A^i) with w_i the whitened cross weight.
    The accumulated process noise contributes (w_i' K_VV w_i) * sum_j H A^j Q
    A^j' H', a scalar cumulative sum, avoiding any dense (Md)^2 propagation.
    Returns (means, stage_var, h_rows) with h_rows[k] = H A^(k+1).
    """
    n = stages.shape[0]
    d = cache.temporal_dim
    m = cache.n_inducing
    h = cache.ssm.H[0]

    # h_rows[k] = H A^(k+1); the noise scalar at stage k sums H A^j Q A^j' H'
    # over j = 0 .. k (Q enters once per elapsed step).
    h_rows = np.empty((n, d))
    noise_scalars = np.empty(n)
    a_pow = np.eye(d)
    for k in range(n):
        ha = h @ a_pow
        noise_scalars[k] = ha @ cache.Q @ ha
        a_pow = cache.A @ a_pow
        h_rows[k] = h @ a_pow
    noise_cumsum = np.cumsum(noise_scalars)

    kzv, cross = _cross_root(cache, stages)
    weights = cross @ cache.kvv_inv_root                      # (n, M) = K_ZV K_VV^-1
    rows = np.einsum("km,kd->kmd", weights, h_rows).reshape(n, m * d)
    sigma0 = state.covariance()
    term_state = np.einsum("ki,ij,kj->k", rows, sigma0, rows, optimize=True)
    quad = np.einsum("km,mn,kn->k", weights, cache.kvv, weights, optimize=True)
    stage_var = term_state + quad * noise_cumsum
    means = rows @ state.mean
    return means, stage_var, h_rows, weights, kzv, cross


def evaluate(state: STGPState, cache: STGPCache, stages: np.ndarray) -> GPPosterior:
    """Posterior over the residual function at query inputs, one per future stage.

    Stage i (1-based) is evaluated at model time ``now + i * dt`` by advancing
    a copy of the state; the state itself is not mutated. Cross-stage
    correlations of the state estimate are dropped (block-diagonal stage
    covariance), matching the per-stage use in the controller.
    """
    stages = np.atleast_2d(np.asarray(stages, dtype=float))
    require_finite("query stages", stages)
    n = stages.shape[0]
    kzz = rbf_kernel(stages, stages, cache.config.spatial)
    means, stage_var, _, _, _, cross = _stage_projections(state, cache, stages)
    cov = symmetrize(kzz - cross @ cross.T + np.diag(stage_var))
    return GPPosterior(mean=means, cov=np.broadcast_to(cov, (cache.config.n_outputs, n, n)).copy())


def evaluate_with_mean_jacobian(
    state: STGPState, cache: STGPCache, stages: np.ndarray
) -> tuple[GPPosterior, np.ndarray]:
    """Like :func:`evaluate`, also returning d mean / d z per stage, shape (N, n_g, n_z)."""
    stages = np.atleast_2d(np.asarray(stages, dtype=float))
    require_finite("query stages", stages)
    n = stages.shape[0]
    n_g = cache.config.n_outputs
    d = cache.temporal_dim
    m = cache.n_inducing
    kzz = rbf_kernel(stages, stages, cache.config.spatial)
    means, stage_var, h_rows, _, kzv, cross = _stage_projections(state, cache, stages)

    ell2 = np.square(np.asarray(cache.config.spatial.lengthscales))
    # d k(z_k, v_j) / d z = -k(z_k, v_j) (z_k - v_j) / ell^2, shape (n, M, n_z)
    dk = -kzv[:, :, np.newaxis] * (stages[:, np.newaxis, :] - cache.config.locations) / ell2
    # Latent inducing values at stage k: (I kron H A^k) mu, shape (n, M, n_g)
    mu3 = state.mean.reshape(m, d, n_g)
    latents = np.einsum("kd,mdg->kmg", h_rows, mu3)
    stage_weights = np.einsum("mn,kng->kmg", cache.kvv_inv, latents)
    jac = np.einsum("kmg,kmz->kgz", stage_weights, dk)

    cov = symmetrize(kzz - cross @ cross.T + np.diag(stage_var))
    post = GPPosterior(mean=means, cov=np.broadcast_to(cov, (n_g, n, n)).copy())
    return post, jac


class OnlineSTGP:
    """Owner object bundling cache and state behind a model-style interface.

    ``noise_variance`` may be a scalar (one shared covariance recursion, the
    common case) or a per-output sequence, in which case independent filters
    are maintained per output column.
    """

    def __init__(self, config_or_configs):
        if isinstance(config_or_configs, InducingConfig):
            self._filters = [init(config_or_configs)]
            self._split = False
            self.config = config_or_configs
        else:
            configs = list(config_or_configs)
            self._filters = [init(c) for c in configs]
            self._split = True
            self.config = configs[0]

    @classmethod
    def create(
        cls,
        locations,
        spatial: SpatialKernelSpec,
        temporal: TemporalKernelSpec,
        noise_variance,
        dt: float,
        n_outputs: int = 1,
    ) -> "OnlineSTGP":
        noise = np.asarray(noise_variance, dtype=float)
        if noise.ndim == 0 or np.all(noise == noise.reshape(-1)[0]):
            sigma2 = float(noise.reshape(-1)[0]) if noise.ndim else float(noise)
            return cls(
                InducingConfig(
                    locations=locations,
                    spatial=spatial,
                    temporal=temporal,
                    noise_variance=sigma2,
                    dt=dt,
                    n_outputs=n_outputs,
                )
            )
        if noise.shape != (n_outputs,):
            raise ConfigurationError(
                f"noise variance must be scalar or length {n_outputs}, got shape {noise.shape}"
            )
        configs = [
            InducingConfig(
                locations=locations,
                spatial=spatial,
                temporal=temporal,
                noise_variance=float(noise[j]),
                dt=dt,
                n_outputs=1,
            )
            for j in range(n_outputs)
        ]
        return cls(configs)

    @property
    def n_outputs(self) -> int:
        if self._split:
            return len(self._filters)
        return self.config.n_outputs

    @property
    def now(self) -> float:
        return self._filters[0][1].now

    @property
    def count(self) -> int:
        return self._filters[0][1].count

    def advance(self, batch: TrainingBatch | None = None) -> None:
        if batch is None:
            for cache, state in self._filters:
                update(state, cache)
            return
        if not self._split:
            update(self._filters[0][1], self._filters[0][0], batch)
            return
        for j, (cache, state) in enumerate(self._filters):
            update(state, cache, TrainingBatch(Z=batch.Z, y=batch.y[:, j]))

    def evaluate(self, stages: np.ndarray) -> GPPosterior:
        if not self._split:
            cache, state = self._filters[0]
            return evaluate(state, cache, stages)
        posts = [evaluate(state, cache, stages) for cache, state in self._filters]
        return GPPosterior(
            mean=np.hstack([p.mean for p in posts]),
            cov=np.concatenate([p.cov for p in posts], axis=0),
        )

    def evaluate_with_mean_jacobian(self, stages: np.ndarray) -> tuple[GPPosterior, np.ndarray]:
        if not self._split:
            cache, state = self._filters[0]
            return evaluate_with_mean_jacobian(state, cache, stages)
        posts, jacs = zip(*(evaluate_with_mean_jacobian(s, c, stages) for c, s in self._filters))
        post = GPPosterior(
            mean=np.hstack([p.mean for p in posts]),
            cov=np.concatenate([p.cov for p in posts], axis=0),
        )
        return post, np.concatenate(jacs, axis=1)

    def to_dict(self) -> dict:
        return {
            "configs": [cache.config.to_dict() for cache, _ in self._filters],
            "states": [state.to_dict() for _, state in self._filters],
        }

    @classmethod
    def from_dict(cls, payload: dict) -> "OnlineSTGP":
        configs = [InducingConfig.from_dict(c) for c in payload["configs"]]
        model = cls(configs if len(configs) > 1 else configs[0])
        states = [STGPState.from_dict(s) for s in payload["states"]]
        for (cache, _), state in zip(model._filters, states):
            if state.mean.shape[0] != cache.state_dim:
                raise ConfigurationError("serialized state dimension does not match configuration")
        model._filters = [(cache, state) for (cache, _), state in zip(model._filters, states)]
        return model


def uniform_grid(bounds, counts) -> np.ndarray:
    """Regular grid of inducing locations over an operating box."""
    axes = [np.linspace(lo, hi, int(c)) for (lo, hi), c in zip(bounds, counts)]
    mesh = np.meshgrid(*axes, indexing="ij")
    return np.stack([m.reshape(-1) for m in mesh], axis=1)


def latin_hypercube(bounds, n_points: int, seed: int = 0) -> np.ndarray:
    """Latin-hypercube sample of inducing locations over an operating box."""
    bounds = np.asarray(bounds, dtype=float)
    rng = np.random.default_rng(seed)
    dim = bounds.shape[0]
    points = np.empty((n_points, dim))
    for d in range(dim):
        perm = rng.permutation(n_points)
        offsets = rng.uniform(size=n_points)
        unit = (perm + offsets) / n_points
        points[:, d] = bounds[d, 0] + unit * (bounds[d, 1] - bounds[d, 0])
    return points

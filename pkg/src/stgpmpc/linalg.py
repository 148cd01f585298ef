"""Small dense linear-algebra helpers used by the kernel and filter code."""

from __future__ import annotations

import numpy as np
import scipy.linalg

from .errors import NumericalError

# Escalation ladder for Gram/noise factorizations: start at 1e-8 relative
# jitter, multiply by 10 up to 1e-4, then give up.
JITTER_START = 1e-8
JITTER_MAX = 1e-4


def symmetrize(a: np.ndarray) -> np.ndarray:
    return 0.5 * (a + a.T)


def cholesky_with_jitter(a: np.ndarray, scale: float, what: str = "matrix") -> np.ndarray:
    """Lower Cholesky factor of ``a`` with escalating diagonal jitter.

    ``scale`` sets the jitter unit (typically the kernel signal variance or
    the largest diagonal entry). Raises :class:`NumericalError` once the
    ladder is exhausted.
    """
    a = symmetrize(np.asarray(a, dtype=float))
    n = a.shape[0]
    jitter = JITTER_START
    while jitter <= JITTER_MAX * (1.0 + 1e-12):
        try:
            return np.linalg.cholesky(a + jitter * scale * np.eye(n))
        except np.linalg.LinAlgError:
            jitter *= 10.0
    raise NumericalError(f"{what} not factorizable even with jitter {JITTER_MAX:g}*{scale:g}")


def psd_sqrt(a: np.ndarray) -> np.ndarray:
    """A square factor S with S @ S.T == a for symmetric PSD ``a``.

    Prefers the Cholesky factor; falls back to an eigenvalue square root for
    singular PSD inputs (e.g. a zero process-noise covariance at dt=0).
    """
    a = symmetrize(np.asarray(a, dtype=float))
    if not np.any(a):
        return np.zeros_like(a)
    try:
        return np.linalg.cholesky(a)
    except np.linalg.LinAlgError:
        w, v = np.linalg.eigh(a)
        if w.min() < -1e-10 * max(w.max(), 1.0):
            raise NumericalError(f"matrix is not PSD (min eigenvalue {w.min():g})")
        return v * np.sqrt(np.clip(w, 0.0, None))


def lower_triangular_root(rect: np.ndarray) -> np.ndarray:
    """Lower-triangular L with L @ L.T == rect @ rect.T, by LQ factorization.

    Orthogonal triangularization of the (possibly rectangular) root avoids
    squaring the condition number of the covariance. The diagonal sign is
    normalized to be nonnegative.
    """
    n = rect.shape[0]
    r = np.linalg.qr(rect.T, mode="r")
    lower = r.T[:n, :n]
    signs = np.sign(np.diag(lower))
    signs[signs == 0.0] = 1.0
    return lower * signs[np.newaxis, :]


def solve_lower_triangular(lower: np.ndarray, b: np.ndarray) -> np.ndarray:
    return scipy.linalg.solve_triangular(lower, b, lower=True)


def invert_lower_triangular(lower: np.ndarray) -> np.ndarray:
    return scipy.linalg.solve_triangular(lower, np.eye(lower.shape[0]), lower=True)


def require_finite(name: str, *arrays: np.ndarray) -> None:
    for arr in arrays:
        if not np.all(np.isfinite(arr)):
            raise ValueError(f"{name} contains non-finite entries")

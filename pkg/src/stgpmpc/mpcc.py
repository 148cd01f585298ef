"""Contouring-style racing objective and track-boundary constraints.

The stage cost penalizes the lateral deviation of the predicted position
from the centerline at the progress state (contouring error), the mismatch
between the progress state and the actual advance along the track (lag
error), and rewards the progress rate input; the boundary constraints keep
the same lateral error inside the lane minus a safety margin.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .track import Track
from .vehicle import IDX_A, IDX_DELTA, IDX_THETA, IDX_XP, IDX_YP, N_INPUTS, N_STATES


@dataclass(frozen=True)
class MpccWeights:
    contour: float = 30.0
    lag: float = 100.0
    progress: float = 0.3          # linear reward on the progress rate input
    input_rates: tuple = (0.2, 0.4, 0.01)
    terminal_scale: float = 2.0

    def to_dict(self) -> dict:
        return {
            "contour": self.contour,
            "lag": self.lag,
            "progress": self.progress,
            "input_rates": list(self.input_rates),
            "terminal_scale": self.terminal_scale,
        }

    @classmethod
    def from_dict(cls, payload: dict) -> "MpccWeights":
        return cls(
            contour=float(payload["contour"]),
            lag=float(payload["lag"]),
            progress=float(payload["progress"]),
            input_rates=tuple(payload["input_rates"]),
            terminal_scale=float(payload["terminal_scale"]),
        )


def contouring_errors(track: Track, xs: np.ndarray):
    """Contouring and lag errors plus their state-gradients, batched.

    Returns (e_c, e_l, grad_c, grad_l, half_widths) with gradients as
    (T, n_x) rows. Within a polyline segment the centerline tangent is
    constant, so de_c/dtheta = 0 and de_l/dtheta = -1.
    """
    xs = np.atleast_2d(xs)
    t = xs.shape[0]
    pos, tan, nor, width = track.frames(xs[:, IDX_THETA])
    rel = xs[:, [IDX_XP, IDX_YP]] - pos
    e_c = np.einsum("ij,ij->i", nor, rel)
    e_l = np.einsum("ij,ij->i", tan, rel)
    grad_c = np.zeros((t, N_STATES))
    grad_c[:, IDX_XP] = nor[:, 0]
    grad_c[:, IDX_YP] = nor[:, 1]
    grad_l = np.zeros((t, N_STATES))
    grad_l[:, IDX_XP] = tan[:, 0]
    grad_l[:, IDX_YP] = tan[:, 1]
    grad_l[:, IDX_THETA] = -1.0
    return e_c, e_l, grad_c, grad_l, width


def mpcc_cost_terms(state: np.ndarray, track: Track, weights: MpccWeights):
    """Stage cost contributions at one state: value and gradient.

    cost = contour * e_c^2 + lag * e_l^2 (the progress reward and input
    penalties enter through the inputs, not the state).
    """
    e_c, e_l, grad_c, grad_l, _ = contouring_errors(track, state[np.newaxis])
    value = weights.contour * e_c[0] ** 2 + weights.lag * e_l[0] ** 2
    gradient = 2.0 * weights.contour * e_c[0] * grad_c[0] + 2.0 * weights.lag * e_l[0] * grad_l[0]
    return value, gradient


class ContouringCost:
    """Gauss-Newton quadratic model of the contouring objective (CostModel)."""

    def __init__(self, track: Track, weights: MpccWeights):
        self.track = track
        self.weights = weights

    def _state_terms(self, xs, scale=1.0):
        e_c, e_l, grad_c, grad_l, _ = contouring_errors(self.track, xs)
        w_c, w_l = scale * self.weights.contour, scale * self.weights.lag
        grad = 2.0 * w_c * e_c[:, None] * grad_c + 2.0 * w_l * e_l[:, None] * grad_l
        hess = 2.0 * w_c * np.einsum("ix,iy->ixy", grad_c, grad_c)
        hess += 2.0 * w_l * np.einsum("ix,iy->ixy", grad_l, grad_l)
        return grad, hess

    def stage_quadratics(self, xs, us):
        t = xs.shape[0]
        q, Q = self._state_terms(xs)
        rates = np.asarray(self.weights.input_rates)
        r = 2.0 * us * rates
        r[:, 2] -= self.weights.progress
        R = np.broadcast_to(np.diag(2.0 * rates), (t, N_INPUTS, N_INPUTS)).copy()
        return q, Q, r, R

    def terminal_quadratic(self, x):
        q, Q = self._state_terms(x[np.newaxis], scale=self.weights.terminal_scale)
        return q[0], Q[0]


class TrackConstraints:
    """Soft track-boundary rows plus hard actuator-state boxes (ConstraintModel).

    Boundary rows: +-e_c - (half_width - margin) <= 0, tightened with the
    configured satisfaction probability. Actuator boxes on the drive command
    and steering state are hard (the plant saturates there anyway).
    """

    def __init__(
        self,
        track: Track,
        margin: float = 0.05,
        boundary_probability: float = 0.5,
        a_max: float = 1.0,
        delta_limit: float = 0.43,
    ):
        self.track = track
        self.margin = margin
        self.n_stage = 6
        self.n_terminal = 2
        self.stage_probabilities = np.array([boundary_probability] * 2 + [0.5] * 4)
        self.stage_soft = np.array([True, True, False, False, False, False])
        self.terminal_probabilities = np.array([boundary_probability] * 2)
        self.terminal_soft = np.array([True, True])
        self.a_max = a_max
        self.delta_limit = delta_limit

    def _boundary_rows(self, xs):
        e_c, _, grad_c, _, width = contouring_errors(self.track, xs)
        bound = width - self.margin
        h = np.stack([e_c - bound, -e_c - bound], axis=1)
        cx = np.stack([grad_c, -grad_c], axis=1)
        return h, cx

    def stage_values(self, xs, us):
        t = xs.shape[0]
        h_b, cx_b = self._boundary_rows(xs)
        h = np.concatenate(
            [
                h_b,
                (xs[:, IDX_A] - self.a_max)[:, None],
                (-xs[:, IDX_A] - self.a_max)[:, None],
                (xs[:, IDX_DELTA] - self.delta_limit)[:, None],
                (-xs[:, IDX_DELTA] - self.delta_limit)[:, None],
            ],
            axis=1,
        )
        cx = np.zeros((t, 6, N_STATES))
        cx[:, :2] = cx_b
        cx[:, 2, IDX_A] = 1.0
        cx[:, 3, IDX_A] = -1.0
        cx[:, 4, IDX_DELTA] = 1.0
        cx[:, 5, IDX_DELTA] = -1.0
        return h, cx, np.zeros((t, 6, N_INPUTS))

    def terminal_values(self, x):
        h_b, cx_b = self._boundary_rows(x[np.newaxis])
        return h_b[0], cx_b[0]

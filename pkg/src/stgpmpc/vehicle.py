"""Dynamic bicycle plant with simplified Pacejka tires and a steering perturbation.

State layout (9): [x_p, y_p, phi, v_x, v_y, omega, a, delta, theta] with global
position (m), heading (rad), body-frame velocities (m/s, m/s, rad/s), the
normalized drive command a, the steering angle delta (rad), and the track
progress theta (m). Inputs (3) are the rates [u_T, u_delta, u_theta] of the
three actuator states.

The same derivative function serves as the controller's nominal model
(perturbation zero) and, with the time-varying neutral-steer offset applied,
as the simulated ground truth.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .errors import ConfigurationError

N_STATES = 9
N_INPUTS = 3
IDX_XP, IDX_YP, IDX_PHI, IDX_VX, IDX_VY, IDX_OMEGA, IDX_A, IDX_DELTA, IDX_THETA = range(9)
VELOCITY_ROWS = (IDX_VX, IDX_VY, IDX_OMEGA)


@dataclass(frozen=True)
class VehicleParams:
    """Desk-scale miniature car. Values are configuration defaults, picked so
    the closed loop is agile but one RK4 step at 30 Hz stays accurate."""

    mass: float = 0.25
    inertia_z: float = 2.5e-3
    l_front: float = 0.08
    l_rear: float = 0.08
    tire_b_front: float = 1.1
    tire_c_front: float = 1.4
    tire_d_front: float = 0.9
    tire_b_rear: float = 1.1
    tire_c_rear: float = 1.4
    tire_d_rear: float = 0.9
    drive_gain: float = 1.2        # C_m1
    drive_loss: float = 0.25       # C_m2
    rolling_resistance: float = 0.05
    drag: float = 0.02
    delta_max: float = 0.45
    a_max: float = 1.0
    slip_smoothing: float = 0.1    # velocity floor inside slip angles
    roll_smoothing: float = 0.05   # tanh width of the rolling-resistance sign

    def __post_init__(self) -> None:
        for name in ("mass", "inertia_z", "l_front", "l_rear"):
            if getattr(self, name) <= 0:
                raise ConfigurationError(f"vehicle parameter {name} must be positive")
        for name in ("tire_d_front", "tire_d_rear"):
            if getattr(self, name) < 0:
                raise ConfigurationError(f"tire peak force {name} must be nonnegative")

    def to_dict(self) -> dict:
        return {k: getattr(self, k) for k in self.__dataclass_fields__}

    @classmethod
    def from_dict(cls, payload: dict) -> "VehicleParams":
        return cls(**payload)


@dataclass(frozen=True)
class PerturbationSchedule:
    """Time course of the neutral-steer offset delta_0.

    Zero until ``start``; afterwards piecewise segments of (duration_s, kind,
    level) with level in [-1, 1] scaling ``amplitude``. Kind "hold" keeps the
    value constant, "sine" traces a half-sine bump over the segment. After the
    last segment the offset is zero.
    """

    start: float = 15.0
    amplitude: float = 0.15
    segments: tuple = ((25.0, "hold", 1.0), (25.0, "hold", -1.0))

    def __post_init__(self) -> None:
        for duration, kind, level in self.segments:
            if duration <= 0:
                raise ConfigurationError("perturbation segment durations must be positive")
            if kind not in ("hold", "sine"):
                raise ConfigurationError(f"unknown perturbation segment kind {kind!r}")
            if abs(level) > 1.0:
                raise ConfigurationError("segment levels are fractions of the amplitude, |level| <= 1")

    def delta0(self, t: float) -> float:
        if t < self.start:
            return 0.0
        offset = t - self.start
        for duration, kind, level in self.segments:
            if offset < duration:
                if kind == "hold":
                    return self.amplitude * level
                return self.amplitude * level * math.sin(math.pi * offset / duration)
            offset -= duration
        return 0.0

    def to_dict(self) -> dict:
        return {
            "start": self.start,
            "amplitude": self.amplitude,
            "segments": [list(s) for s in self.segments],
        }

    @classmethod
    def from_dict(cls, payload: dict) -> "PerturbationSchedule":
        return cls(
            start=float(payload["start"]),
            amplitude=float(payload["amplitude"]),
            segments=tuple((float(d), str(k), float(l)) for d, k, l in payload["segments"]),
        )


def remap_steering(delta, delta0, delta_max: float):
    """Neutral-steer remap: delta + delta0 * (1 - (delta/delta_max)^2).

    Identity at delta0 = 0, fixes the endpoints +-delta_max (the full steering
    range stays reachable), and is strictly monotone in delta for
    |delta0| < delta_max / 2.
    """
    return delta + delta0 * (1.0 - np.square(delta / delta_max))


def apply_perturbation(delta_command, t: float, schedule: PerturbationSchedule, delta_max: float):
    """Effective steering produced by the commanded value at time t."""
    return remap_steering(delta_command, schedule.delta0(t), delta_max)


class BicycleModel:
    """Continuous-time bicycle dynamics with analytic Jacobians, batched over
    leading axes. ``delta0`` selects the plant (nonzero) vs the nominal model."""

    n_states = N_STATES
    n_inputs = N_INPUTS

    def __init__(self, params: VehicleParams, delta0: float = 0.0):
        self.params = params
        self.delta0 = delta0

    def derivative_batch(self, xs: np.ndarray, us: np.ndarray):
        p = self.params
        xs = np.asarray(xs, dtype=float)
        us = np.asarray(us, dtype=float)
        batch = xs.shape[:-1]
        phi = xs[..., IDX_PHI]
        vx = xs[..., IDX_VX]
        vy = xs[..., IDX_VY]
        omega = xs[..., IDX_OMEGA]
        drive = xs[..., IDX_A]
        delta = xs[..., IDX_DELTA]

        d0 = self.delta0
        deff = delta + d0 * (1.0 - np.square(delta / p.delta_max))
        ddeff = 1.0 - 2.0 * d0 * delta / p.delta_max**2

        v_sm = np.sqrt(vx * vx + p.slip_smoothing**2)
        wf = (vy + p.l_front * omega) / v_sm
        wr = (vy - p.l_rear * omega) / v_sm
        alpha_f = np.arctan(wf) - deff
        alpha_r = np.arctan(wr)

        # Lateral forces and their slip-angle gains
        gf = p.tire_c_front * np.arctan(p.tire_b_front * alpha_f)
        gr = p.tire_c_rear * np.arctan(p.tire_b_rear * alpha_r)
        fyf = -p.tire_d_front * np.sin(gf)
        fyr = -p.tire_d_rear * np.sin(gr)
        dfyf = -p.tire_d_front * np.cos(gf) * p.tire_c_front * p.tire_b_front / (
            1.0 + np.square(p.tire_b_front * alpha_f)
        )
        dfyr = -p.tire_d_rear * np.cos(gr) * p.tire_c_rear * p.tire_b_rear / (
            1.0 + np.square(p.tire_b_rear * alpha_r)
        )

        roll = np.tanh(vx / p.roll_smoothing)
        fx = (p.drive_gain - p.drive_loss * vx) * drive - p.rolling_resistance * roll - p.drag * vx * np.abs(vx)
        dfx_dvx = (
            -p.drive_loss * drive
            - p.rolling_resistance * (1.0 - roll * roll) / p.roll_smoothing
            - 2.0 * p.drag * np.abs(vx)
        )
        dfx_da = p.drive_gain - p.drive_loss * vx

        sin_d, cos_d = np.sin(deff), np.cos(deff)
        cphi, sphi = np.cos(phi), np.sin(phi)

        dx = np.zeros(batch + (N_STATES,))
        dx[..., IDX_XP] = vx * cphi - vy * sphi
        dx[..., IDX_YP] = vx * sphi + vy * cphi
        dx[..., IDX_PHI] = omega
        dx[..., IDX_VX] = (fx - fyf * sin_d) / p.mass + vy * omega
        dx[..., IDX_VY] = (fyr + fyf * cos_d) / p.mass - vx * omega
        dx[..., IDX_OMEGA] = (p.l_front * fyf * cos_d - p.l_rear * fyr) / p.inertia_z
        dx[..., IDX_A] = us[..., 0]
        dx[..., IDX_DELTA] = us[..., 1]
        dx[..., IDX_THETA] = us[..., 2]

        # Slip-angle partials (chain through atan and the velocity floor)
        inv_wf = 1.0 / (1.0 + wf * wf)
        inv_wr = 1.0 / (1.0 + wr * wr)
        daf_dvx = inv_wf * (-wf * vx / (v_sm * v_sm))
        daf_dvy = inv_wf / v_sm
        daf_dom = inv_wf * p.l_front / v_sm
        dar_dvx = inv_wr * (-wr * vx / (v_sm * v_sm))
        dar_dvy = inv_wr / v_sm
        dar_dom = inv_wr * (-p.l_rear) / v_sm
        daf_ddelta = -ddeff

        jx = np.zeros(batch + (N_STATES, N_STATES))
        jx[..., IDX_XP, IDX_PHI] = -vx * sphi - vy * cphi
        jx[..., IDX_XP, IDX_VX] = cphi
        jx[..., IDX_XP, IDX_VY] = -sphi
        jx[..., IDX_YP, IDX_PHI] = vx * cphi - vy * sphi
        jx[..., IDX_YP, IDX_VX] = sphi
        jx[..., IDX_YP, IDX_VY] = cphi
        jx[..., IDX_PHI, IDX_OMEGA] = 1.0

        m, iz = p.mass, p.inertia_z
        jx[..., IDX_VX, IDX_VX] = (dfx_dvx - dfyf * daf_dvx * sin_d) / m
        jx[..., IDX_VX, IDX_VY] = (-dfyf * daf_dvy * sin_d) / m + omega
        jx[..., IDX_VX, IDX_OMEGA] = (-dfyf * daf_dom * sin_d) / m + vy
        jx[..., IDX_VX, IDX_A] = dfx_da / m
        jx[..., IDX_VX, IDX_DELTA] = (-dfyf * daf_ddelta * sin_d - fyf * cos_d * ddeff) / m

        jx[..., IDX_VY, IDX_VX] = (dfyr * dar_dvx + dfyf * daf_dvx * cos_d) / m - omega
        jx[..., IDX_VY, IDX_VY] = (dfyr * dar_dvy + dfyf * daf_dvy * cos_d) / m
        jx[..., IDX_VY, IDX_OMEGA] = (dfyr * dar_dom + dfyf * daf_dom * cos_d) / m - vx
        jx[..., IDX_VY, IDX_DELTA] = (dfyf * daf_ddelta * cos_d - fyf * sin_d * ddeff) / m

        jx[..., IDX_OMEGA, IDX_VX] = (p.l_front * dfyf * daf_dvx * cos_d - p.l_rear * dfyr * dar_dvx) / iz
        jx[..., IDX_OMEGA, IDX_VY] = (p.l_front * dfyf * daf_dvy * cos_d - p.l_rear * dfyr * dar_dvy) / iz
        jx[..., IDX_OMEGA, IDX_OMEGA] = (p.l_front * dfyf * daf_dom * cos_d - p.l_rear * dfyr * dar_dom) / iz
        jx[..., IDX_OMEGA, IDX_DELTA] = (
            p.l_front * (dfyf * daf_ddelta * cos_d - fyf * sin_d * ddeff)
        ) / iz

        ju = np.zeros(batch + (N_STATES, N_INPUTS))
        ju[..., IDX_A, 0] = 1.0
        ju[..., IDX_DELTA, 1] = 1.0
        ju[..., IDX_THETA, 2] = 1.0
        return dx, jx, ju


class Plant:
    """Ground-truth integrator: RK4 substeps under the perturbation schedule,
    actuator saturation, and optional process noise on the velocity states."""

    def __init__(
        self,
        params: VehicleParams,
        schedule: PerturbationSchedule,
        dt: float,
        substeps: int = 4,
        noise_std: np.ndarray | None = None,
    ):
        self.params = params
        self.schedule = schedule
        self.dt = dt
        self.substeps = int(substeps)
        self.noise_std = np.zeros(3) if noise_std is None else np.asarray(noise_std, dtype=float)
        if self.substeps < 1:
            raise ConfigurationError("plant needs at least one substep")

    def step(self, x: np.ndarray, u: np.ndarray, t: float, rng: np.random.Generator | None = None):
        h = self.dt / self.substeps
        state = np.asarray(x, dtype=float).copy()
        for k in range(self.substeps):
            model = BicycleModel(self.params, delta0=self.schedule.delta0(t + k * h))
            d1, _, _ = model.derivative_batch(state[np.newaxis], u[np.newaxis])
            d2, _, _ = model.derivative_batch((state + 0.5 * h * d1[0])[np.newaxis], u[np.newaxis])
            d3, _, _ = model.derivative_batch((state + 0.5 * h * d2[0])[np.newaxis], u[np.newaxis])
            d4, _, _ = model.derivative_batch((state + h * d3[0])[np.newaxis], u[np.newaxis])
            state = state + h / 6.0 * (d1[0] + 2.0 * d2[0] + 2.0 * d3[0] + d4[0])
        state[IDX_A] = np.clip(state[IDX_A], -self.params.a_max, self.params.a_max)
        state[IDX_DELTA] = np.clip(state[IDX_DELTA], -self.params.delta_max, self.params.delta_max)
        if rng is not None and np.any(self.noise_std > 0):
            state[list(VELOCITY_ROWS)] += self.noise_std * rng.standard_normal(3)
        return state

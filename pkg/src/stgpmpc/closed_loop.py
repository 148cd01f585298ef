"""Closed-loop racing simulation: plant, controller, and online learning.

Each 1/30 s step feeds the previous step's residual observation to the
learner (or advances its clock before learning activates), runs one
real-time iteration of the controller, and integrates the plant under the
steering perturbation and process noise. Runs are deterministic given the
seed; only the recorded solve times vary between runs.
"""

from __future__ import annotations

import csv
import io
import json
import logging
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import ConfigurationError
from .mpc import OCPSpec, RK4Dynamics, cold_start, sqp_rti_step
from .mpcc import ContouringCost, MpccWeights, TrackConstraints
from .residual_models import extract_residual, features_from_states, residual_map
from .track import Track
from .vehicle import (
    IDX_THETA,
    N_INPUTS,
    N_STATES,
    BicycleModel,
    PerturbationSchedule,
    Plant,
    VehicleParams,
)

LOG = logging.getLogger(__name__)

LOG_SCHEMA = "stgp-race-log-v1"
STATE_COLUMNS = ["x_p", "y_p", "phi", "v_x", "v_y", "omega", "a", "delta", "theta"]
LOG_COLUMNS = (
    ["step", "time"]
    + STATE_COLUMNS
    + ["u_T", "u_delta", "u_theta"]
    + [f"pred_{c}" for c in STATE_COLUMNS]
    + ["res_v_x", "res_v_y", "res_omega"]
    + ["delta0", "e_lat", "lap", "learning_active", "qp_ok", "solve_time"]
)
TIMING_COLUMNS = ("solve_time",)


@dataclass
class SimLog:
    """Append-only per-step record of a closed-loop run."""

    dt: float
    track_length: float
    rows: list = field(default_factory=list)
    crashed: bool = False
    crash_time: float | None = None

    def append(self, **kwargs) -> None:
        self.rows.append([kwargs[c] for c in LOG_COLUMNS])

    def column(self, name: str) -> np.ndarray:
        idx = LOG_COLUMNS.index(name)
        return np.array([row[idx] for row in self.rows])

    def states(self) -> np.ndarray:
        base = LOG_COLUMNS.index("x_p")
        return np.array([row[base : base + N_STATES] for row in self.rows])

    def predictions(self) -> np.ndarray:
        base = LOG_COLUMNS.index("pred_x_p")
        return np.array([row[base : base + N_STATES] for row in self.rows])

    def residuals(self) -> np.ndarray:
        base = LOG_COLUMNS.index("res_v_x")
        return np.array([row[base : base + 3] for row in self.rows])

    # -- persistence ---------------------------------------------------------

    def to_csv(self, path) -> None:
        Path(path).write_text(self.to_csv_text())

    def to_csv_text(self) -> str:
        buf = io.StringIO()
        buf.write(f"# schema={LOG_SCHEMA}\n")
        writer = csv.writer(buf, lineterminator="\n")
        writer.writerow(LOG_COLUMNS)
        for row in self.rows:
            writer.writerow([_format_cell(v) for v in row])
        return buf.getvalue()

    @classmethod
    def from_csv(cls, path, dt: float | None = None, track_length: float = 0.0) -> "SimLog":
        lines = Path(path).read_text().splitlines()
        if not lines or not lines[0].startswith("# schema="):
            raise ConfigurationError(f"{path} has no schema header line")
        schema = lines[0].split("=", 1)[1]
        if schema != LOG_SCHEMA:
            raise ConfigurationError(f"log schema {schema!r} does not match expected {LOG_SCHEMA!r}")
        reader = csv.reader(io.StringIO("\n".join(lines[1:])))
        header = next(reader)
        if header != LOG_COLUMNS:
            raise ConfigurationError(f"{path} columns do not match schema {LOG_SCHEMA}")
        log = cls(dt=dt if dt is not None else 0.0, track_length=track_length)
        for row in reader:
            log.rows.append([float(v) for v in row])
        if log.rows and dt is None:
            times = [r[1] for r in log.rows]
            log.dt = times[1] - times[0] if len(times) > 1 else 0.0
        return log

    # -- analysis ------------------------------------------------------------

    def lap_times(self) -> list[dict]:
        laps = self.column("lap").astype(int)
        times = self.column("time")
        events = []
        for k in range(1, len(laps)):
            if laps[k] > laps[k - 1]:
                events.append({"lap": int(laps[k]), "time": float(times[k])})
        out = []
        prev_t = 0.0
        for ev in events:
            out.append({"lap": ev["lap"], "completed_at": ev["time"], "lap_time": ev["time"] - prev_t})
            prev_t = ev["time"]
        return out

    def one_step_prediction_errors(self) -> np.ndarray:
        """pred(k) vs state(k+1): shape (n-1, n_states)."""
        states = self.states()
        preds = self.predictions()
        return states[1:] - preds[:-1]

    def summary(self) -> dict:
        times = self.column("time")
        solve = self.column("solve_time")
        errs = self.one_step_prediction_errors()
        rms = np.sqrt(np.mean(np.square(errs), axis=0)) if len(errs) else np.zeros(N_STATES)
        laps = self.lap_times()
        e_lat = self.column("e_lat")
        return {
            "schema": "stgp-race-summary-v1",
            "steps": len(self.rows),
            "duration": float(times[-1] + self.dt) if len(times) else 0.0,
            "crashed": self.crashed,
            "crash_time": self.crash_time,
            "laps_completed": len(laps),
            "lap_times": laps,
            "mean_lap_time": float(np.mean([l["lap_time"] for l in laps])) if laps else None,
            "prediction_rms": {c: float(r) for c, r in zip(STATE_COLUMNS, rms)},
            "residual_rms": {
                c: float(v)
                for c, v in zip(
                    ["v_x", "v_y", "omega"],
                    np.sqrt(np.mean(np.square(self.residuals()), axis=0)) if self.rows else np.zeros(3),
                )
            },
            "max_abs_lateral_error": float(np.abs(e_lat).max()) if len(e_lat) else 0.0,
            "solve_time": {
                "mean": float(solve.mean()) if len(solve) else 0.0,
                "max": float(solve.max()) if len(solve) else 0.0,
            },
        }


def _format_cell(value) -> str:
    if isinstance(value, (int, np.integer)):
        return str(int(value))
    return format(float(value), ".17g")


@dataclass
class RaceSetup:
    """Everything a closed-loop run needs, assembled by the config layer."""

    track: Track
    vehicle: VehicleParams
    schedule: PerturbationSchedule
    learner: object                      # tick / observe / predict_along
    dt: float = 1.0 / 30.0
    horizon: int = 40
    weights: MpccWeights = field(default_factory=MpccWeights)
    boundary_margin: float = 0.05
    boundary_probability: float = 0.5
    slack_weight: float = 1e4
    qp_tolerance: float = 1e-8
    u_lower: np.ndarray = field(default_factory=lambda: np.array([-8.0, -4.0, 0.0]))
    u_upper: np.ndarray = field(default_factory=lambda: np.array([8.0, 4.0, 4.0]))
    plant_substeps: int = 4
    plant_noise_std: np.ndarray = field(default_factory=lambda: np.full(3, 0.02))
    controller_noise_std: np.ndarray | None = None   # defaults to the plant's
    activate_after_laps: int = 1
    recovery_band: float = 0.12
    initial_speed: float = 0.5
    presolve_iterations: int = 10


def build_ocp_spec(setup: RaceSetup) -> OCPSpec:
    nominal = RK4Dynamics(BicycleModel(setup.vehicle, delta0=0.0), setup.dt)
    noise_std = (
        setup.plant_noise_std if setup.controller_noise_std is None else setup.controller_noise_std
    )
    sigma_w = np.zeros((N_STATES, N_STATES))
    bmap = residual_map()
    sigma_w += (bmap * np.square(noise_std)) @ bmap.T
    return OCPSpec(
        horizon=setup.horizon,
        dynamics=nominal,
        cost=ContouringCost(setup.track, setup.weights),
        residual_map=bmap,
        process_noise=sigma_w,
        constraints=TrackConstraints(
            setup.track,
            margin=setup.boundary_margin,
            boundary_probability=setup.boundary_probability,
            a_max=setup.vehicle.a_max,
            delta_limit=setup.vehicle.delta_max - 0.02,
        ),
        u_lower=setup.u_lower,
        u_upper=setup.u_upper,
        slack_weight=setup.slack_weight,
        qp_tolerance=setup.qp_tolerance,
    )


def run_closed_loop(setup: RaceSetup, duration: float, seed: int) -> SimLog:
    if duration <= 0:
        raise ConfigurationError("duration must be positive")
    rng = np.random.default_rng(seed)
    spec = build_ocp_spec(setup)
    nominal = spec.dynamics
    plant = Plant(
        setup.vehicle,
        setup.schedule,
        dt=setup.dt,
        substeps=setup.plant_substeps,
        noise_std=setup.plant_noise_std,
    )
    learner = setup.learner
    track = setup.track
    log = SimLog(dt=setup.dt, track_length=track.length)

    state = track.initial_state_on_centerline(speed=setup.initial_speed)
    iterate = cold_start(spec, state)
    for _ in range(setup.presolve_iterations):
        iterate, _ = sqp_rti_step(spec, iterate, learner, state, shift=False)

    n_steps = int(round(duration / setup.dt))
    learning_active = False
    pending = None  # (features, residual) from the previous step
    laps_done = 0

    for k in range(n_steps):
        t = k * setup.dt
        started = time.perf_counter()
        if pending is not None and learning_active:
            z_prev, y_prev = pending
            learner.observe(z_prev[np.newaxis], y_prev)
        else:
            learner.tick()
        iterate, info = sqp_rti_step(spec, iterate, learner, state)
        solve_time = time.perf_counter() - started
        u0 = info.control

        next_state = plant.step(state, u0, t, rng=rng)
        y, z = extract_residual(next_state, state, u0, nominal)
        progress, e_lat = track.project(state[:2], hint_progress=state[IDX_THETA])
        lap = int(state[IDX_THETA] // track.length)

        log.append(
            step=k,
            time=t,
            **{c: state[i] for i, c in enumerate(STATE_COLUMNS)},
            u_T=u0[0],
            u_delta=u0[1],
            u_theta=u0[2],
            **{f"pred_{c}": info.predicted_next_state[i] for i, c in enumerate(STATE_COLUMNS)},
            res_v_x=y[0],
            res_v_y=y[1],
            res_omega=y[2],
            delta0=setup.schedule.delta0(t),
            e_lat=e_lat,
            lap=lap,
            learning_active=int(learning_active),
            qp_ok=int(info.status == "optimal"),
            solve_time=solve_time,
        )

        width = track.frame(progress).half_width
        if abs(e_lat) > width + setup.recovery_band:
            log.crashed = True
            log.crash_time = t
            LOG.warning("vehicle left the recovery band at t=%.2f s (e_lat=%.3f)", t, e_lat)
            break

        if lap > laps_done:
            laps_done = lap
            LOG.info("lap %d completed at t=%.2f s", lap, t)
            if not learning_active and laps_done >= setup.activate_after_laps:
                learning_active = True
                LOG.info("online learning activated at t=%.2f s", t)

        pending = (z, y)
        state = next_state

    return log

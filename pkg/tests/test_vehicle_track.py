import json
import math

import numpy as np
import pytest

from stgpmpc.errors import ConfigurationError
from stgpmpc.mpcc import ContouringCost, MpccWeights, TrackConstraints, contouring_errors, mpcc_cost_terms
from stgpmpc.track import Track
from stgpmpc.vehicle import (
    IDX_A,
    IDX_DELTA,
    IDX_OMEGA,
    IDX_THETA,
    IDX_VX,
    IDX_VY,
    BicycleModel,
    PerturbationSchedule,
    Plant,
    VehicleParams,
    apply_perturbation,
    remap_steering,
)

PARAMS = VehicleParams()


def random_operating_state(rng):
    """A state inside the racing envelope."""
    x = np.zeros(9)
    x[0:2] = rng.uniform(-3, 3, 2)
    x[2] = rng.uniform(-math.pi, math.pi)
    x[IDX_VX] = rng.uniform(0.3, 3.0)
    x[IDX_VY] = rng.uniform(-0.6, 0.6)
    x[IDX_OMEGA] = rng.uniform(-3.0, 3.0)
    x[IDX_A] = rng.uniform(-1.0, 1.0)
    x[IDX_DELTA] = rng.uniform(-0.4, 0.4)
    x[IDX_THETA] = rng.uniform(0, 10)
    return x


class TestBicycleDerivative:
    def test_standstill_equilibrium(self):
        model = BicycleModel(PARAMS)
        dx, _, _ = model.derivative_batch(np.zeros((1, 9)), np.zeros((1, 3)))
        assert np.allclose(dx, 0.0, atol=1e-12)

    def test_zero_slip_zero_lateral_force(self):
        # Pure longitudinal rolling: no lateral acceleration, no yaw torque.
        model = BicycleModel(PARAMS)
        x = np.zeros(9)
        x[IDX_VX] = 2.0
        dx, _, _ = model.derivative_batch(x[np.newaxis], np.zeros((1, 3)))
        assert dx[0, IDX_VY] == pytest.approx(0.0, abs=1e-12)
        assert dx[0, IDX_OMEGA] == pytest.approx(0.0, abs=1e-12)

    def test_symmetry_left_right(self):
        model = BicycleModel(PARAMS)
        x = np.zeros(9)
        x[IDX_VX] = 2.0
        x[IDX_VY] = 0.3
        x[IDX_OMEGA] = 1.0
        x[IDX_DELTA] = 0.2
        mirrored = x.copy()
        mirrored[[IDX_VY, IDX_OMEGA, IDX_DELTA]] *= -1.0
        dx, _, _ = model.derivative_batch(x[np.newaxis], np.zeros((1, 3)))
        dxm, _, _ = model.derivative_batch(mirrored[np.newaxis], np.zeros((1, 3)))
        assert dx[0, IDX_VX] == pytest.approx(dxm[0, IDX_VX], abs=1e-12)
        assert dx[0, IDX_VY] == pytest.approx(-dxm[0, IDX_VY], abs=1e-12)
        assert dx[0, IDX_OMEGA] == pytest.approx(-dxm[0, IDX_OMEGA], abs=1e-12)

    @pytest.mark.parametrize("delta0", [0.0, 0.12, -0.15])
    def test_jacobians_match_central_differences(self, delta0):
        model = BicycleModel(PARAMS, delta0=delta0)
        rng = np.random.default_rng(1)
        eps = 1e-6
        for _ in range(40):
            x = random_operating_state(rng)
            u = rng.uniform(-2, 2, 3)
            _, jx, ju = model.derivative_batch(x[np.newaxis], u[np.newaxis])
            for d in range(9):
                xp, xm = x.copy(), x.copy()
                xp[d] += eps
                xm[d] -= eps
                fd = (
                    model.derivative_batch(xp[np.newaxis], u[np.newaxis])[0][0]
                    - model.derivative_batch(xm[np.newaxis], u[np.newaxis])[0][0]
                ) / (2 * eps)
                scale = np.maximum(np.abs(fd), 1.0)
                assert np.all(np.abs(jx[0, :, d] - fd) / scale <= 1e-5)
            for d in range(3):
                up, um = u.copy(), u.copy()
                up[d] += eps
                um[d] -= eps
                fd = (
                    model.derivative_batch(x[np.newaxis], up[np.newaxis])[0][0]
                    - model.derivative_batch(x[np.newaxis], um[np.newaxis])[0][0]
                ) / (2 * eps)
                scale = np.maximum(np.abs(fd), 1.0)
                assert np.all(np.abs(ju[0, :, d] - fd) / scale <= 1e-5)

    def test_energy_dissipates_without_input(self):
        schedule = PerturbationSchedule(start=1e9)
        plant = Plant(PARAMS, schedule, dt=1.0 / 30.0, substeps=4)
        x = np.zeros(9)
        x[IDX_VX] = 2.5
        x[IDX_VY] = 0.3
        x[IDX_OMEGA] = 1.0
        energy = 0.5 * PARAMS.mass * (x[IDX_VX] ** 2 + x[IDX_VY] ** 2) + 0.5 * PARAMS.inertia_z * x[IDX_OMEGA] ** 2
        for k in range(200):
            x = plant.step(x, np.zeros(3), t=k / 30.0)
            new_energy = (
                0.5 * PARAMS.mass * (x[IDX_VX] ** 2 + x[IDX_VY] ** 2)
                + 0.5 * PARAMS.inertia_z * x[IDX_OMEGA] ** 2
            )
            assert new_energy <= energy + 1e-12
            energy = new_energy
        assert energy <= 0.05


class TestPerturbation:
    def test_identity_before_start(self):
        schedule = PerturbationSchedule(start=15.0, amplitude=0.15)
        for delta in np.linspace(-0.4, 0.4, 9):
            assert apply_perturbation(delta, 10.0, schedule, PARAMS.delta_max) == delta

    def test_offset_at_neutral(self):
        assert remap_steering(0.0, 0.15, PARAMS.delta_max) == pytest.approx(0.15)

    def test_endpoints_fixed(self):
        dm = PARAMS.delta_max
        assert remap_steering(dm, 0.15, dm) == pytest.approx(dm)
        assert remap_steering(-dm, 0.15, dm) == pytest.approx(-dm)

    def test_monotone_for_admissible_offsets(self):
        rng = np.random.default_rng(2)
        dm = PARAMS.delta_max
        for _ in range(200):
            d0 = rng.uniform(-0.15, 0.15)
            a, b = np.sort(rng.uniform(-dm, dm, 2))
            if a == b:
                continue
            assert remap_steering(a, d0, dm) < remap_steering(b, d0, dm)

    def test_schedule_segments(self):
        schedule = PerturbationSchedule(
            start=15.0, amplitude=0.15, segments=((10.0, "hold", 1.0), (10.0, "hold", -1.0))
        )
        assert schedule.delta0(14.9) == 0.0
        assert schedule.delta0(20.0) == pytest.approx(0.15)
        assert schedule.delta0(30.0) == pytest.approx(-0.15)
        assert schedule.delta0(40.0) == 0.0

    def test_sine_segment_bounded(self):
        schedule = PerturbationSchedule(start=0.0, amplitude=0.15, segments=((10.0, "sine", 1.0),))
        values = [schedule.delta0(t) for t in np.linspace(0, 10, 101)]
        assert max(values) <= 0.15 + 1e-12
        assert max(values) == pytest.approx(0.15, abs=1e-6)
        assert min(values) >= 0.0

    def test_roundtrip(self):
        schedule = PerturbationSchedule(start=5.0, amplitude=0.1, segments=((3.0, "sine", -0.5),))
        restored = PerturbationSchedule.from_dict(json.loads(json.dumps(schedule.to_dict())))
        assert restored == schedule


class TestTrack:
    def test_oval_closes_and_has_length(self):
        track = Track.oval(straight=2.5, radius=1.0, half_width=0.28)
        expected = 2 * 2.5 + 2 * math.pi * 1.0
        assert track.length == pytest.approx(expected, rel=2e-3)

    def test_frame_on_bottom_straight(self):
        track = Track.oval(straight=2.0, radius=1.0)
        frame = track.frame(0.5)
        assert frame.position[1] == pytest.approx(-1.0, abs=1e-9)
        assert frame.tangent == pytest.approx([1.0, 0.0], abs=1e-9)
        assert frame.normal == pytest.approx([0.0, 1.0], abs=1e-9)

    def test_projection_on_circle_matches_radius_difference(self):
        # On the arc segments the lateral error equals the radius offset.
        track = Track.oval(straight=2.0, radius=1.0, points_per_arc=400)
        center = np.array([1.0, 0.0])  # right arc center
        for r, ang in [(0.8, 0.3), (1.15, -0.5), (1.0, 0.9)]:
            point = center + r * np.array([math.cos(ang), math.sin(ang)])
            _, e_lat = track.project(point)
            # Left normal points inward on a counterclockwise track.
            assert e_lat == pytest.approx(-(r - 1.0), abs=2e-5)

    def test_projection_prefers_hint_on_ties(self):
        track = Track.oval(straight=2.0, radius=1.0)
        # The centroid is ambiguous; the hint picks the branch.
        p_near_start, _ = track.project(np.array([0.0, 0.0]), hint_progress=0.2)
        assert abs(p_near_start - 0.2) < track.length / 4 or (
            track.length - abs(p_near_start - 0.2) < track.length / 4
        )

    def test_json_roundtrip(self, tmp_path):
        track = Track.oval()
        path = tmp_path / "oval.json"
        track.to_json(path)
        restored = Track.from_json(path)
        assert np.array_equal(restored.vertices, track.vertices)
        assert np.array_equal(restored.half_widths, track.half_widths)

    def test_open_track_rejected(self):
        with pytest.raises(ConfigurationError):
            Track(np.array([[0.0, 0.0], [1.0, 0.0], [1.0, 1.0]]), 0.3, closed=False)

    def test_initial_state(self):
        track = Track.oval()
        state = track.initial_state_on_centerline(speed=0.7)
        _, e_lat = track.project(state[:2])
        assert abs(e_lat) <= 1e-9
        assert state[IDX_VX] == 0.7


class TestMpcc:
    def setup_method(self):
        self.track = Track.oval(straight=2.5, radius=1.0, half_width=0.28)
        self.weights = MpccWeights()

    def test_on_centerline_zero_errors(self):
        state = self.track.initial_state_on_centerline(progress=0.4)
        e_c, e_l, _, _, _ = contouring_errors(self.track, state[np.newaxis])
        assert e_c[0] == pytest.approx(0.0, abs=1e-9)
        assert e_l[0] == pytest.approx(0.0, abs=1e-9)
        value, _ = mpcc_cost_terms(state, self.track, self.weights)
        assert value == pytest.approx(0.0, abs=1e-12)

    def test_pure_lateral_offset_on_straight(self):
        state = self.track.initial_state_on_centerline(progress=0.5)
        frame = self.track.frame(0.5)
        state[:2] += 0.1 * frame.normal
        e_c, e_l, _, _, _ = contouring_errors(self.track, state[np.newaxis])
        assert e_c[0] == pytest.approx(0.1, abs=1e-9)
        assert e_l[0] == pytest.approx(0.0, abs=1e-9)

    def test_lag_error_gradient_in_theta(self):
        state = self.track.initial_state_on_centerline(progress=1.0)
        _, _, _, grad_l, _ = contouring_errors(self.track, state[np.newaxis])
        assert grad_l[0, IDX_THETA] == -1.0

    def test_progress_reward_enters_input_gradient(self):
        cost = ContouringCost(self.track, self.weights)
        state = self.track.initial_state_on_centerline()
        _, _, r, _ = cost.stage_quadratics(state[np.newaxis], np.zeros((1, 3)))
        assert r[0, 2] == pytest.approx(-self.weights.progress)

    def test_boundary_constraints_sign(self):
        cons = TrackConstraints(self.track, margin=0.05)
        on_center = self.track.initial_state_on_centerline(progress=0.3)
        h, _, _ = cons.stage_values(on_center[np.newaxis], np.zeros((1, 3)))
        assert h[0, 0] < 0 and h[0, 1] < 0
        # On the left boundary with zero margin the left row is active.
        cons0 = TrackConstraints(self.track, margin=0.0)
        frame = self.track.frame(0.3)
        on_edge = on_center.copy()
        on_edge[:2] = frame.position + frame.half_width * frame.normal
        h, _, _ = cons0.stage_values(on_edge[np.newaxis], np.zeros((1, 3)))
        assert h[0, 0] == pytest.approx(0.0, abs=1e-9)

    def test_cost_quadratic_model_matches_finite_differences(self):
        cost = ContouringCost(self.track, self.weights)
        rng = np.random.default_rng(3)
        state = self.track.initial_state_on_centerline(progress=2.0)
        state[:2] += rng.uniform(-0.1, 0.1, 2)
        state[IDX_THETA] += rng.uniform(-0.05, 0.05)
        q, _, _, _ = cost.stage_quadratics(state[np.newaxis], np.zeros((1, 3)))
        eps = 1e-7
        for d in [0, 1, IDX_THETA]:
            xp, xm = state.copy(), state.copy()
            xp[d] += eps
            xm[d] -= eps
            vp, _ = mpcc_cost_terms(xp, self.track, self.weights)
            vm, _ = mpcc_cost_terms(xm, self.track, self.weights)
            fd = (vp - vm) / (2 * eps)
            assert q[0, d] == pytest.approx(fd, rel=1e-4, abs=1e-6)

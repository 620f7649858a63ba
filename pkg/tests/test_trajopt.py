import numpy as np
import pytest

from prednav.grid import OCCUPIED, FREE, OccupancyGrid, PlanningMap
from prednav.trajopt import (
    ACCEL_MAX,
    DELTA_MAX,
    STEER_RATE_MAX,
    V_MIN,
    ControlInput,
    InfeasibleError,
    RobotState,
    Trajectory,
    TranscriptionConfig,
    VehicleParams,
    check_collision,
    dynamics,
    dynamics_jacobian,
    integrate_rk4,
    rk4_step_fast,
    rk4_step_with_jacobians,
    solve_transcription,
)

P = VehicleParams()


def circle_closed_form(x0, v, delta, L, t):
    """Constant-(v, delta) motion lies on a circle of radius L/tan(delta)."""
    omega = v * np.tan(delta) / L
    th0 = x0[3]
    th = th0 + omega * t
    x = x0[0] + (v / omega) * (np.sin(th) - np.sin(th0))
    y = x0[1] - (v / omega) * (np.cos(th) - np.cos(th0))
    return np.array([x, y, v, th, delta])


# --- dynamics ---------------------------------------------------------------


def test_dynamics_straight_motion():
    out = dynamics(np.array([0, 0, 1, 0, 0.0]), np.array([0.0, 0.0]), P)
    assert np.allclose(out, [1, 0, 0, 0, 0])


def test_dynamics_axis_case():
    out = dynamics(np.array([0, 0, 2, np.pi / 2, 0.0]), np.array([0.0, 0.0]), P)
    assert out[0] == pytest.approx(0.0, abs=1e-12)
    assert out[1] == pytest.approx(2.0)


def test_dynamics_heading_rate_value():
    out = dynamics(np.array([0, 0, 1, 0, 0.1]), np.array([0.0, 0.0]), P)
    assert out[3] == pytest.approx(np.tan(0.1) / 0.33, abs=1e-12)
    assert out[3] == pytest.approx(0.30405, abs=5e-5)


def test_dynamics_jacobian_matches_fd():
    rng = np.random.default_rng(0)
    for _ in range(10):
        x = rng.uniform(-1, 1, 5)
        x[4] = np.clip(x[4], -0.29, 0.29)
        u = rng.uniform(-1, 1, 2)
        J = dynamics_jacobian(x, P)
        eps = 1e-7
        for j in range(5):
            dx = np.zeros(5)
            dx[j] = eps
            fd = (dynamics(x + dx, u, P) - dynamics(x - dx, u, P)) / (2 * eps)
            assert np.allclose(J[:, j], fd, atol=1e-6)


# --- integrate_rk4 ----------------------------------------------------------


def test_rk4_constant_velocity():
    x = RobotState(0, 0, 1, 0, 0)
    out = integrate_rk4(x, ControlInput(0, 0), 1.0, P)
    assert out.x == pytest.approx(1.0, abs=1e-12)
    assert (out.y, out.v, out.theta, out.delta) == (0, 1, 0, 0)


def test_rk4_circle_tracking():
    x0 = np.array([0.2, -0.1, 1.0, 0.3, 0.2])
    dt = 1e-3
    x = x0.copy()
    for k in range(1000):
        x = integrate_rk4(
            RobotState.from_array(x), ControlInput(0, 0), dt, P
        ).to_array()
    ref = circle_closed_form(x0, 1.0, 0.2, P.wheelbase, 1.0)
    assert np.max(np.abs(x[:2] - ref[:2])) <= 1e-6


def test_rk4_order_four_convergence():
    x0 = RobotState(0, 0, 1, 0, 0.2)
    ref_t = 0.2

    def one_step_error(dt):
        steps = int(round(ref_t / dt))
        x = x0.to_array()
        for _ in range(steps):
            x = integrate_rk4(RobotState.from_array(x), ControlInput(0, 0), dt, P).to_array()
        ref = circle_closed_form(x0.to_array(), 1.0, 0.2, P.wheelbase, ref_t)
        return np.max(np.abs(x[:2] - ref[:2]))

    e1 = one_step_error(0.02)
    e2 = one_step_error(0.01)
    ratio = e1 / e2
    assert 12.0 <= ratio <= 20.0


def test_rk4_fast_twin_matches_vector_version():
    rng = np.random.default_rng(3)
    for _ in range(20):
        x = rng.uniform(-2, 2, 5)
        x[4] = np.clip(x[4], -0.3, 0.3)
        u = rng.uniform(-2, 2, 2)
        dt = float(rng.uniform(1e-3, 0.1))
        a = integrate_rk4(RobotState.from_array(x), ControlInput(*u), dt, P).to_array()
        b = np.array(rk4_step_fast(*x, *u, dt, P.wheelbase))
        assert np.max(np.abs(a - b)) < 1e-14


def test_rk4_jacobians_match_fd():
    rng = np.random.default_rng(5)
    for _ in range(5):
        x = rng.uniform(-1, 1, 5)
        x[2] = abs(x[2]) + 0.5
        x[4] = np.clip(x[4], -0.25, 0.25)
        u = rng.uniform(-1, 1, 2)
        dt = 0.17
        _, A, B, g = rk4_step_with_jacobians(x, u, dt, P)
        eps = 1e-6

        def step(xx, uu, ddt):
            return integrate_rk4(RobotState.from_array(xx), ControlInput(*uu), ddt, P).to_array()

        for j in range(5):
            d = np.zeros(5)
            d[j] = eps
            fd = (step(x + d, u, dt) - step(x - d, u, dt)) / (2 * eps)
            assert np.allclose(A[:, j], fd, atol=1e-6)
        for j in range(2):
            d = np.zeros(2)
            d[j] = eps
            fd = (step(x, u + d, dt) - step(x, u - d, dt)) / (2 * eps)
            assert np.allclose(B[:, j], fd, atol=1e-6)
        fd = (step(x, u, dt + eps) - step(x, u, dt - eps)) / (2 * eps)
        assert np.allclose(g, fd, atol=1e-6)


# --- transcription ----------------------------------------------------------


def empty_map(span=20.0, res=0.05):
    n = int(span / res)
    g = OccupancyGrid.full(n, n, FREE, resolution=res, origin=(-span / 2, -span / 2))
    return PlanningMap(g, np.zeros((n, n), dtype=np.uint8))


def map_with_block(center, half=0.1, span=20.0, res=0.05):
    n = int(span / res)
    origin = (-span / 2, -span / 2)
    cells = np.full((n, n), FREE, dtype=np.uint8)
    cx0 = int((center[0] - half - origin[0]) / res)
    cx1 = int((center[0] + half - origin[0]) / res) + 1
    cy0 = int((center[1] - half - origin[1]) / res)
    cy1 = int((center[1] + half - origin[1]) / res) + 1
    cells[cy0:cy1, cx0:cx1] = OCCUPIED
    return PlanningMap(OccupancyGrid(res, origin, cells), np.zeros((n, n), dtype=np.uint8))


def certify(traj, cfg, pmap, x_target):
    # defects: independent re-simulation through integrate_rk4
    for k in range(traj.knot_count - 1):
        nxt = integrate_rk4(
            RobotState.from_array(traj.states[k]),
            ControlInput(*traj.inputs[k]),
            traj.dt,
            P,
        ).to_array()
        assert np.max(np.abs(nxt - traj.states[k + 1])) <= cfg.defect_tol
    # bounds
    assert (traj.states[1:, 2] >= V_MIN - 1e-8).all()
    assert (traj.states[1:, 2] <= cfg.v_max + 1e-8).all()
    assert (np.abs(traj.states[1:, 4]) <= DELTA_MAX + 1e-8).all()
    assert (np.abs(traj.inputs[:, 0]) <= ACCEL_MAX + 1e-8).all()
    assert (np.abs(traj.inputs[:, 1]) <= STEER_RATE_MAX + 1e-8).all()
    assert cfg.dt_min - 1e-8 <= traj.dt <= cfg.dt_max + 1e-8
    # terminal box
    assert (np.abs(traj.states[-1] - x_target) <= cfg.terminal_box + 1e-8).all()
    # clearance at the constraint sampling: knots + 3 interpolants/interval
    assert not check_collision(traj, pmap, cfg.obstacle_radius - 1e-9, samples_per_interval=4)


def test_open_space_straight():
    cfg = TranscriptionConfig(v_max=3.0)
    start = RobotState(0, 0, 0.5, 0, 0)
    target = np.array([4.0, 0.0, 2.0, 0.0, 0.0])
    pmap = empty_map()
    traj = solve_transcription(start, target, pmap, cfg)
    certify(traj, cfg, pmap, target)
    assert abs(traj.states[-1][0] - 4.0) <= 0.1 + 1e-9
    assert abs(traj.states[-1][1]) <= 0.1 + 1e-9


def test_target_inside_obstacle_infeasible():
    cfg = TranscriptionConfig(v_max=3.0)
    start = RobotState(0, 0, 1.0, 0, 0)
    pmap = map_with_block((3.0, 0.0), half=0.05)
    target = np.array([3.0, 0.0, 1.0, 0.0, 0.0])
    with pytest.raises(InfeasibleError):
        solve_transcription(start, target, pmap, cfg)


def test_start_in_collision_infeasible():
    cfg = TranscriptionConfig(v_max=3.0)
    pmap = map_with_block((0.2, 0.0), half=0.05)
    start = RobotState(0, 0, 1.0, 0, 0)
    target = np.array([4.0, 0.0, 1.0, 0.0, 0.0])
    with pytest.raises(InfeasibleError):
        solve_transcription(start, target, pmap, cfg)


def test_obstacle_midway_keeps_clearance():
    cfg = TranscriptionConfig(v_max=3.0)
    start = RobotState(0, 0, 1.0, 0, 0)
    pmap = map_with_block((2.0, 0.0), half=0.05)
    target = np.array([4.0, 0.4, 1.0, 0.0, 0.0])
    traj = solve_transcription(start, target, pmap, cfg)
    certify(traj, cfg, pmap, target)


def test_bitwise_determinism():
    cfg = TranscriptionConfig(v_max=3.0)
    start = RobotState(0, 0, 1.0, 0.1, 0)
    pmap = map_with_block((2.0, 0.3), half=0.05)
    target = np.array([3.5, -0.5, 1.5, 0.0, 0.0])
    a = solve_transcription(start, target, pmap, cfg)
    b = solve_transcription(start, target, pmap, cfg)
    assert a.dt == b.dt
    assert (a.states == b.states).all()
    assert (a.inputs == b.inputs).all()


def test_objective_log_non_increasing():
    cfg = TranscriptionConfig(v_max=3.0)
    start = RobotState(0, 0, 0.8, 0, 0)
    pmap = empty_map()
    target = np.array([3.0, 0.5, 1.2, 0.2, 0.0])
    log = []
    solve_transcription(start, target, pmap, cfg, log=log)
    assert len(log) >= 1
    assert all(b <= a + 1e-12 for a, b in zip(log, log[1:]))


# --- check_collision ---------------------------------------------------------


def straight_traj(x0, x1, n=5):
    states = np.linspace(0, 1, n)[:, None] * (x1 - x0)[None, :] + x0[None, :]
    return Trajectory(states=states, inputs=np.zeros((n - 1, 2)), dt=0.1)


def test_check_collision_empty_map():
    traj = straight_traj(np.array([0, 0, 1, 0, 0.0]), np.array([2, 0, 1, 0, 0.0]))
    assert not check_collision(traj, empty_map(), 0.35)


def test_check_collision_knot_on_obstacle():
    pmap = map_with_block((1.0, 0.0), half=0.05)
    traj = straight_traj(np.array([0, 0, 1, 0, 0.0]), np.array([2, 0, 1, 0, 0.0]), n=3)
    assert check_collision(traj, pmap, 0.35)


def test_check_collision_interpolant_crosses_wall():
    pmap = map_with_block((1.0, 0.0), half=0.02)
    # knots straddle the wall; only interpolated points cross it
    traj = straight_traj(np.array([0.0, 0, 1, 0, 0.0]), np.array([2.0, 0, 1, 0, 0.0]), n=2)
    assert check_collision(traj, pmap, 0.2)


def test_trajectory_csv_export(tmp_path):
    traj = straight_traj(np.array([0, 0, 1, 0, 0.0]), np.array([2, 0, 1, 0, 0.0]))
    path = tmp_path / "traj.csv"
    traj.save_csv(path)
    lines = path.read_text().strip().splitlines()
    assert lines[0].startswith("k,t,x,y")
    assert len(lines) == traj.knot_count + 1

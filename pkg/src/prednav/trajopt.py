"""Bicycle dynamics, RK4 integration with analytic sensitivities, and the
variable-dt direct-transcription problem.

State is [x, y, v, theta, delta]: planar position, forward speed, heading,
turn angle. Input is [accel, steer_rate]. The transcription discretizes the
2 s horizon into N knot points sharing one dt, enforces the dynamics as
defect equalities, and minimizes sum(u^T R_c u) + dt so shorter (faster)
trajectories win.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy import optimize

from .grid import clearance_batch

STATE_DIM = 5
INPUT_DIM = 2

V_MIN = 0.5  # m/s, lower speed bound inside optimized trajectories
DELTA_MAX = 0.3  # rad, turn angle state bound
ACCEL_MAX = 2.5  # m/s^2
STEER_RATE_MAX = 1.5  # rad/s
TERMINAL_BOX = np.array([0.1, 0.1, 0.1, 0.25, 100.0])

# Continuous-time input Jacobian is constant for this model.
_B_CONT = np.array(
    [[0.0, 0.0], [0.0, 0.0], [1.0, 0.0], [0.0, 0.0], [0.0, 1.0]]
)


class InfeasibleError(RuntimeError):
    """Transcription found no iterate satisfying the constraints."""

    def __init__(self, message, residuals=None):
        super().__init__(message)
        self.residuals = residuals or {}


@dataclass
class VehicleParams:
    wheelbase: float = 0.33  # m, typical 1/10-scale car

    def __post_init__(self):
        if self.wheelbase <= 0:
            raise ValueError("wheelbase must be > 0")


@dataclass
class RobotState:
    x: float
    y: float
    v: float
    theta: float
    delta: float

    def to_array(self):
        return np.array([self.x, self.y, self.v, self.theta, self.delta])

    @classmethod
    def from_array(cls, a):
        return cls(float(a[0]), float(a[1]), float(a[2]), float(a[3]), float(a[4]))


@dataclass
class ControlInput:
    accel: float
    steer_rate: float

    def to_array(self):
        return np.array([self.accel, self.steer_rate])

    def clamped(self):
        return ControlInput(
            float(np.clip(self.accel, -ACCEL_MAX, ACCEL_MAX)),
            float(np.clip(self.steer_rate, -STEER_RATE_MAX, STEER_RATE_MAX)),
        )


@dataclass
class Trajectory:
    """N knot states, N-1 inputs, one shared knot interval dt."""

    states: np.ndarray  # (N, 5)
    inputs: np.ndarray  # (N-1, 2)
    dt: float

    def __post_init__(self):
        self.states = np.asarray(self.states, dtype=float)
        self.inputs = np.asarray(self.inputs, dtype=float)
        if self.states.ndim != 2 or self.states.shape[1] != STATE_DIM:
            raise ValueError("states must be (N, 5)")
        if self.inputs.shape != (len(self.states) - 1, INPUT_DIM):
            raise ValueError("inputs must be (N-1, 2)")
        if self.dt <= 0:
            raise ValueError("dt must be > 0")

    @property
    def knot_count(self):
        return len(self.states)

    @property
    def duration(self):
        return (self.knot_count - 1) * self.dt

    def knot_times(self):
        return np.arange(self.knot_count) * self.dt

    def positions(self):
        return self.states[:, 0:2]

    def save_csv(self, path):
        with open(path, "w") as f:
            f.write("k,t,x,y,v,theta,delta,u0,u1,dt\n")
            for k in range(self.knot_count):
                u0, u1 = (
                    self.inputs[k] if k < self.knot_count - 1 else (float("nan"),) * 2
                )
                s = self.states[k]
                f.write(
                    f"{k},{k * self.dt!r},{s[0]!r},{s[1]!r},{s[2]!r},{s[3]!r},{s[4]!r},"
                    f"{u0!r},{u1!r},{self.dt!r}\n"
                )


def dynamics(x, u, params: VehicleParams):
    """Bicycle acceleration model: [v cos(th), v sin(th), u0, v tan(de)/L, u1].

    Accepts single states (5,) or batches (..., 5); same for u.
    """
    x = np.asarray(x, dtype=float)
    u = np.asarray(u, dtype=float)
    v, th, de = x[..., 2], x[..., 3], x[..., 4]
    out = np.empty_like(x)
    out[..., 0] = v * np.cos(th)
    out[..., 1] = v * np.sin(th)
    out[..., 2] = u[..., 0]
    out[..., 3] = v * np.tan(de) / params.wheelbase
    out[..., 4] = u[..., 1]
    return out


def dynamics_jacobian(x, params: VehicleParams):
    """Continuous-time state Jacobian, batched: (..., 5, 5)."""
    x = np.asarray(x, dtype=float)
    v, th, de = x[..., 2], x[..., 3], x[..., 4]
    J = np.zeros(x.shape[:-1] + (STATE_DIM, STATE_DIM))
    J[..., 0, 2] = np.cos(th)
    J[..., 0, 3] = -v * np.sin(th)
    J[..., 1, 2] = np.sin(th)
    J[..., 1, 3] = v * np.cos(th)
    tan_de = np.tan(de)
    J[..., 3, 2] = tan_de / params.wheelbase
    J[..., 3, 4] = v * (1.0 + tan_de * tan_de) / params.wheelbase
    return J


def _rk4_arr(x, u, dt, params):
    k1 = dynamics(x, u, params)
    k2 = dynamics(x + 0.5 * dt * k1, u, params)
    k3 = dynamics(x + 0.5 * dt * k2, u, params)
    k4 = dynamics(x + dt * k3, u, params)
    return x + (dt / 6.0) * (k1 + 2.0 * k2 + 2.0 * k3 + k4)


def integrate_rk4(x: RobotState, u: ControlInput, dt: float, params: VehicleParams) -> RobotState:
    """Classical 4th-order step with the input held constant."""
    if dt <= 0:
        raise ValueError("dt must be > 0")
    return RobotState.from_array(_rk4_arr(x.to_array(), u.to_array(), dt, params))


def rk4_step_fast(x, y, v, th, de, u0, u1, dt, L):
    """Scalar RK4 twin of integrate_rk4 for the 600 Hz simulation loop.

    Same arithmetic as the array version (verified in tests); plain floats
    avoid numpy overhead on tiny operands.
    """
    import math

    def f(xx, yy, vv, tt, dd):
        return (vv * math.cos(tt), vv * math.sin(tt), u0, vv * math.tan(dd) / L, u1)

    k1 = f(x, y, v, th, de)
    h = 0.5 * dt
    k2 = f(x + h * k1[0], y + h * k1[1], v + h * k1[2], th + h * k1[3], de + h * k1[4])
    k3 = f(x + h * k2[0], y + h * k2[1], v + h * k2[2], th + h * k2[3], de + h * k2[4])
    k4 = f(x + dt * k3[0], y + dt * k3[1], v + dt * k3[2], th + dt * k3[3], de + dt * k3[4])
    s = dt / 6.0
    return (
        x + s * (k1[0] + 2.0 * k2[0] + 2.0 * k3[0] + k4[0]),
        y + s * (k1[1] + 2.0 * k2[1] + 2.0 * k3[1] + k4[1]),
        v + s * (k1[2] + 2.0 * k2[2] + 2.0 * k3[2] + k4[2]),
        th + s * (k1[3] + 2.0 * k2[3] + 2.0 * k3[3] + k4[3]),
        de + s * (k1[4] + 2.0 * k2[4] + 2.0 * k3[4] + k4[4]),
    )


def rk4_step_with_jacobians(x, u, dt, params):
    """One RK4 step plus sensitivities, batched over leading axes.

    Returns (x_next, A, B, g) with A = d x_next/d x (..., 5, 5),
    B = d x_next/d u (..., 5, 2), g = d x_next/d dt (..., 5). Exact forward
    chain through the four stages, so the Jacobians are those of the step
    itself, not the continuous dynamics.
    """
    x = np.asarray(x, dtype=float)
    u = np.asarray(u, dtype=float)
    batch = x.shape[:-1]
    eye = np.broadcast_to(np.eye(STATE_DIM), batch + (STATE_DIM, STATE_DIM))
    B_c = np.broadcast_to(_B_CONT, batch + (STATE_DIM, INPUT_DIM))

    k1 = dynamics(x, u, params)
    x2 = x + 0.5 * dt * k1
    k2 = dynamics(x2, u, params)
    x3 = x + 0.5 * dt * k2
    k3 = dynamics(x3, u, params)
    x4 = x + dt * k3
    k4 = dynamics(x4, u, params)
    x_next = x + (dt / 6.0) * (k1 + 2.0 * k2 + 2.0 * k3 + k4)

    J1 = dynamics_jacobian(x, params)
    J2 = dynamics_jacobian(x2, params)
    J3 = dynamics_jacobian(x3, params)
    J4 = dynamics_jacobian(x4, params)

    Dk1 = J1
    Dk2 = J2 @ (eye + 0.5 * dt * Dk1)
    Dk3 = J3 @ (eye + 0.5 * dt * Dk2)
    Dk4 = J4 @ (eye + dt * Dk3)
    A = eye + (dt / 6.0) * (Dk1 + 2.0 * Dk2 + 2.0 * Dk3 + Dk4)

    Ek1 = B_c
    Ek2 = J2 @ (0.5 * dt * Ek1) + B_c
    Ek3 = J3 @ (0.5 * dt * Ek2) + B_c
    Ek4 = J4 @ (dt * Ek3) + B_c
    B = (dt / 6.0) * (Ek1 + 2.0 * Ek2 + 2.0 * Ek3 + Ek4)

    gk1 = np.zeros_like(k1)
    gk2 = np.einsum("...ij,...j->...i", J2, 0.5 * k1 + 0.5 * dt * gk1)
    gk3 = np.einsum("...ij,...j->...i", J3, 0.5 * k2 + 0.5 * dt * gk2)
    gk4 = np.einsum("...ij,...j->...i", J4, k3 + dt * gk3)
    g = (1.0 / 6.0) * (k1 + 2.0 * k2 + 2.0 * k3 + k4) + (dt / 6.0) * (
        gk1 + 2.0 * gk2 + 2.0 * gk3 + gk4
    )
    return x_next, A, B, g


@dataclass
class TranscriptionConfig:
    knot_count: int = 10
    horizon: float = 2.0  # s
    input_cost: tuple[float, float] = (0.1, 0.1)  # diagonal of R_c
    obstacle_radius: float = 0.35  # m
    terminal_box: np.ndarray = field(default_factory=lambda: TERMINAL_BOX.copy())
    dt_min: float = 0.01
    v_max: float = 3.0
    defect_tol: float = 1e-4
    max_iterations: int = 120
    outer_rounds: int = 3
    # soft repulsion pushing knots beyond the hard radius when space allows;
    # weight 0 restores the bare objective
    shaping_radius: float = 0.50
    shaping_weight: float = 6.0

    @property
    def dt_max(self):
        return self.horizon / (self.knot_count - 1)


def _interp_alphas():
    return np.array([0.25, 0.5, 0.75])


class _TranscriptionProblem:
    """Shared evaluation cache for SLSQP callbacks."""

    def __init__(self, x0, pmap, cfg, params):
        self.x0 = x0
        self.pmap = pmap
        self.cfg = cfg
        self.params = params
        self.n_knots = cfg.knot_count
        self.n_states = (self.n_knots - 1) * STATE_DIM
        self.n_inputs = (self.n_knots - 1) * INPUT_DIM
        self.n_vars = self.n_states + self.n_inputs + 1
        self._cache_key = None
        self._cache = None
        # occupied-cell KD-tree via the grid's lazy property
        grid = pmap.grid if hasattr(pmap, "grid") else pmap
        self._tree = grid._occupied_tree

    def unpack(self, z):
        n = self.n_knots - 1
        states = np.vstack([self.x0[None, :], z[: self.n_states].reshape(n, STATE_DIM)])
        inputs = z[self.n_states : self.n_states + self.n_inputs].reshape(n, INPUT_DIM)
        dt = float(z[-1])
        return states, inputs, dt

    def _evaluate(self, z):
        key = z.tobytes()
        if key == self._cache_key:
            return self._cache
        states, inputs, dt = self.unpack(z)
        x_next, A, B, g = rk4_step_with_jacobians(states[:-1], inputs, dt, self.params)
        defects = states[1:] - x_next
        self._cache_key = key
        self._cache = (states, inputs, dt, x_next, A, B, g, defects)
        return self._cache

    # -- defect equality constraints --------------------------------------

    def defect_fun(self, z):
        return self._evaluate(z)[7].ravel()

    def defect_jac(self, z):
        states, inputs, dt, x_next, A, B, g, defects = self._evaluate(z)
        n = self.n_knots - 1
        J = np.zeros((n * STATE_DIM, self.n_vars))
        for k in range(n):
            r = slice(k * STATE_DIM, (k + 1) * STATE_DIM)
            # d defect_k / d x_{k+1} = I  (x_{k+1} lives at state slot k)
            J[r, k * STATE_DIM : (k + 1) * STATE_DIM] = np.eye(STATE_DIM)
            if k >= 1:
                J[r, (k - 1) * STATE_DIM : k * STATE_DIM] = -A[k]
            J[r, self.n_states + k * INPUT_DIM : self.n_states + (k + 1) * INPUT_DIM] = -B[k]
            J[r, -1] = -g[k]
        return J

    # -- clearance inequality constraints ----------------------------------

    def _constraint_points(self, states):
        pos = states[:, 0:2]
        alphas = _interp_alphas()
        interp = (1 - alphas)[None, :, None] * pos[:-1, None, :] + alphas[None, :, None] * pos[
            1:, None, :
        ]
        return np.vstack([pos[1:], interp.reshape(-1, 2)])

    def clearance_fun(self, z):
        states, *_ = self._evaluate(z)
        pts = self._constraint_points(states)
        if self._tree is None:
            return np.full(len(pts), 1e3)
        d, _ = self._tree.query(pts)
        return np.minimum(d, 1e3) - self.cfg.obstacle_radius

    def clearance_jac(self, z):
        states, *_ = self._evaluate(z)
        pts = self._constraint_points(states)
        n = self.n_knots - 1
        J = np.zeros((len(pts), self.n_vars))
        if self._tree is None:
            return J
        d, idx = self._tree.query(pts)
        with np.errstate(invalid="ignore", divide="ignore"):
            dirs = (pts - self._tree.data[idx]) / d[:, None]
        dirs[~np.isfinite(dirs)] = 0.0
        dirs[d >= 1e3] = 0.0
        # knot points k=1..N-1 occupy rows 0..n-1; state slot of knot k is k-1
        for k in range(1, self.n_knots):
            J[k - 1, (k - 1) * STATE_DIM : (k - 1) * STATE_DIM + 2] = dirs[k - 1]
        alphas = _interp_alphas()
        row = n
        for k in range(n):
            for a in alphas:
                if k >= 1:
                    J[row, (k - 1) * STATE_DIM : (k - 1) * STATE_DIM + 2] = (1 - a) * dirs[row]
                J[row, k * STATE_DIM : k * STATE_DIM + 2] = a * dirs[row]
                row += 1
        return J

    # -- objective ----------------------------------------------------------
    # sum(u^T R_c u) + dt, plus an optional quadratic hinge nudging knots
    # past shaping_radius so tracked trajectories do not shave walls

    def _shaping_terms(self, z):
        cfg = self.cfg
        if cfg.shaping_weight <= 0 or self._tree is None:
            return 0.0, None, None
        states, *_ = self._evaluate(z)
        pts = states[1:, 0:2]
        d, idx = self._tree.query(pts)
        gap = cfg.shaping_radius - d
        active = gap > 0
        value = cfg.shaping_weight * float(np.sum(gap[active] ** 2))
        return value, (d, idx, active), pts

    def objective(self, z):
        states, inputs, dt = self.unpack(z)
        r = np.asarray(self.cfg.input_cost)
        base = float(np.sum(inputs * inputs * r[None, :]) + dt)
        shaping, _, _ = self._shaping_terms(z)
        return base + shaping

    def objective_grad(self, z):
        states, inputs, dt = self.unpack(z)
        r = np.asarray(self.cfg.input_cost)
        grad = np.zeros(self.n_vars)
        grad[self.n_states : self.n_states + self.n_inputs] = (2.0 * inputs * r[None, :]).ravel()
        grad[-1] = 1.0
        _, info, pts = self._shaping_terms(z)
        if info is not None:
            d, idx, active = info
            cfg = self.cfg
            with np.errstate(invalid="ignore", divide="ignore"):
                dirs = (pts - self._tree.data[idx]) / d[:, None]
            dirs[~np.isfinite(dirs)] = 0.0
            coef = -2.0 * cfg.shaping_weight * (cfg.shaping_radius - d)
            for k in np.nonzero(active)[0]:
                grad[k * STATE_DIM : k * STATE_DIM + 2] += coef[k] * dirs[k]
        return grad

    def bounds(self, x_target):
        lo = np.full(self.n_vars, -np.inf)
        hi = np.full(self.n_vars, np.inf)
        n = self.n_knots - 1
        for k in range(n):
            base = k * STATE_DIM
            lo[base + 2], hi[base + 2] = V_MIN, self.cfg.v_max
            lo[base + 4], hi[base + 4] = -DELTA_MAX, DELTA_MAX
        # terminal box intersected with the state bounds
        box = np.asarray(self.cfg.terminal_box)
        last = (n - 1) * STATE_DIM
        lo[last : last + STATE_DIM] = np.maximum(lo[last : last + STATE_DIM], x_target - box)
        hi[last : last + STATE_DIM] = np.minimum(hi[last : last + STATE_DIM], x_target + box)
        for k in range(n):
            base = self.n_states + k * INPUT_DIM
            lo[base], hi[base] = -ACCEL_MAX, ACCEL_MAX
            lo[base + 1], hi[base + 1] = -STEER_RATE_MAX, STEER_RATE_MAX
        lo[-1], hi[-1] = self.cfg.dt_min, self.cfg.dt_max
        return lo, hi


def _warm_start(x0, x_target, cfg):
    n = cfg.knot_count
    alphas = np.linspace(0.0, 1.0, n)[1:, None]
    states = (1 - alphas) * x0[None, :] + alphas * x_target[None, :]
    states[:, 2] = np.clip(states[:, 2], V_MIN, cfg.v_max)
    states[:, 4] = np.clip(states[:, 4], -DELTA_MAX, DELTA_MAX)
    inputs = np.zeros((n - 1, INPUT_DIM))
    return np.concatenate([states.ravel(), inputs.ravel(), [cfg.dt_max]])


def _residuals(prob, z, x_target):
    states, inputs, dt = prob.unpack(z)
    resim = states[0]
    max_defect = 0.0
    for k in range(len(inputs)):
        resim = _rk4_arr(resim, inputs[k], dt, prob.params)
        max_defect = max(max_defect, float(np.max(np.abs(states[k + 1] - resim))))
        resim = states[k + 1]
    clear = prob.clearance_fun(z)
    terminal = np.abs(states[-1] - x_target) - np.asarray(prob.cfg.terminal_box)
    return {
        "max_defect": max_defect,
        "min_clearance_margin": float(np.min(clear)),
        "terminal_violation": float(np.max(terminal)),
    }


def solve_transcription(
    x_start: RobotState,
    x_target,
    pmap,
    cfg: TranscriptionConfig,
    params: VehicleParams | None = None,
    log: list | None = None,
) -> Trajectory:
    """Dynamically feasible trajectory from x_start toward x_target.

    x_target is a 5-vector (position, speed, heading, turn angle); heading
    must be unwrapped near x_start.theta by the caller. Deterministic: the
    warm start is always the straight-line interpolation and the SQP engine
    has no randomness. Raises InfeasibleError with best residuals when no
    iterate satisfies defect/clearance/terminal tolerances.

    ``log`` (optional) collects the objective of each accepted outer
    iterate; the sequence is non-increasing.
    """
    params = params or VehicleParams()
    x0 = x_start.to_array()
    x_target = np.asarray(x_target, dtype=float)
    prob = _TranscriptionProblem(x0, pmap, cfg, params)

    # knot 0 is fixed; if it already violates the clearance constraint the
    # feasible set is empty
    if prob._tree is not None:
        d0, _ = prob._tree.query(x0[0:2])
        if d0 < cfg.obstacle_radius:
            raise InfeasibleError(
                "start state violates the obstacle radius",
                {"start_clearance": float(d0)},
            )

    lo, hi = prob.bounds(x_target)
    if np.any(lo > hi + 1e-12):
        raise InfeasibleError("terminal box incompatible with state bounds")
    z = np.clip(_warm_start(x0, x_target, cfg), lo, hi)
    constraints = [
        {"type": "eq", "fun": prob.defect_fun, "jac": prob.defect_jac},
        {"type": "ineq", "fun": prob.clearance_fun, "jac": prob.clearance_jac},
    ]
    bounds = list(zip(lo, hi))

    best = None  # (J, z)
    import warnings

    for _ in range(cfg.outer_rounds):
        with warnings.catch_warnings():
            # scipy warns when SLSQP steps outside the box before clipping
            warnings.simplefilter("ignore", RuntimeWarning)
            res = optimize.minimize(
                prob.objective,
                z,
                jac=prob.objective_grad,
                bounds=bounds,
                constraints=constraints,
                method="SLSQP",
                options={"maxiter": cfg.max_iterations, "ftol": 1e-10},
            )
        z = np.clip(res.x, lo, hi)
        r = _residuals(prob, z, x_target)
        feasible = (
            r["max_defect"] <= cfg.defect_tol
            and r["min_clearance_margin"] >= -1e-9
            and r["terminal_violation"] <= 1e-9
        )
        if feasible:
            J = prob.objective(z)
            if best is None or J <= best[0] + 1e-12:
                best = (J, z.copy())
                if log is not None:
                    log.append(J)
            if res.status == 0:
                break
        if res.status == 0 and not feasible:
            break  # converged to an infeasible point; restarting won't help

    if best is None:
        raise InfeasibleError(
            "no feasible trajectory within iteration budget", _residuals(prob, z, x_target)
        )
    states, inputs, dt = prob.unpack(best[1])
    return Trajectory(states=states, inputs=inputs, dt=dt)


def check_collision(traj: Trajectory, pmap, radius: float, samples_per_interval: int = 20) -> bool:
    """True iff any interpolated trajectory point comes within ``radius`` of
    an occupied cell center."""
    pos = traj.positions()
    alphas = np.linspace(0.0, 1.0, samples_per_interval + 1)
    pts = (1 - alphas)[None, :, None] * pos[:-1, None, :] + alphas[None, :, None] * pos[
        1:, None, :
    ]
    d = clearance_batch(pmap, pts.reshape(-1, 2))
    return bool(np.any(d < radius))

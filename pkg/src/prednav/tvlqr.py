"""Time-varying LQR tracking: linearize the dynamics along a trajectory, run
the backward Riccati recursion, and turn state error into clamped commands.

Gains use the stabilizing convention u = u_nom - K (x - x_nom); heading and
turn-angle errors are wrapped to (-pi, pi] before the gain is applied.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .trajopt import (
    ACCEL_MAX,
    STEER_RATE_MAX,
    ControlInput,
    RobotState,
    Trajectory,
    VehicleParams,
    rk4_step_with_jacobians,
)


class SingularInnerMatrixError(np.linalg.LinAlgError):
    """R + B^T S B could not be inverted (cannot happen for R > 0; guarded)."""


@dataclass
class CostMatrices:
    Q: np.ndarray = field(default_factory=lambda: np.diag([10.0, 10.0, 10.0, 10.0, 10.0]))
    Qf: np.ndarray = field(default_factory=lambda: np.diag([1.0, 1.0, 5.0, 1.0, 1.0]))
    R: np.ndarray = field(default_factory=lambda: np.diag([1.0, 1.0]))


@dataclass
class GainSchedule:
    """Per-interval feedback gains along a nominal trajectory.

    ``ref_times``/``ref_states`` densely sample the nominal flow inside each
    knot interval (RK4 substeps restarted at every knot), so the 50 Hz loop
    tracks a reference that advances between knots while the gain itself is
    held per interval.
    """

    gains: np.ndarray  # (N-1, m, n)
    nominal: Trajectory
    cost_to_go: np.ndarray  # (N, n, n), S_k including S_0
    ref_times: np.ndarray | None = None
    ref_states: np.ndarray | None = None

    @property
    def knot_times(self):
        return self.nominal.knot_times()

    @property
    def duration(self):
        return self.nominal.duration

    def save_csv(self, path):
        with open(path, "w") as f:
            m, n = self.gains.shape[1:]
            cols = ",".join(f"k{i}{j}" for i in range(m) for j in range(n))
            f.write(f"t,{cols}\n")
            for k, K in enumerate(self.gains):
                f.write(f"{k * self.nominal.dt!r}," + ",".join(repr(v) for v in K.ravel()) + "\n")


def linearize(traj: Trajectory, params: VehicleParams | None = None):
    """Discrete Jacobians of the RK4 step at every knot interval.

    Returns (A, B) with shapes (N-1, 5, 5) and (N-1, 5, 2).
    """
    params = params or VehicleParams()
    _, A, B, _ = rk4_step_with_jacobians(traj.states[:-1], traj.inputs, traj.dt, params)
    return A, B


def riccati_backward(A, B, cost: CostMatrices | None = None) -> tuple:
    """Backward Riccati recursion.

    S_N = Q_f; S_k = Q + A^T S' A - A^T S' B (R + B^T S' B)^-1 B^T S' A with
    S' = S_{k+1}; K_k = (R + B^T S' B)^-1 B^T S' A. Every S_k is symmetrized.
    Returns (gains (N-1, m, n), cost_to_go (N, n, n)).
    """
    cost = cost or CostMatrices()
    A = np.asarray(A, dtype=float)
    B = np.asarray(B, dtype=float)
    n_int = len(A)
    n, m = cost.Q.shape[0], cost.R.shape[0]
    S = cost.Qf.copy()
    gains = np.zeros((n_int, m, n))
    ctg = np.zeros((n_int + 1, n, n))
    ctg[n_int] = S
    for k in range(n_int - 1, -1, -1):
        Ak, Bk = A[k], B[k]
        SB = S @ Bk
        M = cost.R + Bk.T @ SB
        try:
            K = np.linalg.solve(M, SB.T @ Ak)
        except np.linalg.LinAlgError as e:
            raise SingularInnerMatrixError(str(e)) from e
        S = cost.Q + Ak.T @ S @ Ak - (Ak.T @ SB) @ K
        S = 0.5 * (S + S.T)
        gains[k] = K
        ctg[k] = S
    return gains, ctg


def _dense_reference(traj: Trajectory, params: VehicleParams, step=0.02):
    """Sample the nominal flow at ~``step`` resolution, restarting the
    integration at each knot so knot states are reproduced exactly."""
    from .trajopt import _rk4_arr

    times = [0.0]
    states = [traj.states[0]]
    n_sub = max(1, int(np.ceil(traj.dt / step)))
    h = traj.dt / n_sub
    for k in range(traj.knot_count - 1):
        x = traj.states[k]
        u = traj.inputs[k]
        for j in range(1, n_sub):
            x = _rk4_arr(x, u, h, params)
            times.append(k * traj.dt + j * h)
            states.append(x)
        times.append((k + 1) * traj.dt)
        states.append(traj.states[k + 1])
    return np.array(times), np.array(states)


def gain_schedule(traj: Trajectory, params: VehicleParams | None = None, cost: CostMatrices | None = None) -> GainSchedule:
    params = params or VehicleParams()
    A, B = linearize(traj, params)
    gains, ctg = riccati_backward(A, B, cost)
    ref_t, ref_x = _dense_reference(traj, params)
    return GainSchedule(gains=gains, nominal=traj, cost_to_go=ctg, ref_times=ref_t, ref_states=ref_x)


def _wrap_angle(a):
    """Wrap to (-pi, pi]."""
    w = -((-a + np.pi) % (2.0 * np.pi) - np.pi)
    return w


def apply_control(gs: GainSchedule, x: RobotState, t: float) -> ControlInput:
    """Feedback command at time t since the schedule start.

    The gain and nominal input are held per knot interval; the reference
    state advances along the dense nominal flow (when available) so the
    feedback does not fight path progress between knots. t is clamped to
    the schedule span, heading and turn-angle errors wrap to (-pi, pi], and
    the result is clamped to the input bounds.
    """
    traj = gs.nominal
    n_int = len(gs.gains)
    if n_int == 0:
        raise ValueError("schedule has no intervals")
    k = int(np.clip(np.floor(t / traj.dt), 0, n_int - 1))
    if gs.ref_times is not None:
        tc = float(np.clip(t, 0.0, gs.ref_times[-1]))
        j = int(np.clip(np.searchsorted(gs.ref_times, tc, side="right") - 1, 0, len(gs.ref_times) - 2))
        a = (tc - gs.ref_times[j]) / (gs.ref_times[j + 1] - gs.ref_times[j])
        x_ref = (1 - a) * gs.ref_states[j] + a * gs.ref_states[j + 1]
    else:
        x_ref = traj.states[k]
    err = x.to_array() - x_ref
    err[3] = _wrap_angle(err[3])
    err[4] = _wrap_angle(err[4])
    u = traj.inputs[k] - gs.gains[k] @ err
    return ControlInput(
        float(np.clip(u[0], -ACCEL_MAX, ACCEL_MAX)),
        float(np.clip(u[1], -STEER_RATE_MAX, STEER_RATE_MAX)),
    )

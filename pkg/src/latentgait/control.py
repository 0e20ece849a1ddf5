"""Task-space control: swing trajectories, reference assembly, inverse dynamics.

Turns a planner/policy action (swing-foot landing target + base velocity
offset) into smooth task-space references and the joint torques that track
them, and provides the stance-frame state transform that feeds the encoder.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import sim
from .errors import ControlError, RangeError, StateError
from .sim import LEFT, NQ, NU, Kinematics, RobotModel, RobotState

ACTION_SWING_BOUND = 0.5  # m, |swing landing x relative to base|
ACTION_VEL_BOUND = 0.5  # m/s, |base velocity offset|


@dataclass(frozen=True)
class PolicyAction:
    """Planner output: swing-foot landing x relative to the base, and an
    offset added to the commanded instantaneous base velocity."""

    swing_target_x: float  # m, relative to base
    velocity_offset: float  # m/s

    def __post_init__(self) -> None:
        if abs(self.swing_target_x) > ACTION_SWING_BOUND + 1e-12:
            raise RangeError(f"|swing_target_x|={abs(self.swing_target_x):.3f} > {ACTION_SWING_BOUND}")
        if abs(self.velocity_offset) > ACTION_VEL_BOUND + 1e-12:
            raise RangeError(f"|velocity_offset|={abs(self.velocity_offset):.3f} > {ACTION_VEL_BOUND}")

    def as_array(self) -> np.ndarray:
        return np.array([self.swing_target_x, self.velocity_offset])

    @staticmethod
    def clipped(swing_target_x: float, velocity_offset: float) -> "PolicyAction":
        return PolicyAction(
            float(np.clip(swing_target_x, -ACTION_SWING_BOUND, ACTION_SWING_BOUND)),
            float(np.clip(velocity_offset, -ACTION_VEL_BOUND, ACTION_VEL_BOUND)),
        )

    @staticmethod
    def scale() -> np.ndarray:
        return np.array([ACTION_SWING_BOUND, ACTION_VEL_BOUND])


@dataclass
class TaskReferences:
    """References for the five controlled tasks."""

    swing_x: tuple[float, float, float]  # pos, vel, acc
    swing_z: tuple[float, float, float]
    base_height: float
    base_height_vel: float
    base_velocity_x: float
    torso_pitch: float = 0.0


@dataclass
class GaitSchedule:
    """Per-step bookkeeping: fixed step timing and the swing-foot start."""

    step_duration: float = 0.4  # s
    apex_height: float = 0.08  # m
    timeout_factor: float = 1.25  # forced support switch at factor * duration
    swing_start_x: float | None = None  # world x of swing ankle, set at touchdown

    def __post_init__(self) -> None:
        if self.step_duration <= 0.0:
            raise RangeError("step_duration must be > 0")
        if self.apex_height < 0.0:
            raise RangeError("apex_height must be >= 0")

    def reset_at_touchdown(self, swing_ankle_x: float) -> None:
        self.swing_start_x = float(swing_ankle_x)

    def phase_fraction(self, phase: float) -> float:
        return min(phase / self.step_duration, 1.0)


@dataclass
class ControlGains:
    """TSC gains and task weights (defaults sized for the 20 kg model)."""

    kp: float = 400.0
    kd: float = 40.0
    kv: float = 10.0  # base-velocity task damping
    weight_swing: float = 10.0
    weight_height: float = 5.0
    weight_velocity: float = 5.0
    weight_pitch: float = 2.0
    weight_foot_pitch: float = 2.0  # swing foot kept level for flush landing
    torque_reg: float = 1e-10
    ground_search_speed: float = 0.05  # m/s descent once phase > 1


def min_jerk(s: float, start: float, end: float) -> tuple[float, float, float]:
    """Quintic minimum-jerk blend on s in [0, 1], unit-time derivatives.

    pos(0)=start, pos(1)=end, velocity and acceleration vanish at both ends.
    """
    if not (0.0 <= s <= 1.0):
        raise RangeError(f"phase {s} outside [0, 1]")
    d = end - start
    s2 = s * s
    s3 = s2 * s
    blend = 10.0 * s3 - 15.0 * s3 * s + 6.0 * s3 * s2
    pos = start + d * blend
    vel = d * (30.0 * s2 - 60.0 * s3 + 30.0 * s2 * s2)
    acc = d * (60.0 * s - 180.0 * s2 + 120.0 * s3)
    return pos, vel, acc


def swing_trajectory(schedule: GaitSchedule, phase_fraction: float,
                     target_x_world: float) -> tuple[tuple[float, float, float],
                                                     tuple[float, float, float]]:
    """Swing-foot (x, z) references at a phase fraction, time-scaled.

    x blends from the stored touchdown start to the (re-evaluated) target;
    z rises to the apex over the first half and returns to the ground over
    the second. Derivatives are per second.
    """
    if not (0.0 <= phase_fraction <= 1.0):
        raise RangeError(f"phase_fraction {phase_fraction} outside [0, 1]")
    if schedule.swing_start_x is None:
        raise StateError("swing start not set; reset_at_touchdown was never called")
    inv_t = 1.0 / schedule.step_duration
    px, vx, ax = min_jerk(phase_fraction, schedule.swing_start_x, target_x_world)
    x_ref = (px, vx * inv_t, ax * inv_t * inv_t)
    if phase_fraction <= 0.5:
        pz, vz, az = min_jerk(phase_fraction * 2.0, 0.0, schedule.apex_height)
    else:
        pz, vz, az = min_jerk((phase_fraction - 0.5) * 2.0, schedule.apex_height, 0.0)
    half_inv = 2.0 * inv_t
    z_ref = (pz, vz * half_inv, az * half_inv * half_inv)
    return x_ref, z_ref


def assemble_task_refs(action: PolicyAction, v_cmd: float, schedule: GaitSchedule,
                       state: RobotState, model: RobotModel,
                       base_height: float | None = None,
                       base_height_vel: float = 0.0,
                       overtime: float = 0.0,
                       gains: ControlGains | None = None) -> TaskReferences:
    """Build the full task reference set for the current control tick.

    The swing landing target is the action's offset applied to the base x at
    evaluation time. `overtime` (seconds past the nominal step duration)
    switches the vertical reference to a slow downward ground search so a
    late touchdown still happens.
    """
    s = schedule.phase_fraction(state.phase)
    target_x = state.q[sim.Q_X] + action.swing_target_x
    x_ref, z_ref = swing_trajectory(schedule, s, target_x)
    if overtime > 0.0:
        speed = (gains or ControlGains()).ground_search_speed
        z_ref = (-speed * overtime, -speed, 0.0)
    return TaskReferences(
        swing_x=x_ref,
        swing_z=z_ref,
        base_height=model.nominal_base_height if base_height is None else base_height,
        base_height_vel=base_height_vel,
        base_velocity_x=v_cmd + action.velocity_offset,
        torso_pitch=0.0,
    )


def task_space_controller(model: RobotModel, state: RobotState, refs: TaskReferences,
                          gains: ControlGains | None = None,
                          kin: Kinematics | None = None) -> np.ndarray:
    """Joint torques tracking the task references.

    Solves the equality-constrained weighted least squares over
    (qdd, tau, contact force): dynamics and the stance weld are hard
    constraints, task accelerations enter the objective, and the result is
    clipped to the model torque limits.
    """
    if gains is None:
        gains = ControlGains()
    if kin is None:
        kin = sim._kin(model, state.q, state.dq)
    sw_pt, sw_foot = sim._stance_indices(state.swing_leg)
    dq = state.dq

    # task rows: (J row, Jdot_dq, commanded acceleration, weight); the sixth
    # task (swing foot pitch -> 0) closes the otherwise-free ankle DoF so the
    # flat foot lands flush
    rows = np.zeros((6, NQ))
    jdot_dq = np.zeros(6)
    ydd = np.zeros(6)
    weights = np.array([gains.weight_swing, gains.weight_swing, gains.weight_height,
                        gains.weight_velocity, gains.weight_pitch,
                        gains.weight_foot_pitch])

    rows[0] = kin.jac[sw_pt, 0]
    jdot_dq[0] = kin.jacdot[sw_pt, 0] @ dq
    px, vx, ax = refs.swing_x
    ydd[0] = ax + gains.kd * (vx - kin.vel[sw_pt, 0]) + gains.kp * (px - kin.pos[sw_pt, 0])

    rows[1] = kin.jac[sw_pt, 1]
    jdot_dq[1] = kin.jacdot[sw_pt, 1] @ dq
    pz, vz, az = refs.swing_z
    ydd[1] = az + gains.kd * (vz - kin.vel[sw_pt, 1]) + gains.kp * (pz - kin.pos[sw_pt, 1])

    rows[2, sim.Q_Z] = 1.0
    ydd[2] = gains.kp * (refs.base_height - state.q[sim.Q_Z]) \
        + gains.kd * (refs.base_height_vel - dq[sim.Q_Z])

    rows[3, sim.Q_X] = 1.0
    ydd[3] = gains.kv * (refs.base_velocity_x - dq[sim.Q_X])

    rows[4, sim.Q_PITCH] = 1.0
    ydd[4] = gains.kp * (refs.torso_pitch - state.q[sim.Q_PITCH]) \
        + gains.kd * (0.0 - dq[sim.Q_PITCH])

    rows[5] = model.ang[sw_foot]
    ydd[5] = gains.kp * (0.0 - kin.phi[sw_foot]) + gains.kd * (0.0 - kin.phidot[sw_foot])

    jc, jcdot = sim._contact_jacobians(model, kin, state.stance_leg)

    # decision vector x = (qdd[9], tau[6], lam[3])
    nx = NQ + NU + 3
    hess = np.zeros((nx, nx))
    grad = np.zeros(nx)
    b_task = ydd - jdot_dq
    wrows = weights[:, None] * rows
    hess[:NQ, :NQ] = rows.T @ wrows
    grad[:NQ] = -(wrows.T @ b_task)
    hess[NQ:NQ + NU, NQ:NQ + NU] = gains.torque_reg * np.eye(NU)

    n_eq = NQ + 3
    a_eq = np.zeros((n_eq, nx))
    a_eq[:NQ, :NQ] = kin.mass_matrix
    a_eq[:NQ, NQ + NU:] = -jc.T
    sel = np.zeros((NQ, NU))
    sel[3:9] = np.eye(NU)
    a_eq[:NQ, NQ:NQ + NU] = -sel
    a_eq[NQ:, :NQ] = jc
    b_eq = np.concatenate((-kin.bias, -(jcdot @ dq)))

    kkt = np.zeros((nx + n_eq, nx + n_eq))
    kkt[:nx, :nx] = hess
    kkt[:nx, nx:] = a_eq.T
    kkt[nx:, :nx] = a_eq
    rhs = np.concatenate((-grad, b_eq))
    try:
        sol = np.linalg.solve(kkt, rhs)
    except np.linalg.LinAlgError as exc:
        raise ControlError(f"singular task-space KKT system at t={state.time:.4f}") from exc
    if not np.isfinite(sol).all():
        raise ControlError(f"non-finite task-space solution at t={state.time:.4f}")
    tau = sol[NQ:NQ + NU]
    limits = model.torque_limits()
    return np.clip(tau, -limits, limits)


# stance-frame feature ordering: stance leg first, then swing leg
STANCE_FRAME_FEATURES = [
    "base_x_rel", "base_z_rel", "torso_pitch",
    "hip_st", "knee_st", "ankle_st", "hip_sw", "knee_sw", "ankle_sw",
    "d_base_x", "d_base_z", "d_torso_pitch",
    "d_hip_st", "d_knee_st", "d_ankle_st", "d_hip_sw", "d_knee_sw", "d_ankle_sw",
]


def stance_frame_transform(model: RobotModel, state: RobotState,
                           kin: Kinematics | None = None) -> np.ndarray:
    """Full-order state with the base expressed relative to the stance foot.

    The base position is re-expressed relative to the stance-foot contact
    point; every other coordinate and all velocities keep their values. Joint
    columns are listed stance leg first, so the features are symmetric with
    respect to which leg supports.
    """
    if kin is None:
        kin = sim._kin(model, state.q, state.dq)
    pt, _ = sim._stance_indices(state.stance_leg)
    # contact offset from joint angles only, so the features are exactly
    # invariant to world-frame translation
    e = np.empty((7, 2))
    e[:, 0] = np.sin(kin.phi)
    e[:, 1] = -np.cos(kin.phi)
    offset = model.coef[pt] @ e  # contact point minus base
    if state.stance_leg == LEFT:
        st, sw = (sim.Q_HIP_L, sim.Q_KNEE_L, sim.Q_ANKLE_L), (sim.Q_HIP_R, sim.Q_KNEE_R, sim.Q_ANKLE_R)
    else:
        st, sw = (sim.Q_HIP_R, sim.Q_KNEE_R, sim.Q_ANKLE_R), (sim.Q_HIP_L, sim.Q_KNEE_L, sim.Q_ANKLE_L)
    order = [sim.Q_PITCH, *st, *sw]
    out = np.empty(18)
    out[0] = -offset[0]
    out[1] = -offset[1]
    out[2:9] = state.q[order]
    out[9] = state.dq[sim.Q_X]
    out[10] = state.dq[sim.Q_Z]
    out[11:18] = state.dq[order]
    return out

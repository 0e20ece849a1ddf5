"""Hybrid-dynamics simulator for a planar 7-link biped.

Links: torso, two thighs, two shanks, two flat feet. Generalized coordinates
q = (base_x, base_z, torso_pitch, hipL, kneeL, ankleL, hipR, kneeR, ankleR);
the "base" is a torso reference point sitting `torso_com` above the hip line.
During stance the stance foot is welded to the ground (position x, z and
pitch); swing-foot touchdown triggers a rigid plastic impact that transfers
support instantaneously.

All angle conventions: a link direction unit vector is e(phi) = (sin phi,
-cos phi), i.e. straight down at phi = 0, rotating counter-clockwise in the
x-z plane (x right, z up). Absolute link angles are linear in q, which keeps
every Jacobian closed-form.
"""

from __future__ import annotations

import io
from dataclasses import dataclass, replace

import numpy as np

from .errors import DynamicsError, NumericError, RangeError, ShapeError, StateError

NQ = 9
NU = 6
LEFT, RIGHT = "left", "right"

# q layout
Q_X, Q_Z, Q_PITCH = 0, 1, 2
Q_HIP_L, Q_KNEE_L, Q_ANKLE_L = 3, 4, 5
Q_HIP_R, Q_KNEE_R, Q_ANKLE_R = 6, 7, 8

# link order for the internal kinematics pass
TORSO, THIGH_L, SHANK_L, FOOT_L, THIGH_R, SHANK_R, FOOT_R = range(7)
# extra tracked points appended after the 7 link CoMs
PT_ANKLE_L, PT_ANKLE_R = 7, 8


@dataclass
class Disturbance:
    """Horizontal force applied at the base over a time window."""

    force: float = 0.0  # N, +x
    start: float = 0.0  # s
    duration: float = 0.0  # s

    def __post_init__(self) -> None:
        if self.duration < 0.0:
            raise RangeError(f"disturbance duration {self.duration} < 0")

    def active_force(self, t: float) -> float:
        if self.start <= t < self.start + self.duration:
            return self.force
        return 0.0


@dataclass
class RobotModel:
    """Planar biped parameters. Lengths in m, masses in kg, torques in N*m."""

    torso_mass: float = 10.0
    torso_length: float = 0.5
    torso_com: float = 0.25  # hip -> base reference point / torso CoM
    thigh_mass: float = 2.5
    thigh_length: float = 0.45
    thigh_com: float = 0.225
    shank_mass: float = 2.0
    shank_length: float = 0.45
    shank_com: float = 0.225
    foot_mass: float = 0.5
    foot_length: float = 0.16
    gravity: float = 9.81
    hip_torque_limit: float = 150.0
    knee_torque_limit: float = 150.0
    ankle_torque_limit: float = 60.0
    nominal_base_height: float = 1.0

    def __post_init__(self) -> None:
        for name in ("torso_mass", "torso_length", "thigh_mass", "thigh_length",
                     "shank_mass", "shank_length", "foot_mass", "foot_length"):
            if getattr(self, name) <= 0.0:
                raise RangeError(f"{name} must be > 0")
        self._build_tables()

    # -- precomputed kinematic coefficient tables ---------------------------

    def _build_tables(self) -> None:
        # masses / rod inertias about each link CoM
        self.link_masses = np.array([
            self.torso_mass,
            self.thigh_mass, self.shank_mass, self.foot_mass,
            self.thigh_mass, self.shank_mass, self.foot_mass,
        ])
        self.link_inertias = np.array([
            self.torso_mass * self.torso_length**2 / 12.0,
            self.thigh_mass * self.thigh_length**2 / 12.0,
            self.shank_mass * self.shank_length**2 / 12.0,
            self.foot_mass * self.foot_length**2 / 12.0,
            self.thigh_mass * self.thigh_length**2 / 12.0,
            self.shank_mass * self.shank_length**2 / 12.0,
            self.foot_mass * self.foot_length**2 / 12.0,
        ])
        self.total_mass = float(self.link_masses.sum())

        # absolute link angles phi = ANG @ q   (7 x 9)
        ang = np.zeros((7, NQ))
        ang[TORSO, Q_PITCH] = 1.0
        for thigh, shank, foot, hip_i, knee_i, ankle_i in (
            (THIGH_L, SHANK_L, FOOT_L, Q_HIP_L, Q_KNEE_L, Q_ANKLE_L),
            (THIGH_R, SHANK_R, FOOT_R, Q_HIP_R, Q_KNEE_R, Q_ANKLE_R),
        ):
            ang[thigh, [Q_PITCH, hip_i]] = 1.0
            ang[shank, [Q_PITCH, hip_i, knee_i]] = 1.0
            ang[foot, [Q_PITCH, hip_i, knee_i, ankle_i]] = 1.0
        self.ang = ang

        # point p = base + COEF @ e(phi); rows: 7 link CoMs then both ankles.
        # The hip sits torso_com *below* the base along the torso, i.e. at
        # base + torso_com * e(phi_torso).
        c = np.zeros((9, 7))
        ct, lth, lsh = self.torso_com, self.thigh_length, self.shank_length
        cth, csh = self.thigh_com, self.shank_com
        # torso CoM is the base point itself: zero row
        c[THIGH_L, TORSO], c[THIGH_L, THIGH_L] = ct, cth
        c[SHANK_L, TORSO], c[SHANK_L, THIGH_L], c[SHANK_L, SHANK_L] = ct, lth, csh
        c[FOOT_L, TORSO], c[FOOT_L, THIGH_L], c[FOOT_L, SHANK_L] = ct, lth, lsh
        c[THIGH_R, TORSO], c[THIGH_R, THIGH_R] = ct, cth
        c[SHANK_R, TORSO], c[SHANK_R, THIGH_R], c[SHANK_R, SHANK_R] = ct, lth, csh
        c[FOOT_R, TORSO], c[FOOT_R, THIGH_R], c[FOOT_R, SHANK_R] = ct, lth, lsh
        c[PT_ANKLE_L] = c[FOOT_L]
        c[PT_ANKLE_R] = c[FOOT_R]
        self.coef = c

        # constant pieces reused every kinematics pass
        self._p_base = np.zeros((2, NQ))
        self._p_base[0, Q_X] = 1.0
        self._p_base[1, Q_Z] = 1.0
        self._rot_inertia = self.ang.T @ (self.link_inertias[:, None] * self.ang)
        self._sqrt_m14 = np.repeat(np.sqrt(self.link_masses), 2)
        self._m14 = np.repeat(self.link_masses, 2)

    def torque_limits(self) -> np.ndarray:
        return np.array([
            self.hip_torque_limit, self.knee_torque_limit, self.ankle_torque_limit,
            self.hip_torque_limit, self.knee_torque_limit, self.ankle_torque_limit,
        ])

    def leg_reach(self) -> float:
        return self.thigh_length + self.shank_length


@dataclass
class RobotState:
    q: np.ndarray  # [9]
    dq: np.ndarray  # [9]
    stance_leg: str = LEFT
    time: float = 0.0
    phase: float = 0.0  # s since last touchdown
    anchor_x: float | None = None  # stance-foot weld x; None = derive from FK

    def __post_init__(self) -> None:
        self.q = np.asarray(self.q, dtype=float)
        self.dq = np.asarray(self.dq, dtype=float)
        if self.q.shape != (NQ,) or self.dq.shape != (NQ,):
            raise ShapeError(f"state needs q and dq of shape ({NQ},)")
        if self.stance_leg not in (LEFT, RIGHT):
            raise StateError(f"stance_leg must be 'left' or 'right', got {self.stance_leg!r}")
        if not (np.isfinite(self.q).all() and np.isfinite(self.dq).all()):
            raise NumericError("non-finite state entries")

    @property
    def swing_leg(self) -> str:
        return RIGHT if self.stance_leg == LEFT else LEFT

    def copy(self) -> "RobotState":
        return RobotState(self.q.copy(), self.dq.copy(), self.stance_leg,
                          self.time, self.phase, self.anchor_x)


@dataclass
class Kinematics:
    """One full kinematics pass: points, velocities, Jacobians, M and h."""

    phi: np.ndarray  # [7]
    phidot: np.ndarray  # [7]
    pos: np.ndarray  # [9, 2]  7 link CoMs + ankleL + ankleR
    vel: np.ndarray  # [9, 2]
    jac: np.ndarray  # [9, 2, 9]
    jacdot: np.ndarray  # [9, 2, 9]
    mass_matrix: np.ndarray  # [9, 9]
    bias: np.ndarray  # [9]  Coriolis + gravity, M qdd + bias = Q


def _kin(model: RobotModel, q: np.ndarray, dq: np.ndarray,
         dynamics_only: bool = False) -> Kinematics:
    ang = model.ang
    phi = ang @ q
    phidot = ang @ dq
    s = np.sin(phi)
    c = np.cos(phi)

    if dynamics_only:
        # integrator stages never look at point positions/velocities
        pos = vel = None  # type: ignore[assignment]
    else:
        # link direction e(phi) = (s, -c) and its time derivative, packed so
        # one matmul yields point offsets and velocities together
        pk = np.empty((7, 4))
        pk[:, 0] = s
        pk[:, 1] = -c
        np.multiply(c, phidot, out=pk[:, 2])
        np.multiply(s, phidot, out=pk[:, 3])
        pv = model.coef @ pk  # [9,4]
        pos = pv[:, :2] + q[:2]
        vel = pv[:, 2:] + dq[:2]

    # jac[i,a,k] = P[a,k] + sum_j coef[i,j] ep[j,a] ang[j,k]; d/dt uses -e
    big = np.empty((7, 4 * NQ))
    np.multiply(c[:, None], ang, out=big[:, 0:NQ])
    np.multiply(s[:, None], ang, out=big[:, NQ:2 * NQ])
    np.multiply((-s * phidot)[:, None], ang, out=big[:, 2 * NQ:3 * NQ])
    np.multiply((c * phidot)[:, None], ang, out=big[:, 3 * NQ:])
    jfull = model.coef @ big  # [9, 36]
    jac = jfull[:, :2 * NQ].reshape(9, 2, NQ)
    jac[:, 0, Q_X] += 1.0
    jac[:, 1, Q_Z] += 1.0
    jacdot = jfull[:, 2 * NQ:].reshape(9, 2, NQ)

    jl = jac[:7].reshape(14, NQ)
    scaled = model._sqrt_m14[:, None] * jl
    mass = scaled.T @ scaled + model._rot_inertia

    acc_bias = jacdot[:7] @ dq  # [7,2] = Jdot_i qdot
    acc_bias[:, 1] += model.gravity
    bias = jl.T @ (model._m14 * acc_bias.reshape(14))

    return Kinematics(phi, phidot, pos, vel, jac, jacdot, mass, bias)


def _stance_indices(stance_leg: str) -> tuple[int, int]:
    """(ankle point row, foot link row) of the stance leg."""
    if stance_leg == LEFT:
        return PT_ANKLE_L, FOOT_L
    return PT_ANKLE_R, FOOT_R


def _contact_jacobians(model: RobotModel, kin: Kinematics, stance_leg: str
                       ) -> tuple[np.ndarray, np.ndarray]:
    """Stance weld rows (ankle x, ankle z, foot pitch) and their rates."""
    pt, foot = _stance_indices(stance_leg)
    jc = np.empty((3, NQ))
    jc[:2] = kin.jac[pt]
    jc[2] = model.ang[foot]
    jcdot = np.zeros((3, NQ))
    jcdot[:2] = kin.jacdot[pt]
    return jc, jcdot


def _solve_constrained(mass: np.ndarray, bias: np.ndarray, gen_force: np.ndarray,
                       jc: np.ndarray, jcdot_dq: np.ndarray, what: str) -> tuple[np.ndarray, np.ndarray]:
    """Solve M qdd + bias = Q + Jc' lam subject to Jc qdd = -Jcdot dq."""
    nc = jc.shape[0]
    kkt = np.zeros((NQ + nc, NQ + nc))
    kkt[:NQ, :NQ] = mass
    kkt[:NQ, NQ:] = -jc.T
    kkt[NQ:, :NQ] = jc
    rhs = np.concatenate((gen_force - bias, -jcdot_dq))
    try:
        sol = np.linalg.solve(kkt, rhs)
    except np.linalg.LinAlgError as exc:
        raise DynamicsError(f"singular KKT system in {what}") from exc
    if not np.isfinite(sol).all():
        raise DynamicsError(f"non-finite KKT solution in {what}")
    # residual check stands in for an explicit conditioning test (see notes):
    # a badly conditioned system shows up as a solve residual.
    resid = kkt @ sol - rhs
    scale = max(1.0, float(np.abs(rhs).max()))
    if float(np.abs(resid).max()) > 1e-6 * scale:
        cond = np.linalg.cond(kkt)
        raise DynamicsError(f"ill-conditioned KKT system in {what} (cond~{cond:.3e})")
    return sol[:NQ], sol[NQ:]


def _accel(model: RobotModel, q: np.ndarray, dq: np.ndarray, stance_leg: str,
           torques: np.ndarray, disturbance_force: float, time_tag: float,
           kin: Kinematics | None = None) -> np.ndarray:
    if kin is None:
        kin = _kin(model, q, dq, dynamics_only=True)
    gen = np.zeros(NQ)
    gen[3:9] = torques
    gen[Q_X] += disturbance_force
    jc, jcdot = _contact_jacobians(model, kin, stance_leg)
    qdd, _ = _solve_constrained(kin.mass_matrix, kin.bias, gen, jc, jcdot @ dq,
                                f"continuous_dynamics at t={time_tag:.4f}")
    return qdd


def continuous_dynamics(model: RobotModel, state: RobotState, torques: np.ndarray,
                        disturbance_force: float = 0.0,
                        kin: Kinematics | None = None) -> tuple[np.ndarray, np.ndarray]:
    """Stance-phase accelerations under the stance-foot weld constraint.

    Returns (qdot, qddot). The caller is responsible for the weld constraint
    being (approximately) satisfied; the integrator re-projects after each
    step.
    """
    torques = np.asarray(torques, dtype=float)
    if torques.shape != (NU,):
        raise ShapeError(f"torques shape {torques.shape} != ({NU},)")
    qdd = _accel(model, state.q, state.dq, state.stance_leg, torques,
                 disturbance_force, state.time, kin)
    return state.dq.copy(), qdd


def _project_to_manifold(model: RobotModel, q: np.ndarray, dq: np.ndarray,
                         stance_leg: str, anchor_x: float
                         ) -> tuple[np.ndarray, np.ndarray, Kinematics | None]:
    """Pull (q, dq) back onto the stance weld manifold.

    Returns the kinematics at the final (q, dq) when still valid, else None
    (the velocity projection invalidates velocity-dependent terms).
    """
    target = np.array([anchor_x, 0.0, 0.0])
    pt, foot = _stance_indices(stance_leg)
    kin = _kin(model, q, dq)
    for _ in range(3):
        resid = np.array([kin.pos[pt, 0], kin.pos[pt, 1], kin.phi[foot]]) - target
        if np.abs(resid).max() < 1e-9:
            break
        jc, _ = _contact_jacobians(model, kin, stance_leg)
        q = q - jc.T @ np.linalg.solve(jc @ jc.T, resid)
        kin = _kin(model, q, dq)
    jc, _ = _contact_jacobians(model, kin, stance_leg)
    cdot = jc @ dq
    if float(np.abs(cdot).max()) > 1e-10:
        dq = dq - jc.T @ np.linalg.solve(jc @ jc.T, cdot)
        return q, dq, None
    return q, dq, kin


def _step_integrate_kin(model: RobotModel, state: RobotState, torques: np.ndarray,
                        dt: float, disturbance: Disturbance | None = None,
                        kin0: Kinematics | None = None
                        ) -> tuple[RobotState, Kinematics | None]:
    """RK4 step + projection; also returns final kinematics when reusable."""
    if not (0.0 < dt <= 0.005):
        raise RangeError(f"dt={dt} outside (0, 0.005]")
    torques = np.asarray(torques, dtype=float)
    q0, dq0, t0 = state.q, state.dq, state.time
    leg = state.stance_leg

    def force(t: float) -> float:
        return disturbance.active_force(t) if disturbance is not None else 0.0

    k1v = _accel(model, q0, dq0, leg, torques, force(t0), t0, kin0)
    tm = t0 + 0.5 * dt
    q2, dq2 = q0 + 0.5 * dt * dq0, dq0 + 0.5 * dt * k1v
    k2v = _accel(model, q2, dq2, leg, torques, force(tm), tm)
    q3, dq3 = q0 + 0.5 * dt * dq2, dq0 + 0.5 * dt * k2v
    k3v = _accel(model, q3, dq3, leg, torques, force(tm), tm)
    t1 = t0 + dt
    q4, dq4 = q0 + dt * dq3, dq0 + dt * k3v
    k4v = _accel(model, q4, dq4, leg, torques, force(t1), t1)
    q = q0 + dt / 6.0 * (dq0 + 2.0 * dq2 + 2.0 * dq3 + dq4)
    dq = dq0 + dt / 6.0 * (k1v + 2.0 * k2v + 2.0 * k3v + k4v)
    if not (np.isfinite(q).all() and np.isfinite(dq).all()):
        raise NumericError(f"non-finite integration result at t={t0:.4f}")

    anchor = state.anchor_x
    if anchor is None:
        base = kin0 if kin0 is not None else _kin(model, q0, dq0)
        anchor = float(base.pos[_stance_indices(leg)[0], 0])
    q, dq, kin = _project_to_manifold(model, q, dq, leg, anchor)
    out = RobotState(q, dq, leg, t1, state.phase + dt, anchor)
    return out, kin


def step_integrate(model: RobotModel, state: RobotState, torques: np.ndarray,
                   dt: float, disturbance: Disturbance | None = None) -> RobotState:
    """One classical RK4 step with held torques, then drift projection."""
    out, _ = _step_integrate_kin(model, state, torques, dt, disturbance)
    return out


def swing_foot_clearance(model: RobotModel, state: RobotState,
                         kin: Kinematics | None = None) -> float:
    """Height of the swing foot's lowest point (heel or toe) above the ground."""
    if kin is None:
        kin = _kin(model, state.q, state.dq)
    pt, foot = _stance_indices(state.swing_leg)
    ankle_z = kin.pos[pt, 1]
    pitch = kin.phi[foot]
    return float(ankle_z - 0.5 * model.foot_length * abs(np.sin(pitch)))


def _interp_state(a: RobotState, b: RobotState, alpha: float) -> RobotState:
    return replace(a,
                   q=(1.0 - alpha) * a.q + alpha * b.q,
                   dq=(1.0 - alpha) * a.dq + alpha * b.dq,
                   time=(1.0 - alpha) * a.time + alpha * b.time)


def detect_touchdown(state_before: RobotState, state_after: RobotState,
                     model: RobotModel) -> float | None:
    """Locate the first swing-foot ground crossing within an integration step.

    Interpolates linearly between the two states, scans for a sign change of
    the swing foot's lowest-point height, then bisects to 1e-8 m. Returns the
    event fraction alpha in [0, 1], or None when the foot never reaches the
    ground with downward motion.
    """
    def height(alpha: float) -> float:
        return swing_foot_clearance(model, _interp_state(state_before, state_after, alpha))

    n_scan = 8
    alphas = np.linspace(0.0, 1.0, n_scan + 1)
    hs = [height(a) for a in alphas]
    if hs[0] <= 0.0:
        # already at/under ground entering the step: event only if descending
        return 0.0 if hs[1] < hs[0] else None
    lo = hi = None
    for k in range(n_scan):
        if hs[k] > 0.0 >= hs[k + 1]:
            lo, hi, h_hi = alphas[k], alphas[k + 1], hs[k + 1]
            break
    if lo is None:
        return None
    if h_hi == 0.0 and hi == 1.0:
        return 1.0
    for _ in range(60):
        mid = 0.5 * (lo + hi)
        hm = height(mid)
        if abs(hm) < 1e-8:
            return float(mid)
        if hm > 0.0:
            lo = mid
        else:
            hi = mid
    return float(0.5 * (lo + hi))


def impact_map(model: RobotModel, state_pre: RobotState,
               require_contact: bool = True) -> RobotState:
    """Rigid plastic impact: weld the swing foot, swap support, reset phase.

    Positions are unchanged; post-impact velocities solve
    M (dq+ - dq-) = J_new' Lam with J_new dq+ = 0.
    """
    kin = _kin(model, state_pre.q, state_pre.dq)
    clearance = swing_foot_clearance(model, state_pre, kin)
    if require_contact and clearance > 1e-6:
        raise StateError(f"impact_map called with swing foot {clearance:.3e} m above ground")
    new_stance = state_pre.swing_leg
    jc, _ = _contact_jacobians(model, kin, new_stance)
    nc = 3
    kkt = np.zeros((NQ + nc, NQ + nc))
    kkt[:NQ, :NQ] = kin.mass_matrix
    kkt[:NQ, NQ:] = -jc.T
    kkt[NQ:, :NQ] = jc
    rhs = np.concatenate((kin.mass_matrix @ state_pre.dq, np.zeros(nc)))
    try:
        sol = np.linalg.solve(kkt, rhs)
    except np.linalg.LinAlgError as exc:
        raise DynamicsError("singular impact KKT system") from exc
    if not np.isfinite(sol).all():
        raise DynamicsError("non-finite impact solution")
    dq_post = sol[:NQ]
    anchor = float(kin.pos[_stance_indices(new_stance)[0], 0])
    return RobotState(state_pre.q.copy(), dq_post, new_stance,
                      state_pre.time, 0.0, anchor)


def forced_support_switch(model: RobotModel, state: RobotState) -> RobotState:
    """Support switch without the contact precondition (step timeout).

    Runs the impact solve at the current state and projects the new stance
    foot onto the ground. Counts as a tracking failure upstream.
    """
    post = impact_map(model, state, require_contact=False)
    kin = _kin(model, post.q, post.dq)
    anchor = float(kin.pos[_stance_indices(post.stance_leg)[0], 0])
    q, dq, _ = _project_to_manifold(model, post.q, post.dq, post.stance_leg, anchor)
    return RobotState(q, dq, post.stance_leg, post.time, 0.0, anchor)


def com_state(model: RobotModel, state: RobotState,
              kin: Kinematics | None = None) -> tuple[np.ndarray, np.ndarray, float]:
    """CoM position, CoM velocity, and angular momentum about the CoM.

    The scalar momentum is the out-of-plane component with counter-clockwise
    (x toward z) positive, matching the link angle convention.
    """
    if kin is None:
        kin = _kin(model, state.q, state.dq)
    m = model.link_masses
    com = (m[:, None] * kin.pos[:7]).sum(axis=0) / model.total_mass
    com_v = (m[:, None] * kin.vel[:7]).sum(axis=0) / model.total_mass
    rel_p = kin.pos[:7] - com
    rel_v = kin.vel[:7] - com_v
    spin = float((model.link_inertias * kin.phidot).sum())
    orbit = float((m * (rel_p[:, 0] * rel_v[:, 1] - rel_p[:, 1] * rel_v[:, 0])).sum())
    return com, com_v, spin + orbit


def mechanical_energy(model: RobotModel, state: RobotState,
                      kin: Kinematics | None = None) -> float:
    if kin is None:
        kin = _kin(model, state.q, state.dq)
    kinetic = kinetic_energy(model, state, kin)
    potential = float((model.link_masses * kin.pos[:7, 1]).sum() * model.gravity)
    return kinetic + potential


def kinetic_energy(model: RobotModel, state: RobotState,
                   kin: Kinematics | None = None) -> float:
    if kin is None:
        kin = _kin(model, state.q, state.dq)
    trans = 0.5 * float((model.link_masses * (kin.vel[:7] ** 2).sum(axis=1)).sum())
    rot = 0.5 * float((model.link_inertias * kin.phidot**2).sum())
    return trans + rot


@dataclass
class FootPose:
    pos: np.ndarray  # (x, z)
    pitch: float
    vel: np.ndarray  # (dx, dz)
    pitch_rate: float
    jac: np.ndarray  # [2, 9] position rows
    jacdot: np.ndarray  # [2, 9]
    pitch_jac: np.ndarray  # [9]


@dataclass
class FkResult:
    base_pos: np.ndarray
    base_vel: np.ndarray
    torso_pitch: float
    torso_pitch_rate: float
    left: FootPose
    right: FootPose

    def foot(self, leg: str) -> FootPose:
        return self.left if leg == LEFT else self.right


def forward_kinematics(model: RobotModel, state: RobotState,
                       kin: Kinematics | None = None) -> FkResult:
    """Foot poses/velocities, base pose, torso pitch, with Jacobians."""
    if kin is None:
        kin = _kin(model, state.q, state.dq)

    def foot_pose(pt: int, foot: int) -> FootPose:
        return FootPose(
            pos=kin.pos[pt].copy(),
            pitch=float(kin.phi[foot]),
            vel=kin.vel[pt].copy(),
            pitch_rate=float(kin.phidot[foot]),
            jac=kin.jac[pt].copy(),
            jacdot=kin.jacdot[pt].copy(),
            pitch_jac=model.ang[foot].copy(),
        )

    return FkResult(
        base_pos=state.q[:2].copy(),
        base_vel=state.dq[:2].copy(),
        torso_pitch=float(state.q[Q_PITCH]),
        torso_pitch_rate=float(state.dq[Q_PITCH]),
        left=foot_pose(PT_ANKLE_L, FOOT_L),
        right=foot_pose(PT_ANKLE_R, FOOT_R),
    )


def stance_constraint_residual(model: RobotModel, state: RobotState) -> float:
    """Max abs stance weld violation: (x - anchor, z, pitch)."""
    kin = _kin(model, state.q, state.dq)
    pt, foot = _stance_indices(state.stance_leg)
    anchor = state.anchor_x if state.anchor_x is not None else float(kin.pos[pt, 0])
    return float(max(abs(kin.pos[pt, 0] - anchor), abs(kin.pos[pt, 1]), abs(kin.phi[foot])))


def standing_pose(model: RobotModel, base_height: float | None = None,
                  base_x: float = 0.0, stance_leg: str = LEFT) -> RobotState:
    """Symmetric double-support standing state: feet flat, ankles under the hip."""
    h = model.nominal_base_height if base_height is None else base_height
    hip_h = h - model.torso_com
    reach = model.leg_reach()
    if not (0.0 < hip_h < reach):
        raise RangeError(f"base height {h} puts hip at {hip_h}, outside (0, {reach})")
    lth, lsh = model.thigh_length, model.shank_length
    cos_alpha = (hip_h**2 + lth**2 - lsh**2) / (2.0 * hip_h * lth)
    cos_gamma = (lth**2 + lsh**2 - hip_h**2) / (2.0 * lth * lsh)
    alpha = float(np.arccos(np.clip(cos_alpha, -1.0, 1.0)))
    gamma = float(np.arccos(np.clip(cos_gamma, -1.0, 1.0)))
    q_hip = alpha
    q_knee = -(np.pi - gamma)
    q_ankle = -(q_hip + q_knee)  # foot flat: absolute foot angle zero
    q = np.array([base_x, h, 0.0, q_hip, q_knee, q_ankle, q_hip, q_knee, q_ankle])
    return RobotState(q, np.zeros(NQ), stance_leg, 0.0, 0.0, anchor_x=base_x)


# -- constrained-dynamics test hook -----------------------------------------

def constrained_accel(model: RobotModel, q: np.ndarray, dq: np.ndarray,
                      gen_force: np.ndarray, jc: np.ndarray,
                      jcdot: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Accelerations under an arbitrary constraint stack J qdd + Jdot dq = 0.

    Exposed so reduced systems (pinned pendulums, locked joints) can be
    checked against analytic references.
    """
    kin = _kin(model, np.asarray(q, float), np.asarray(dq, float))
    return _solve_constrained(kin.mass_matrix, kin.bias, np.asarray(gen_force, float),
                              jc, jcdot @ np.asarray(dq, float), "constrained_accel")


TRAJECTORY_HEADER = (
    ["time"] + [f"q{i}" for i in range(NQ)] + [f"dq{i}" for i in range(NQ)]
    + ["stance_leg"] + [f"tau{i}" for i in range(NU)]
)


def write_trajectory_csv(path, rows: list[tuple[RobotState, np.ndarray]]) -> None:
    """Dump (state, torques) pairs: time, q[9], dq[9], stance_leg, torques[6]."""
    buf = io.StringIO()
    buf.write(",".join(TRAJECTORY_HEADER) + "\n")
    for state, torques in rows:
        cells = [repr(state.time)]
        cells += [repr(v) for v in state.q]
        cells += [repr(v) for v in state.dq]
        cells.append(state.stance_leg)
        cells += [repr(float(v)) for v in torques]
        buf.write(",".join(cells) + "\n")
    with open(path, "w") as f:
        f.write(buf.getvalue())

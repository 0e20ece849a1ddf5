"""Simulator physics: dynamics, integration, touchdown, impact, kinematics."""

import numpy as np
import pytest

from latentgait import sim
from latentgait.errors import RangeError, ShapeError, StateError
from latentgait.sim import (Disturbance, RobotModel, RobotState, com_state,
                            continuous_dynamics, detect_touchdown, forward_kinematics,
                            impact_map, mechanical_energy, kinetic_energy, standing_pose,
                            step_integrate, swing_foot_clearance)


@pytest.fixture(scope="module")
def model():
    return RobotModel()


def hanging_state(model, seed=0, joint_vel_sigma=0.3):
    """Robot dangling below the welded stance foot: a bounded unactuated swing."""
    q = np.array([0.0, -(model.torso_com + model.thigh_length + model.shank_length),
                  np.pi, 0.0, 0.0, -np.pi, 0.0, 0.0, -np.pi])
    st = RobotState(q, np.zeros(9), "left", anchor_x=0.0)
    rng = np.random.default_rng(seed)
    st.dq[3:] = rng.normal(0.0, joint_vel_sigma, 6)
    kin = sim._kin(model, st.q, st.dq)
    jc, _ = sim._contact_jacobians(model, kin, st.stance_leg)
    st.dq -= jc.T @ np.linalg.solve(jc @ jc.T, jc @ st.dq)
    return st


def random_stance_state(model, rng, vel_scale=0.5):
    """Random configuration with the left foot welded to the ground."""
    q = np.zeros(9)
    q[2] = rng.normal(0.0, 0.2)
    q[3:] = rng.normal(0.0, 0.4, 6)
    q[5] = -(q[2] + q[3] + q[4])  # left foot flat
    st = RobotState(q, np.zeros(9), "left")
    kin = sim._kin(model, st.q, st.dq)
    # place the left ankle exactly at the origin
    st.q[0] -= kin.pos[sim.PT_ANKLE_L, 0]
    st.q[1] -= kin.pos[sim.PT_ANKLE_L, 1]
    st.anchor_x = 0.0
    st.dq[:] = rng.normal(0.0, vel_scale, 9)
    kin = sim._kin(model, st.q, st.dq)
    jc, _ = sim._contact_jacobians(model, kin, st.stance_leg)
    st.dq -= jc.T @ np.linalg.solve(jc @ jc.T, jc @ st.dq)
    return st


class TestContinuousDynamics:
    def test_aligned_equilibrium_has_zero_accelerations(self, model):
        # every link CoM on the vertical through the weld: gravity produces no motion
        h = model.torso_com + model.thigh_length + model.shank_length
        st = RobotState(np.array([0.0, h, 0, 0, 0, 0, 0, 0, 0]), np.zeros(9),
                        "left", anchor_x=0.0)
        com, _, _ = com_state(model, st)
        assert abs(com[0]) < 1e-12  # CoM exactly above the weld
        _, qdd = continuous_dynamics(model, st, np.zeros(6))
        com_acc_x = (sim._kin(model, st.q, st.dq).jac[:7, 0, :] @ qdd
                     * model.link_masses).sum() / model.total_mass
        assert abs(com_acc_x) < 1e-9
        assert np.abs(qdd).max() < 1e-9

    def test_constraint_consistency_random_states(self, model):
        rng = np.random.default_rng(42)
        for _ in range(100):
            st = random_stance_state(model, rng)
            tau = rng.uniform(-50, 50, 6)
            _, qdd = continuous_dynamics(model, st, tau)
            kin = sim._kin(model, st.q, st.dq)
            jc, jcdot = sim._contact_jacobians(model, kin, st.stance_leg)
            resid = jc @ qdd + jcdot @ st.dq
            assert np.abs(resid).max() < 1e-8

    def test_pendulum_reduction_matches_analytic(self, model):
        # pin the base and lock all joints with the legs hanging straight
        # down: the robot is a rigid composite pendulum. Compare against
        # theta_dd = -(g / l_eff) sin(theta) with l_eff from composite inertia
        for theta in (0.1, 0.4, -0.3):
            qt = np.array([0.0, 1.2, theta, 0, 0, 0, 0, 0, 0])
            st = RobotState(qt, np.zeros(9), "left")
            kin = sim._kin(model, st.q, st.dq)
            # composite pendulum about the base point
            m = model.link_masses
            rel = kin.pos[:7] - st.q[:2]
            d_vec = (m[:, None] * rel).sum(axis=0) / model.total_mass
            d = np.linalg.norm(d_vec)
            i_pivot = float((model.link_inertias + m * (rel**2).sum(axis=1)).sum())
            l_eff = i_pivot / (model.total_mass * d)
            # constraints: base pinned (2) + all joints locked (6)
            jc = np.zeros((8, 9))
            jc[0, 0] = 1.0
            jc[1, 1] = 1.0
            jc[2:, 3:] = np.eye(6)
            qdd, _ = sim.constrained_accel(model, st.q, st.dq, np.zeros(9), jc,
                                           np.zeros((8, 9)))
            expected = -(model.gravity / l_eff) * np.sin(theta)
            assert abs(qdd[2] - expected) < 1e-6
            assert np.abs(qdd[[0, 1]]).max() < 1e-9

    def test_bad_torque_shape(self, model):
        st = standing_pose(model)
        with pytest.raises(ShapeError):
            continuous_dynamics(model, st, np.zeros(5))


class TestStepIntegrate:
    def test_zero_dt_rejected(self, model):
        st = standing_pose(model)
        with pytest.raises(RangeError):
            step_integrate(model, st, np.zeros(6), 0.0)
        with pytest.raises(RangeError):
            step_integrate(model, st, np.zeros(6), 0.006)

    def test_unactuated_energy_drift(self, model):
        # bounded unactuated swing: hanging below the weld; 1 s at 1 kHz
        for seed in range(3):
            st = hanging_state(model, seed)
            e0 = mechanical_energy(model, st)
            for _ in range(1000):
                st = step_integrate(model, st, np.zeros(6), 1e-3)
            assert abs(mechanical_energy(model, st) - e0) < 1e-3

    def test_rk4_order(self, model):
        # one coarse step vs two half steps against a fine reference:
        # halving dt cuts the error by ~2^4 (order 4), allow a loose band
        st = hanging_state(model, 1, joint_vel_sigma=0.5)
        tau = np.full(6, 2.0)

        def advance(state, dt, n):
            out = state.copy()
            for _ in range(n):
                out, _ = sim._step_integrate_kin(model, out, tau, dt)
            return out

        ref = advance(st, 1e-5, 400)  # t = 4 ms
        errs = []
        for dt, n in ((4e-3, 1), (2e-3, 2), (1e-3, 4)):
            got = advance(st, dt, n)
            errs.append(np.linalg.norm(got.q - ref.q) + np.linalg.norm(got.dq - ref.dq))
        r1 = errs[0] / errs[1]
        r2 = errs[1] / errs[2]
        assert 8.0 < r1 < 40.0
        assert 8.0 < r2 < 40.0

    def test_constraint_maintained(self, model):
        rng = np.random.default_rng(3)
        st = random_stance_state(model, rng, vel_scale=0.2)
        for _ in range(200):
            st = step_integrate(model, st, rng.uniform(-5, 5, 6), 1e-3)
            assert sim.stance_constraint_residual(model, st) < 1e-6

    def test_determinism(self, model):
        rng = np.random.default_rng(4)
        taus = rng.uniform(-10, 10, size=(50, 6))
        outs = []
        for _ in range(2):
            st = hanging_state(model, 2)
            for tau in taus:
                st = step_integrate(model, st, tau, 1e-3)
            outs.append((st.q.copy(), st.dq.copy()))
        assert np.array_equal(outs[0][0], outs[1][0])
        assert np.array_equal(outs[0][1], outs[1][1])

    def test_disturbance_changes_motion(self, model):
        st = hanging_state(model, 5, joint_vel_sigma=0.0)
        d = Disturbance(force=30.0, start=0.0, duration=1.0)
        a = step_integrate(model, st, np.zeros(6), 1e-3)
        b = step_integrate(model, st, np.zeros(6), 1e-3, d)
        assert not np.array_equal(a.dq, b.dq)
        # force outside its window does nothing
        d2 = Disturbance(force=30.0, start=5.0, duration=1.0)
        c = step_integrate(model, st, np.zeros(6), 1e-3, d2)
        assert np.array_equal(a.dq, c.dq)


class TestTouchdown:
    def make_swing_pair(self, model, z_before, z_after):
        """Two states differing only in base height; swing foot heights follow."""
        st = standing_pose(model)
        a = st.copy()
        a.q[1] += z_before
        b = st.copy()
        b.q[1] += z_after
        b.dq[1] = (z_after - z_before) / 1e-3
        a.dq[1] = b.dq[1]
        return a, b

    def test_rising_foot_gives_none(self, model):
        a, b = self.make_swing_pair(model, 0.001, 0.002)
        assert detect_touchdown(a, b, model) is None

    def test_linear_crossing_near_half(self, model):
        a, b = self.make_swing_pair(model, 0.001, -0.001)
        alpha = detect_touchdown(a, b, model)
        assert alpha is not None
        assert abs(alpha - 0.5) < 1e-3

    def test_exact_boundary(self, model):
        a, b = self.make_swing_pair(model, 0.001, 0.0)
        alpha = detect_touchdown(a, b, model)
        assert alpha == 1.0

    def test_bracketing_height_below_tolerance(self, model):
        rng = np.random.default_rng(6)
        for _ in range(50):
            z0 = rng.uniform(1e-4, 5e-3)
            z1 = -rng.uniform(1e-4, 5e-3)
            a, b = self.make_swing_pair(model, z0, z1)
            alpha = detect_touchdown(a, b, model)
            assert alpha is not None
            mid = sim._interp_state(a, b, alpha)
            assert abs(swing_foot_clearance(model, mid)) < 1e-6


class TestImpact:
    def impact_ready_state(self, model, rng):
        st = random_stance_state(model, rng, vel_scale=0.8)
        # drop the base so the swing foot's lowest point is exactly at ground
        clr = swing_foot_clearance(model, st)
        st.q[1] -= clr
        st.anchor_x = None
        return st

    def test_zero_velocity_fixed_point(self, model):
        rng = np.random.default_rng(7)
        st = self.impact_ready_state(model, rng)
        st.dq[:] = 0.0
        post = impact_map(model, st)
        assert np.abs(post.dq).max() < 1e-12
        assert post.stance_leg == st.swing_leg
        assert post.phase == 0.0
        np.testing.assert_array_equal(post.q, st.q)

    def test_kinetic_energy_never_increases(self, model):
        rng = np.random.default_rng(8)
        for _ in range(1000):
            st = self.impact_ready_state(model, rng)
            pre = kinetic_energy(model, st)
            post = impact_map(model, st)
            assert kinetic_energy(model, post) <= pre + 1e-9

    def test_new_stance_foot_velocity_zero(self, model):
        rng = np.random.default_rng(9)
        for _ in range(100):
            st = self.impact_ready_state(model, rng)
            post = impact_map(model, st)
            kin = sim._kin(model, post.q, post.dq)
            pt, foot = sim._stance_indices(post.stance_leg)
            assert np.abs(kin.vel[pt]).max() < 1e-10
            assert abs(kin.phidot[foot]) < 1e-10

    def test_airborne_foot_rejected(self, model):
        st = standing_pose(model)
        st.q[1] += 0.05  # swing foot 5 cm up
        with pytest.raises(StateError):
            impact_map(model, st)


class TestComState:
    def test_at_rest_momentum_zero(self, model):
        st = standing_pose(model)
        _, com_v, ang = com_state(model, st)
        assert np.abs(com_v).max() == 0.0
        assert ang == 0.0

    def test_rigid_rotation_composite_inertia(self, model):
        # whole body spinning at omega about its CoM: L = I_total * omega
        st = standing_pose(model)
        kin = sim._kin(model, st.q, st.dq)
        m = model.link_masses
        com = (m[:, None] * kin.pos[:7]).sum(axis=0) / model.total_mass
        omega = 0.7
        st.dq[0] = -omega * (st.q[1] - com[1])
        st.dq[1] = omega * (st.q[0] - com[0])
        st.dq[2] = omega
        rel = kin.pos[:7] - com
        i_total = float((model.link_inertias + m * (rel**2).sum(axis=1)).sum())
        _, _, ang = com_state(model, st)
        assert abs(ang - i_total * omega) < 1e-10

    def test_translation_equivariance(self, model):
        st = standing_pose(model)
        com0, _, _ = com_state(model, st)
        st2 = st.copy()
        st2.q[0] += 1.0
        com1, _, _ = com_state(model, st2)
        assert abs(com1[0] - com0[0] - 1.0) < 1e-14
        assert abs(com1[1] - com0[1]) < 1e-14


class TestForwardKinematics:
    def test_reference_pose_feet_under_base(self, model):
        h = model.torso_com + model.thigh_length + model.shank_length
        st = RobotState(np.array([0.3, h, 0, 0, 0, 0, 0, 0, 0]), np.zeros(9), "left")
        fk = forward_kinematics(model, st)
        np.testing.assert_allclose(fk.left.pos, [0.3, 0.0], atol=1e-14)
        np.testing.assert_allclose(fk.right.pos, [0.3, 0.0], atol=1e-14)

    def test_jacobian_matches_finite_differences(self, model):
        rng = np.random.default_rng(11)
        q = rng.normal(0, 0.4, 9)
        dq = rng.normal(0, 0.5, 9)
        st = RobotState(q, dq, "left")
        fk = forward_kinematics(model, st)
        eps = 1e-7
        for leg in ("left", "right"):
            jac_fd = np.zeros((2, 9))
            for k in range(9):
                qp, qm = q.copy(), q.copy()
                qp[k] += eps
                qm[k] -= eps
                fp = forward_kinematics(model, RobotState(qp, dq, "left")).foot(leg)
                fm = forward_kinematics(model, RobotState(qm, dq, "left")).foot(leg)
                jac_fd[:, k] = (fp.pos - fm.pos) / (2 * eps)
            assert np.abs(jac_fd - fk.foot(leg).jac).max() < 1e-6

    def test_mirror_symmetry(self, model):
        rng = np.random.default_rng(12)
        joints = rng.normal(0, 0.3, 3)
        qa = np.array([0.0, 1.0, 0.0, *joints, 0.1, 0.2, 0.3])
        qb = np.array([0.0, 1.0, 0.0, 0.1, 0.2, 0.3, *joints])
        fa = forward_kinematics(model, RobotState(qa, np.zeros(9), "left"))
        fb = forward_kinematics(model, RobotState(qb, np.zeros(9), "left"))
        np.testing.assert_allclose(fa.left.pos, fb.right.pos, atol=1e-14)
        np.testing.assert_allclose(fa.right.pos, fb.left.pos, atol=1e-14)
        assert abs(fa.left.pitch - fb.right.pitch) < 1e-14


class TestTrajectoryDump:
    def test_csv_round_numbers(self, model, tmp_path):
        st = standing_pose(model)
        rows = [(st, np.arange(6.0))]
        path = tmp_path / "traj.csv"
        sim.write_trajectory_csv(path, rows)
        text = path.read_text().splitlines()
        assert text[0].startswith("time,q0")
        cells = text[1].split(",")
        assert len(cells) == 1 + 9 + 9 + 1 + 6
        assert cells[19] == "left"

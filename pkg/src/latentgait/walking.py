"""Closed-loop stepping shared by data collection, RL training, and evals.

Runs the 1 kHz control loop (task-space controller + integrator) under an
action held for a number of sub-steps, takes care of touchdown events, the
step timeout, and the average-velocity bookkeeping the reward needs.
"""

from __future__ import annotations

from collections import deque
from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from . import sim
from .control import (ControlGains, GaitSchedule, PolicyAction, assemble_task_refs,
                      stance_frame_transform, task_space_controller)
from .sim import Disturbance, RobotModel, RobotState

HeightRef = Callable[[float], tuple[float, float]]  # t -> (height, height_vel)


@dataclass
class VelocityTracker:
    """Average forward velocity: CoM displacement over the last completed
    touchdown-to-touchdown interval, with a trailing-window fallback before
    the first interval completes."""

    window: float = 0.4  # s
    touchdowns: list[tuple[float, float]] = field(default_factory=list)  # (t, com_x)
    samples: deque = field(default_factory=deque)  # (t, com_x)

    def record_sample(self, t: float, com_x: float) -> None:
        self.samples.append((t, com_x))
        horizon = t - self.window - 1e-9
        while len(self.samples) > 2 and self.samples[1][0] <= horizon:
            self.samples.popleft()

    def record_touchdown(self, t: float, com_x: float) -> None:
        self.touchdowns.append((t, com_x))
        if len(self.touchdowns) > 2:
            del self.touchdowns[:-2]

    def average_velocity(self) -> float:
        if len(self.touchdowns) >= 2:
            (t0, x0), (t1, x1) = self.touchdowns[-2], self.touchdowns[-1]
            if t1 > t0:
                return (x1 - x0) / (t1 - t0)
        if len(self.samples) >= 2:
            t0, x0 = self.samples[0]
            t1, x1 = self.samples[-1]
            if t1 > t0:
                return (x1 - x0) / (t1 - t0)
        return 0.0


def average_velocity(tracker: VelocityTracker) -> float:
    """Functional alias for the tracker query."""
    return tracker.average_velocity()


@dataclass
class StepEvents:
    """What happened while holding one action."""

    touchdown_times: list[float] = field(default_factory=list)
    timeout_switches: int = 0
    com: np.ndarray | None = None
    com_vel: np.ndarray | None = None
    angular_momentum: float = 0.0


def is_fallen(state: RobotState, pitch_limit: float = 1.0,
              min_base_height: float = 0.8) -> bool:
    return abs(float(state.q[sim.Q_PITCH])) > pitch_limit \
        or float(state.q[sim.Q_Z]) < min_base_height


@dataclass
class WalkingCore:
    """Owns one simulator instance plus its gait schedule and controller."""

    model: RobotModel
    gains: ControlGains = field(default_factory=ControlGains)
    schedule: GaitSchedule = field(default_factory=GaitSchedule)
    control_dt: float = 1e-3
    touchdown_min_phase: float = 0.1  # fraction of step_duration
    touchdown_clearance: float = 5e-3  # m the swing foot must clear first
    state: RobotState = None  # type: ignore[assignment]
    tracker: VelocityTracker = field(default_factory=VelocityTracker)
    _swing_cleared: bool = False
    _kin: sim.Kinematics = None  # type: ignore[assignment]

    def reset(self, state: RobotState) -> None:
        self.state = state.copy()
        self._kin = sim._kin(self.model, self.state.q, self.state.dq)
        pt, _ = sim._stance_indices(self.state.swing_leg)
        self.schedule.reset_at_touchdown(float(self._kin.pos[pt, 0]))
        self._swing_cleared = False
        self.tracker = VelocityTracker(window=self.tracker.window)
        com, _, _ = sim.com_state(self.model, self.state, self._kin)
        self.tracker.record_sample(self.state.time, float(com[0]))

    # -- internals -----------------------------------------------------------

    def _controller_torques(self, action: PolicyAction, v_cmd: float,
                            height_ref: HeightRef | None) -> np.ndarray:
        st = self.state
        overtime = max(st.phase - self.schedule.step_duration, 0.0)
        if height_ref is not None:
            h, hdot = height_ref(st.time)
        else:
            h, hdot = None, 0.0
        refs = assemble_task_refs(action, v_cmd, self.schedule, st, self.model,
                                  base_height=h, base_height_vel=hdot,
                                  overtime=overtime, gains=self.gains)
        return task_space_controller(self.model, st, refs, self.gains, self._kin)

    def _locate_touchdown(self, before: RobotState, after: RobotState,
                          torques: np.ndarray, disturbance: Disturbance | None
                          ) -> RobotState | None:
        """Refine the event on the true flow until the foot is at the ground."""
        alpha = sim.detect_touchdown(before, after, self.model)
        if alpha is None:
            return None
        if alpha >= 1.0:
            return after
        for _ in range(4):
            if alpha <= 0.0:
                return before
            mid = sim.step_integrate(self.model, before, torques,
                                     alpha * self.control_dt, disturbance)
            kin = sim._kin(self.model, mid.q, mid.dq)
            h = sim.swing_foot_clearance(self.model, mid, kin)
            if h <= 1e-6:
                return mid
            pt, _ = sim._stance_indices(mid.swing_leg)
            v_down = float(kin.vel[pt, 1])
            if v_down >= -1e-9:
                break
            alpha = min(alpha - h / (v_down * self.control_dt), 1.0)
        return after  # descending slower than resolvable; land at step end

    def _switch_support(self, state: RobotState, events: StepEvents,
                        timeout: bool) -> RobotState:
        if timeout:
            post = sim.forced_support_switch(self.model, state)
            events.timeout_switches += 1
        else:
            post = sim.impact_map(self.model, state)
        kin = sim._kin(self.model, post.q, post.dq)
        pt, _ = sim._stance_indices(post.swing_leg)
        self.schedule.reset_at_touchdown(float(kin.pos[pt, 0]))
        self._swing_cleared = False
        com, _, _ = sim.com_state(self.model, post, kin)
        self.tracker.record_touchdown(post.time, float(com[0]))
        events.touchdown_times.append(post.time)
        self._kin = kin
        return post

    # -- public stepping -------------------------------------------------------

    def run_substeps(self, action: PolicyAction, v_cmd: float, n_substeps: int,
                     disturbance: Disturbance | None = None,
                     height_ref: HeightRef | None = None) -> StepEvents:
        """Hold one action for n_substeps control ticks (1 kHz each)."""
        events = StepEvents()
        for _ in range(n_substeps):
            torques = self._controller_torques(action, v_cmd, height_ref)
            before = self.state
            after, kin_after = sim._step_integrate_kin(self.model, before, torques,
                                                       self.control_dt, disturbance,
                                                       kin0=self._kin)
            if kin_after is None:
                kin_after = sim._kin(self.model, after.q, after.dq)

            phase_ok = before.phase > self.touchdown_min_phase * self.schedule.step_duration
            touched = None
            if self._swing_cleared and phase_ok:
                # full event search only when the foot is near the ground; it
                # cannot cross 5 mm within one 1 ms tick at gait speeds
                near = sim.swing_foot_clearance(self.model, after, kin_after) \
                    < self.touchdown_clearance
                if near:
                    touched = self._locate_touchdown(before, after, torques, disturbance)
            if touched is not None:
                landed = self._switch_support(touched, events, timeout=False)
                remainder = before.time + self.control_dt - landed.time
                if remainder > 1e-12:
                    landed = sim.step_integrate(self.model, landed, torques,
                                                remainder, disturbance)
                    self._kin = sim._kin(self.model, landed.q, landed.dq)
                self.state = landed
            else:
                self.state = after
                self._kin = kin_after
                clr = sim.swing_foot_clearance(self.model, after, kin_after)
                if clr > self.touchdown_clearance:
                    self._swing_cleared = True
                if after.phase > self.schedule.timeout_factor * self.schedule.step_duration:
                    self.state = self._switch_support(after, events, timeout=True)

            com, _, _ = sim.com_state(self.model, self.state, self._kin)
            self.tracker.record_sample(self.state.time, float(com[0]))
        com, com_v, ang = sim.com_state(self.model, self.state, self._kin)
        events.com = com
        events.com_vel = com_v
        events.angular_momentum = ang
        return events

    def stance_features(self) -> np.ndarray:
        return stance_frame_transform(self.model, self.state, self._kin)

    def average_velocity(self) -> float:
        return self.tracker.average_velocity()

"""Model-based foot placement on the linear inverted pendulum template.

Used to collect the training gait dataset and as the comparison baseline.
The placement rule is one-step dead-beat: put the next stance point where a
single pendulum step ends exactly at the commanded velocity.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import sim
from .control import PolicyAction
from .errors import RangeError
from .sim import RobotModel, RobotState


@dataclass(frozen=True)
class LipParams:
    """Pendulum height, its natural frequency, and the step duration."""

    height: float = 1.0  # m
    step_duration: float = 0.4  # s
    gravity: float = 9.81

    def __post_init__(self) -> None:
        if self.height <= 0.0:
            raise RangeError("pendulum height must be > 0")
        if self.step_duration <= 0.0:
            raise RangeError("step duration must be > 0")

    @property
    def omega(self) -> float:
        """sqrt(g / z0), 1/s."""
        return float(np.sqrt(self.gravity / self.height))


def lip_flow(x0: float, v0: float, t: float, params: LipParams) -> tuple[float, float]:
    """Closed-form pendulum flow from (x0, v0) over t seconds.

    x(t) = x0 cosh(w t) + (v0/w) sinh(w t);  v(t) = x0 w sinh(w t) + v0 cosh(w t).
    """
    if t < 0.0:
        raise RangeError(f"flow time {t} < 0")
    w = params.omega
    ch = np.cosh(w * t)
    sh = np.sinh(w * t)
    return float(x0 * ch + v0 / w * sh), float(x0 * w * sh + v0 * ch)


def foot_placement(com_x_rel_stance: float, com_vx: float, v_des: float,
                   params: LipParams) -> float:
    """Dead-beat next stance location relative to the CoM at the end of step.

    Treating the inputs as the support-switch-moment CoM state, the returned
    offset p makes one full pendulum step from (-p, com_vx) end at exactly
    v_des. In stance-relative coordinates the placement depends only on the
    switch-moment velocity; the position argument cancels and is kept for
    interface symmetry with position-aware variants.
    """
    del com_x_rel_stance
    w = params.omega
    wt = w * params.step_duration
    return float((com_vx * np.cosh(wt) - v_des) / (w * np.sinh(wt)))


def baseline_action(state: RobotState, v_des: float, phase: float,
                    params: LipParams, model: RobotModel) -> PolicyAction:
    """Adapt the LIP placement to the shared PolicyAction interface.

    Predicts the end-of-step CoM state from the current one, asks the
    dead-beat rule for the next stance point, and re-expresses it relative to
    the robot base. The velocity offset is zero: the baseline commands the
    raw desired velocity.
    """
    kin = sim._kin(model, state.q, state.dq)
    com, com_v, _ = sim.com_state(model, state, kin)
    pt, _ = sim._stance_indices(state.stance_leg)
    stance_x = float(kin.pos[pt, 0])
    t_rem = max(params.step_duration - phase, 0.0)
    x_end, v_end = lip_flow(float(com[0]) - stance_x, float(com_v[0]), t_rem, params)
    placement = foot_placement(x_end, v_end, v_des, params)
    target_world = stance_x + x_end + placement
    return PolicyAction.clipped(target_world - float(state.q[sim.Q_X]), 0.0)

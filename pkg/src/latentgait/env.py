"""RL walking environment: observation assembly, reward, termination."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import sim, walking
from .autoencoder import AutoencoderModel, encode
from .control import ControlGains, GaitSchedule, PolicyAction
from .errors import LatentGaitError, RangeError, StateError
from .sim import Disturbance, RobotModel
from .walking import HeightRef, WalkingCore

REWARD_WEIGHTS = (0.6, 0.3, 0.1)


@dataclass
class EnvConfig:
    episode_steps: int = 600
    policy_rate: float = 50.0
    control_rate: float = 1000.0
    pitch_limit: float = 1.0  # rad
    min_base_height: float = 0.8  # m
    joint_noise: float = 0.03  # rad, reset pose
    velocity_noise: float = 0.05  # rad/s and m/s, reset rates
    v_des_range: tuple[float, float] = (-0.5, 1.0)
    max_reset_tries: int = 10
    reward_weights: tuple[float, float, float] = REWARD_WEIGHTS

    def __post_init__(self) -> None:
        sub = self.control_rate / self.policy_rate
        if abs(sub - round(sub)) > 1e-9 or sub < 1:
            raise RangeError(
                f"control rate {self.control_rate} not divisible by policy rate {self.policy_rate}")

    @property
    def substeps(self) -> int:
        return int(round(self.control_rate / self.policy_rate))


def compute_reward(vbar: float, v_des: float, angular_momentum: float,
                   action: np.ndarray, prev_action: np.ndarray,
                   weights: tuple[float, float, float] = REWARD_WEIGHTS,
                   momentum_scale: float = 1.0) -> float:
    """Weighted exponential terms: velocity tracking, CoM angular momentum,
    action smoothness. Each term lies in (0, 1], so r does too when the
    weights sum to one."""
    w_v, w_l, w_a = weights
    r_v = np.exp(-((vbar - v_des) ** 2))
    r_l = np.exp(-((momentum_scale * angular_momentum) ** 2))
    da = np.asarray(action, dtype=float) - np.asarray(prev_action, dtype=float)
    r_a = np.exp(-float(da @ da))
    return float(w_v * r_v + w_l * r_l + w_a * r_a)


class WalkingEnv:
    """One simulator instance driven at the policy rate.

    Observations are raw (unnormalized): latent state z, average-velocity
    error, commanded velocity, and the previous action. Normalization is the
    trainer's concern.
    """

    def __init__(self, model: RobotModel, encoder: AutoencoderModel,
                 config: EnvConfig | None = None,
                 gains: ControlGains | None = None,
                 schedule: GaitSchedule | None = None,
                 fixed_v_des: float | None = None,
                 height_ref: HeightRef | None = None):
        self.model = model
        self.encoder = encoder
        self.config = config or EnvConfig()
        self.core = WalkingCore(model=model, gains=gains or ControlGains(),
                                schedule=schedule or GaitSchedule())
        self.rng = np.random.default_rng(0)
        self.fixed_v_des = fixed_v_des
        self.height_ref = height_ref
        self.disturbance: Disturbance | None = None
        self.v_des = 0.0
        self.prev_action = np.zeros(2)
        self.step_count = 0
        self.done = True
        # scale that makes the momentum reward exponent O(1) for the model
        self.momentum_scale = 1.0 / (model.total_mass * model.nominal_base_height)

    @property
    def obs_dim(self) -> int:
        return self.encoder.latent_dim + 4

    def _observe(self) -> np.ndarray:
        z = encode(self.encoder, self.core.stance_features())
        vbar = self.core.average_velocity()
        return np.concatenate((z, [vbar - self.v_des], [self.v_des], self.prev_action))

    def reset(self, seed: int | None = None) -> np.ndarray:
        if seed is not None:
            self.rng = np.random.default_rng(seed)
        cfg = self.config
        for _ in range(cfg.max_reset_tries):
            st = sim.standing_pose(self.model)
            st.q[2:] += self.rng.normal(0.0, cfg.joint_noise, 7)
            st.dq[:] = self.rng.normal(0.0, cfg.velocity_noise, 9)
            # re-seat the stance foot at the origin, then project the noisy
            # state onto the weld manifold
            kin = sim._kin(self.model, st.q, st.dq)
            pt, _ = sim._stance_indices(st.stance_leg)
            st.q[0] -= kin.pos[pt, 0]
            st.q[1] -= kin.pos[pt, 1]
            q, dq, _ = sim._project_to_manifold(self.model, st.q, st.dq,
                                                st.stance_leg, 0.0)
            st = sim.RobotState(q, dq, st.stance_leg, 0.0, 0.0, 0.0)
            if not walking.is_fallen(st, cfg.pitch_limit, cfg.min_base_height):
                break
        else:
            raise StateError(f"no valid reset pose in {cfg.max_reset_tries} tries")
        self.core.reset(st)
        if self.fixed_v_des is not None:
            self.v_des = float(self.fixed_v_des)
        else:
            self.v_des = float(self.rng.uniform(*cfg.v_des_range))
        self.prev_action = np.zeros(2)
        self.step_count = 0
        self.done = False
        return self._observe()

    def step(self, action: PolicyAction | np.ndarray
             ) -> tuple[np.ndarray, float, bool, dict]:
        if self.done:
            raise StateError("step() called on a finished episode; reset first")
        if not isinstance(action, PolicyAction):
            arr = np.asarray(action, dtype=float)
            action = PolicyAction.clipped(float(arr[0]), float(arr[1]))
        cfg = self.config
        info: dict = {"failure": False, "time_limit": False, "touchdowns": 0,
                      "timeout_switches": 0}
        try:
            ev = self.core.run_substeps(action, self.v_des, cfg.substeps,
                                        disturbance=self.disturbance,
                                        height_ref=self.height_ref)
        except LatentGaitError as exc:
            self.done = True
            info["failure"] = True
            info["error"] = repr(exc)
            obs = np.zeros(self.encoder.latent_dim + 4)
            return obs, 0.0, True, info
        info["touchdowns"] = len(ev.touchdown_times)
        info["timeout_switches"] = ev.timeout_switches
        self.step_count += 1
        a_k = action.as_array()
        vbar = self.core.average_velocity()
        reward = compute_reward(vbar, self.v_des, ev.angular_momentum, a_k,
                                self.prev_action, cfg.reward_weights,
                                self.momentum_scale)
        self.prev_action = a_k
        fell = walking.is_fallen(self.core.state, cfg.pitch_limit, cfg.min_base_height)
        if fell:
            self.done = True
            info["failure"] = True
        elif self.step_count >= cfg.episode_steps:
            self.done = True
            info["time_limit"] = True
        info["vbar"] = vbar
        info["v_des"] = self.v_des
        return self._observe(), reward, self.done, info

"""Experiment configuration: one JSON file drives every pipeline stage.

Unknown keys are rejected with their full path; missing keys fall back to
the documented defaults; the fully-resolved config is echoed into every run
directory so experiments stay diffable and reproducible.
"""

from __future__ import annotations

import dataclasses
import json
from dataclasses import dataclass, field

from .control import ControlGains, GaitSchedule
from .env import EnvConfig
from .errors import ConfigError
from .ppo import PpoConfig
from .sim import RobotModel


@dataclass
class ModelSection:
    torso_mass: float = 10.0
    torso_length: float = 0.5
    torso_com: float = 0.25
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

    def build(self) -> RobotModel:
        return RobotModel(**dataclasses.asdict(self))


@dataclass
class ControlSection:
    kp: float = 400.0
    kd: float = 40.0
    kv: float = 10.0
    weight_swing: float = 10.0
    weight_height: float = 5.0
    weight_velocity: float = 5.0
    weight_pitch: float = 2.0
    weight_foot_pitch: float = 2.0
    step_duration: float = 0.4
    apex_height: float = 0.08
    timeout_factor: float = 1.25

    def gains(self) -> ControlGains:
        return ControlGains(kp=self.kp, kd=self.kd, kv=self.kv,
                            weight_swing=self.weight_swing,
                            weight_height=self.weight_height,
                            weight_velocity=self.weight_velocity,
                            weight_pitch=self.weight_pitch,
                            weight_foot_pitch=self.weight_foot_pitch)

    def schedule(self) -> GaitSchedule:
        return GaitSchedule(step_duration=self.step_duration,
                            apex_height=self.apex_height,
                            timeout_factor=self.timeout_factor)


@dataclass
class DatasetSection:
    velocity_min: float = -0.5
    velocity_max: float = 1.0
    velocity_step: float = 0.1
    duration_per_gait: float = 10.0
    rate: float = 50.0
    warmup: float = 2.0
    holdout_fraction: float = 0.1
    min_success_fraction: float = 0.8

    def velocity_grid(self) -> tuple[float, ...]:
        n = int(round((self.velocity_max - self.velocity_min) / self.velocity_step)) + 1
        return tuple(round(self.velocity_min + k * self.velocity_step, 10)
                     for k in range(n))


@dataclass
class AutoencoderSection:
    latent_dim: int = 2
    epochs: int = 400
    lr: float = 1e-3
    batch_size: int = 128


@dataclass
class EnvSection:
    episode_steps: int = 600
    policy_rate: float = 50.0
    control_rate: float = 1000.0
    pitch_limit: float = 1.0
    min_base_height: float = 0.8
    joint_noise: float = 0.03
    velocity_noise: float = 0.05
    v_des_min: float = -0.5
    v_des_max: float = 1.0

    def build(self) -> EnvConfig:
        return EnvConfig(episode_steps=self.episode_steps,
                         policy_rate=self.policy_rate,
                         control_rate=self.control_rate,
                         pitch_limit=self.pitch_limit,
                         min_base_height=self.min_base_height,
                         joint_noise=self.joint_noise,
                         velocity_noise=self.velocity_noise,
                         v_des_range=(self.v_des_min, self.v_des_max))


@dataclass
class PpoSection:
    workers: int = 8
    steps_per_worker: int = 512
    iterations: int = 100
    gamma: float = 0.99
    lam: float = 0.95
    clip: float = 0.2
    epochs: int = 4
    minibatch: int = 256
    lr: float = 3e-4
    action_std: float = 0.3
    checkpoint_every: int = 25

    def build(self) -> PpoConfig:
        return PpoConfig(workers=self.workers, steps_per_worker=self.steps_per_worker,
                         iterations=self.iterations, gamma=self.gamma, lam=self.lam,
                         clip=self.clip, epochs=self.epochs, minibatch=self.minibatch,
                         lr=self.lr, action_std=self.action_std,
                         checkpoint_every=self.checkpoint_every)


@dataclass
class EvalSection:
    velocity_profile: list = field(default_factory=lambda: [
        [0.0, 4.0], [0.5, 4.0], [0.25, 4.0], [-0.25, 4.0]])
    probe_speeds: list = field(default_factory=lambda: [
        -0.4, -0.2, 0.0, 0.2, 0.4, 0.6, 0.8, 1.0])
    holdout_speeds: list = field(default_factory=lambda: [0.2, 0.6])
    seconds_per_speed: float = 10.0
    forces: list = field(default_factory=lambda: [-100.0, -60.0, -30.0, 30.0, 60.0])
    durations: list = field(default_factory=lambda: [0.1, 0.5, 1.0, 1.5])
    force_reference_mass: float = 48.0  # full-size reference robot mass, kg
    scale_forces_by_mass: bool = True
    disturbance_seeds: int = 10
    disturbance_v_des: float = 0.5
    apply_after: float = 4.0
    heights: list = field(default_factory=lambda: [1.0, 0.95, 0.9])
    height_segment_duration: float = 4.0
    height_ramp: float = 0.5
    ood_v_des: float = 0.5
    action_speeds: list = field(default_factory=lambda: [0.7, 1.0])


SECTIONS = {
    "model": ModelSection,
    "control": ControlSection,
    "dataset": DatasetSection,
    "autoencoder": AutoencoderSection,
    "env": EnvSection,
    "ppo": PpoSection,
    "eval": EvalSection,
}


@dataclass
class ExperimentConfig:
    seed: int = 0
    model: ModelSection = field(default_factory=ModelSection)
    control: ControlSection = field(default_factory=ControlSection)
    dataset: DatasetSection = field(default_factory=DatasetSection)
    autoencoder: AutoencoderSection = field(default_factory=AutoencoderSection)
    env: EnvSection = field(default_factory=EnvSection)
    ppo: PpoSection = field(default_factory=PpoSection)
    eval: EvalSection = field(default_factory=EvalSection)

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True) + "\n"


def _build_section(cls, data: dict, path: str):
    known = {f.name: f for f in dataclasses.fields(cls)}
    kwargs = {}
    for key, value in data.items():
        if key not in known:
            raise ConfigError(f"unknown config key {path}.{key}")
        f = known[key]
        if f.type in ("float", float) and isinstance(value, (int, float)) \
                and not isinstance(value, bool):
            value = float(value)
        elif f.type in ("int", int):
            if isinstance(value, bool) or not isinstance(value, (int, float)) \
                    or int(value) != value:
                raise ConfigError(f"config key {path}.{key} must be an integer")
            value = int(value)
        elif f.type in ("bool", bool) and not isinstance(value, bool):
            raise ConfigError(f"config key {path}.{key} must be a boolean")
        kwargs[key] = value
    try:
        return cls(**kwargs)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"invalid config section {path}: {exc}") from exc


def config_from_dict(data: dict) -> ExperimentConfig:
    if not isinstance(data, dict):
        raise ConfigError("config root must be a JSON object")
    cfg = ExperimentConfig()
    for key, value in data.items():
        if key == "seed":
            if isinstance(value, bool) or not isinstance(value, int):
                raise ConfigError("config key seed must be an integer")
            cfg.seed = value
        elif key in SECTIONS:
            if not isinstance(value, dict):
                raise ConfigError(f"config section {key} must be an object")
            setattr(cfg, key, _build_section(SECTIONS[key], value, key))
        else:
            raise ConfigError(f"unknown config key {key}")
    return cfg


def load_config(path) -> ExperimentConfig:
    try:
        with open(path) as f:
            text = f.read()
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from exc
    try:
        data = json.loads(text) if text.strip() else {}
    except json.JSONDecodeError as exc:
        raise ConfigError(
            f"config {path} parse error at line {exc.lineno} column {exc.colno}: "
            f"{exc.msg}") from exc
    return config_from_dict(data)

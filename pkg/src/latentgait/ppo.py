"""PPO with input normalization, fixed covariance, and multi-env collection.

The policy is a Gaussian over a pre-squash variable with constant standard
deviation; actions are tanh-squashed and scaled, with the exact change of
variables in the log-density. All gradients run through the package's own
reverse-mode machinery.
"""

from __future__ import annotations

import hashlib
import io
import json
from dataclasses import dataclass, field

import numpy as np

from . import nets
from .control import PolicyAction
from .env import WalkingEnv
from .errors import DataError, FormatError, RangeError, TrainingError
from .nets import (MlpParams, adam_step, clip_grad_global_norm, init_adam, init_mlp,
                   mlp_backward, mlp_forward, mse_loss)

LOG_2PI = float(np.log(2.0 * np.pi))
ATANH_EPS = 1e-6


@dataclass
class RunningNormalizer:
    """Streaming mean/variance over observation vectors (Chan's parallel merge)."""

    dim: int
    count: float = 0.0
    mean: np.ndarray = None  # type: ignore[assignment]
    m2: np.ndarray = None  # type: ignore[assignment]
    eps: float = 1e-8

    def __post_init__(self) -> None:
        if self.mean is None:
            self.mean = np.zeros(self.dim)
        if self.m2 is None:
            self.m2 = np.zeros(self.dim)

    def update(self, batch: np.ndarray) -> None:
        batch = np.asarray(batch, dtype=float)
        if batch.ndim == 1:
            batch = batch[None, :]
        n = batch.shape[0]
        if n == 0:
            return
        b_mean = batch.mean(axis=0)
        b_m2 = ((batch - b_mean) ** 2).sum(axis=0)
        if self.count == 0.0:
            self.mean = b_mean
            self.m2 = b_m2
            self.count = float(n)
            return
        delta = b_mean - self.mean
        total = self.count + n
        self.mean = self.mean + delta * (n / total)
        self.m2 = self.m2 + b_m2 + delta**2 * (self.count * n / total)
        self.count = total

    def variance(self) -> np.ndarray:
        if self.count < 2:
            return np.ones(self.dim)
        return self.m2 / self.count

    def normalize(self, x: np.ndarray) -> np.ndarray:
        return (np.asarray(x, dtype=float) - self.mean) / np.sqrt(self.variance() + self.eps)

    def state_dict(self) -> dict:
        return {"count": self.count, "mean": self.mean.tolist(), "m2": self.m2.tolist()}

    @classmethod
    def from_state(cls, state: dict) -> "RunningNormalizer":
        mean = np.array(state["mean"], dtype=float)
        return cls(dim=mean.size, count=float(state["count"]), mean=mean,
                   m2=np.array(state["m2"], dtype=float))


@dataclass
class GaussianTanhPolicy:
    """Fixed-std Gaussian in pre-squash space, tanh*scale squashing."""

    net: MlpParams
    action_scale: np.ndarray
    action_std: np.ndarray  # pre-squash units, constant

    def __post_init__(self) -> None:
        self.action_scale = np.asarray(self.action_scale, dtype=float)
        self.action_std = np.asarray(self.action_std, dtype=float)
        if self.net.out_dim != self.action_scale.size:
            raise DataError(f"net outputs {self.net.out_dim} dims, scale has {self.action_scale.size}")

    @property
    def action_dim(self) -> int:
        return self.action_scale.size

    def mean_action(self, obs_n: np.ndarray) -> np.ndarray:
        """Deterministic action: tanh of the network mean, scaled."""
        mu = mlp_forward(self.net, obs_n).output
        return np.tanh(mu) * self.action_scale

    def _log_density(self, u: np.ndarray, mu: np.ndarray) -> np.ndarray:
        z = (u - mu) / self.action_std
        gauss = -0.5 * z * z - np.log(self.action_std) - 0.5 * LOG_2PI
        # |da/du| = scale * (1 - tanh(u)^2); stable log form
        log_det = np.log(self.action_scale) \
            + 2.0 * (np.log(2.0) - u - np.logaddexp(0.0, -2.0 * u))
        return (gauss - log_det).sum(axis=-1)

    def sample(self, obs: np.ndarray, rng: np.random.Generator
               ) -> tuple[np.ndarray, float, np.ndarray]:
        """Draw one action for a single (normalized) observation.

        Also returns the pre-squash draw so updates can evaluate densities at
        the exact sampled point instead of round-tripping through atanh.
        """
        mu = mlp_forward(self.net, obs).output
        u = mu + self.action_std * rng.standard_normal(self.action_dim)
        action = np.tanh(u) * self.action_scale
        logp = float(self._log_density(u, mu))
        return action, logp, u

    def pre_squash(self, actions: np.ndarray) -> np.ndarray:
        ratio = np.clip(np.asarray(actions, dtype=float) / self.action_scale,
                        -1.0 + ATANH_EPS, 1.0 - ATANH_EPS)
        return np.arctanh(ratio)

    def evaluate_log_prob(self, obs: np.ndarray, actions: np.ndarray) -> np.ndarray:
        mu = mlp_forward(self.net, obs).output
        return self._log_density(self.pre_squash(actions), mu)


def build_policy(obs_dim: int, action_scale: np.ndarray, action_std: float,
                 rng: np.random.Generator, hidden: tuple[int, int] = (128, 128)
                 ) -> GaussianTanhPolicy:
    scale = np.asarray(action_scale, dtype=float)
    net = init_mlp([obs_dim, *hidden, scale.size], rng=rng)
    # small head: initial actions near zero, away from tanh saturation
    net.layers[-1].weight *= 0.01
    return GaussianTanhPolicy(net=net, action_scale=scale,
                              action_std=np.full(scale.size, action_std))


def build_value_net(obs_dim: int, rng: np.random.Generator,
                    hidden: tuple[int, int] = (128, 128)) -> MlpParams:
    return init_mlp([obs_dim, *hidden, 1], rng=rng)


@dataclass
class RolloutBuffer:
    """Per-step storage for one collection phase (all workers concatenated)."""

    obs: list = field(default_factory=list)  # normalized at collection time
    raw_obs: list = field(default_factory=list)
    actions: list = field(default_factory=list)
    pre_squash: list = field(default_factory=list)
    log_probs: list = field(default_factory=list)
    rewards: list = field(default_factory=list)
    values: list = field(default_factory=list)
    dones: list = field(default_factory=list)
    next_values: list = field(default_factory=list)  # bootstrap: 0 on failure
    episode_ids: list = field(default_factory=list)
    vel_errors: list = field(default_factory=list)

    def __len__(self) -> int:
        return len(self.obs)

    def arrays(self) -> dict:
        if not self.obs:
            raise DataError("empty rollout buffer")
        return {
            "obs": np.asarray(self.obs),
            "raw_obs": np.asarray(self.raw_obs),
            "actions": np.asarray(self.actions),
            "pre_squash": np.asarray(self.pre_squash),
            "log_probs": np.asarray(self.log_probs),
            "rewards": np.asarray(self.rewards),
            "values": np.asarray(self.values),
            "dones": np.asarray(self.dones, dtype=bool),
            "next_values": np.asarray(self.next_values),
            "episode_ids": np.asarray(self.episode_ids),
            "vel_errors": np.asarray(self.vel_errors),
        }


def gae_advantages(rewards: np.ndarray, values: np.ndarray, dones: np.ndarray,
                   next_values: np.ndarray, gamma: float = 0.99,
                   lam: float = 0.95) -> tuple[np.ndarray, np.ndarray]:
    """Generalized advantage estimation over one time-ordered segment.

    `next_values[t]` is the bootstrap V(s_{t+1}): zero for terminal failures,
    the critic estimate for truncations and the segment end. `dones` cuts the
    recursion at episode boundaries. Returns raw (unnormalized) advantages and
    returns = advantages + values.
    """
    rewards = np.asarray(rewards, dtype=float)
    n = rewards.size
    if n == 0:
        raise DataError("empty segment for advantage estimation")
    adv = np.zeros(n)
    carry = 0.0
    for t in range(n - 1, -1, -1):
        delta = rewards[t] + gamma * next_values[t] - values[t]
        carry = delta + gamma * lam * (0.0 if dones[t] else 1.0) * carry
        adv[t] = carry
    return adv, adv + values


@dataclass
class PpoConfig:
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
    hidden: tuple[int, int] = (128, 128)
    checkpoint_every: int = 25
    grad_clip: float = 5.0

    def __post_init__(self) -> None:
        if self.workers < 1 or self.steps_per_worker < 1:
            raise RangeError("workers and steps_per_worker must be >= 1")


@dataclass
class PpoState:
    """Everything the trainer mutates between iterations."""

    policy: GaussianTanhPolicy
    value_net: MlpParams
    normalizer: RunningNormalizer
    policy_adam: nets.AdamState
    value_adam: nets.AdamState
    iteration: int = 0
    env_steps: int = 0


@dataclass
class UpdateStats:
    policy_loss: float
    value_loss: float
    approx_kl: float
    clip_fraction: float


def ppo_update(state: PpoState, data: dict, cfg: PpoConfig,
               rng: np.random.Generator) -> UpdateStats:
    """Clipped-surrogate policy update plus value regression.

    Advantages are normalized here (zero mean, unit std) once per update.
    Observations in `data` are already normalized with the stats that were
    active during collection, which makes the pre-update ratios exactly one.
    """
    policy = state.policy
    obs = data["obs"]
    actions = data["actions"]
    logp_old = data["log_probs"]
    adv_raw = data["advantages"]
    returns = data["returns"]
    n = obs.shape[0]
    adv = (adv_raw - adv_raw.mean()) / max(float(adv_raw.std()), 1e-8)
    # exact sampled pre-squash values when available (no atanh round-trip)
    u_all = data["pre_squash"] if "pre_squash" in data and len(data["pre_squash"]) \
        else policy.pre_squash(actions)
    std2 = policy.action_std**2

    pol_losses, val_losses, kls, clipped = [], [], [], []
    for _ in range(cfg.epochs):
        order = rng.permutation(n)
        for start in range(0, n, cfg.minibatch):
            idx = order[start:start + cfg.minibatch]
            ob, u, lp0, a_dv, ret = obs[idx], u_all[idx], logp_old[idx], adv[idx], returns[idx]

            fwd = mlp_forward(policy.net, ob)
            mu = fwd.output
            logp = policy._log_density(u, mu)
            ratio = np.exp(logp - lp0)
            surr1 = ratio * a_dv
            surr2 = np.clip(ratio, 1.0 - cfg.clip, 1.0 + cfg.clip) * a_dv
            pol_loss = -float(np.minimum(surr1, surr2).mean())
            if not np.isfinite(pol_loss):
                raise TrainingError(
                    f"policy loss non-finite at iteration {state.iteration} "
                    f"(ratio range {ratio.min():.3g}..{ratio.max():.3g})")

            # d(-min)/d(logp): only where the unclipped branch is active
            active = surr1 <= surr2
            dlogp = -(ratio * a_dv * active) / idx.size
            dmu = dlogp[:, None] * (u - mu) / std2
            grads, _ = mlp_backward(policy.net, fwd, dmu)
            grads = clip_grad_global_norm(grads, cfg.grad_clip)
            policy.net, state.policy_adam = adam_step(policy.net, grads, state.policy_adam)

            vfwd = mlp_forward(state.value_net, ob)
            v_loss, dv = mse_loss(vfwd.output, ret[:, None])
            if not np.isfinite(v_loss):
                raise TrainingError(f"value loss non-finite at iteration {state.iteration}")
            vgrads, _ = mlp_backward(state.value_net, vfwd, dv)
            vgrads = clip_grad_global_norm(vgrads, cfg.grad_clip)
            state.value_net, state.value_adam = adam_step(state.value_net, vgrads,
                                                          state.value_adam)

            pol_losses.append(pol_loss)
            val_losses.append(v_loss)
            kls.append(float(np.mean(lp0 - logp)))
            clipped.append(float(np.mean(np.abs(ratio - 1.0) > cfg.clip)))
    return UpdateStats(policy_loss=float(np.mean(pol_losses)),
                       value_loss=float(np.mean(val_losses)),
                       approx_kl=float(np.mean(kls)),
                       clip_fraction=float(np.mean(clipped)))


def value_of(state: PpoState, raw_obs: np.ndarray) -> float:
    ob = state.normalizer.normalize(raw_obs)
    return float(mlp_forward(state.value_net, ob).output[0])


@dataclass
class WorkerSlot:
    env: WalkingEnv
    rng: np.random.Generator
    obs: np.ndarray | None = None
    episode_return: float = 0.0
    episode_len: int = 0
    episode_counter: int = 0


CURVE_HEADER = "iteration,steps,mean_return,mean_ep_len,speed_rmse"


@dataclass
class TrainResult:
    state: PpoState
    curves: list[tuple[int, int, float, float, float]]

    def curve_csv(self) -> str:
        buf = io.StringIO()
        buf.write(CURVE_HEADER + "\n")
        for row in self.curves:
            buf.write(f"{row[0]},{row[1]},{row[2]!r},{row[3]!r},{row[4]!r}\n")
        return buf.getvalue()


def collect_phase(state: PpoState, slots: list[WorkerSlot], steps_per_worker: int
                  ) -> tuple[RolloutBuffer, list[tuple[float, int, bool]]]:
    """Step every worker's environment for its quota, sequentially and in a
    fixed order (deterministic merge). Returns the buffer plus the episodes
    completed this phase as (return, length, failed)."""
    buf = RolloutBuffer()
    episodes: list[tuple[float, int, bool]] = []
    for w, slot in enumerate(slots):
        segment_start = len(buf)
        for _ in range(steps_per_worker):
            raw = slot.obs
            ob_n = state.normalizer.normalize(raw)
            action, logp, u = state.policy.sample(ob_n, slot.rng)
            value = float(mlp_forward(state.value_net, ob_n).output[0])
            nxt, reward, done, info = slot.env.step(action)
            slot.episode_return += reward
            slot.episode_len += 1
            buf.obs.append(ob_n)
            buf.raw_obs.append(raw)
            buf.actions.append(action)
            buf.pre_squash.append(u)
            buf.log_probs.append(logp)
            buf.rewards.append(reward)
            buf.values.append(value)
            buf.dones.append(done)
            buf.episode_ids.append(w * 1_000_000 + slot.episode_counter)
            buf.vel_errors.append(float(raw[-4]))  # e_vbar slot of the observation
            if done:
                failed = bool(info.get("failure"))
                # failure ends the value chain; truncation bootstraps the critic
                buf.next_values.append(0.0 if failed else value_of(state, nxt))
                episodes.append((slot.episode_return, slot.episode_len, failed))
                slot.episode_counter += 1
                slot.obs = slot.env.reset()
                slot.episode_return = 0.0
                slot.episode_len = 0
            else:
                buf.next_values.append(np.nan)  # filled from values[t+1] below
                slot.obs = nxt
        # close the segment: bootstrap the cut-off transition
        if not buf.dones[-1]:
            buf.next_values[-1] = value_of(state, slot.obs)
        # interior steps bootstrap with the next stored value
        for t in range(segment_start, len(buf) - 1):
            if np.isnan(buf.next_values[t]):
                buf.next_values[t] = buf.values[t + 1]
    return buf, episodes


def make_trainer_state(obs_dim: int, action_scale: np.ndarray, cfg: PpoConfig, seed: int
                       ) -> tuple[PpoState, list[np.random.Generator], np.random.Generator]:
    """Networks, optimizer states, normalizer, per-worker and update rng streams."""
    seeds = np.random.SeedSequence(seed).spawn(cfg.workers + 2)
    net_rng = np.random.default_rng(seeds[0])
    update_rng = np.random.default_rng(seeds[1])
    worker_rngs = [np.random.default_rng(s) for s in seeds[2:]]
    policy = build_policy(obs_dim, action_scale, cfg.action_std, net_rng, cfg.hidden)
    value_net = build_value_net(obs_dim, net_rng, cfg.hidden)
    state = PpoState(
        policy=policy,
        value_net=value_net,
        normalizer=RunningNormalizer(dim=obs_dim),
        policy_adam=init_adam(policy.net, lr=cfg.lr),
        value_adam=init_adam(value_net, lr=cfg.lr),
    )
    return state, worker_rngs, update_rng


def train_policy(env_factory, cfg: PpoConfig, seed: int,
                 checkpoint_fn=None, log_fn=None) -> TrainResult:
    """Run PPO: alternate deterministic collection phases and updates.

    `env_factory(worker_index)` builds one environment per logical worker.
    `checkpoint_fn(state)` is called every `checkpoint_every` iterations and
    at the end; `log_fn(row_dict)` after every iteration.
    """
    probe_env = env_factory(0)
    obs_dim = probe_env.obs_dim
    state, worker_rngs, update_rng = make_trainer_state(
        obs_dim, PolicyAction.scale(), cfg, seed)

    slots = []
    for w in range(cfg.workers):
        env = probe_env if w == 0 else env_factory(w)
        slot = WorkerSlot(env=env, rng=worker_rngs[w])
        slot.obs = env.reset(seed=seed * 100_003 + w)
        slots.append(slot)

    curves: list[tuple[int, int, float, float, float]] = []
    last_return = 0.0
    last_len = 0.0
    for it in range(1, cfg.iterations + 1):
        buf, episodes = collect_phase(state, slots, cfg.steps_per_worker)
        data = buf.arrays()
        state.env_steps += len(buf)

        # advantages per worker segment, then one concatenated update batch
        advs, rets = [], []
        for w in range(cfg.workers):
            lo = w * cfg.steps_per_worker
            hi = lo + cfg.steps_per_worker
            a, r = gae_advantages(data["rewards"][lo:hi], data["values"][lo:hi],
                                  data["dones"][lo:hi], data["next_values"][lo:hi],
                                  cfg.gamma, cfg.lam)
            advs.append(a)
            rets.append(r)
        data["advantages"] = np.concatenate(advs)
        data["returns"] = np.concatenate(rets)

        stats = ppo_update(state, data, cfg, update_rng)
        # normalizer absorbs this phase's raw observations for the next one
        state.normalizer.update(data["raw_obs"])
        state.iteration = it

        if episodes:
            last_return = float(np.mean([e[0] for e in episodes]))
            last_len = float(np.mean([e[1] for e in episodes]))
        speed_rmse = float(np.sqrt(np.mean(data["vel_errors"] ** 2)))
        curves.append((it, state.env_steps, last_return, last_len, speed_rmse))
        if log_fn is not None:
            log_fn({"iteration": it, "steps": state.env_steps,
                    "mean_return": last_return, "mean_ep_len": last_len,
                    "speed_rmse": speed_rmse, "policy_loss": stats.policy_loss,
                    "value_loss": stats.value_loss, "kl": stats.approx_kl,
                    "clip_fraction": stats.clip_fraction})
        if checkpoint_fn is not None and (it % cfg.checkpoint_every == 0
                                          or it == cfg.iterations):
            checkpoint_fn(state)
    return TrainResult(state=state, curves=curves)


# -- checkpoint container -----------------------------------------------------

def file_sha256(path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as f:
        h.update(f.read())
    return h.hexdigest()


def save_policy(state: PpoState, container_path, sidecar_path,
                encoder_hash: str, latent_dim: int) -> None:
    nets.save_mlps(container_path, [state.policy.net, state.value_net])
    sidecar = {
        "action_scale": state.policy.action_scale.tolist(),
        "action_std": state.policy.action_std.tolist(),
        "normalizer": state.normalizer.state_dict(),
        "encoder_sha256": encoder_hash,
        "latent_dim": latent_dim,
        "iteration": state.iteration,
        "env_steps": state.env_steps,
    }
    with open(sidecar_path, "w") as f:
        json.dump(sidecar, f, indent=2, sort_keys=True)
        f.write("\n")


@dataclass
class PolicyCheckpoint:
    policy: GaussianTanhPolicy
    value_net: MlpParams
    normalizer: RunningNormalizer
    encoder_hash: str
    latent_dim: int

    def act(self, raw_obs: np.ndarray) -> np.ndarray:
        """Deterministic action from a raw observation."""
        return self.policy.mean_action(self.normalizer.normalize(raw_obs))


def load_policy(container_path, sidecar_path) -> PolicyCheckpoint:
    try:
        with open(sidecar_path) as f:
            sidecar = json.load(f)
    except (OSError, json.JSONDecodeError) as exc:
        raise FormatError(f"cannot read policy sidecar {sidecar_path}: {exc}") from exc
    policy_net, value_net = nets.load_mlps(container_path, 2)
    policy = GaussianTanhPolicy(
        net=policy_net,
        action_scale=np.array(sidecar["action_scale"], dtype=float),
        action_std=np.array(sidecar["action_std"], dtype=float),
    )
    return PolicyCheckpoint(
        policy=policy,
        value_net=value_net,
        normalizer=RunningNormalizer.from_state(sidecar["normalizer"]),
        encoder_hash=str(sidecar["encoder_sha256"]),
        latent_dim=int(sidecar["latent_dim"]),
    )

"""Evaluation scenarios: velocity tracking, latent structure, disturbances,
out-of-distribution base heights, action comparison.

Every scenario writes plot-ready trace CSVs; all reported metrics are then
recomputed from those files, so the report is a pure function of the traces.
"""

from __future__ import annotations

import hashlib
import io
import json
import os
from dataclasses import dataclass, field

import numpy as np

from . import planner, sim, walking
from .autoencoder import AutoencoderModel, encode
from .control import ControlGains, GaitSchedule, PolicyAction
from .env import EnvConfig
from .errors import DataError, LatentGaitError, RangeError
from .ppo import PolicyCheckpoint
from .sim import Disturbance, RobotModel
from .walking import WalkingCore


# -- profiles -----------------------------------------------------------------

@dataclass
class ProfileSegment:
    value: float
    duration: float
    ramp: float = 0.0  # s, linear blend from the previous value


@dataclass
class VelocityProfile:
    segments: list[ProfileSegment]

    def __post_init__(self) -> None:
        if not self.segments or sum(s.duration for s in self.segments) <= 0:
            raise RangeError("profile needs positive total duration")

    @property
    def duration(self) -> float:
        return sum(s.duration for s in self.segments)

    def value_at(self, t: float) -> float:
        prev = self.segments[0].value
        start = 0.0
        for seg in self.segments:
            if t < start + seg.duration or seg is self.segments[-1]:
                if seg.ramp > 0.0 and t - start < seg.ramp:
                    frac = max(t - start, 0.0) / seg.ramp
                    return prev + (seg.value - prev) * frac
                return seg.value
            start += seg.duration
            prev = seg.value
        return self.segments[-1].value

    def segment_windows(self) -> list[tuple[float, float, float]]:
        """(start, end, value) per segment."""
        out = []
        start = 0.0
        for seg in self.segments:
            out.append((start, start + seg.duration, seg.value))
            start += seg.duration
        return out


def constant_profile(value: float, duration: float) -> VelocityProfile:
    return VelocityProfile([ProfileSegment(value, duration)])


HeightProfile = VelocityProfile  # same segment structure, values in metres


def height_ref_from_profile(profile: HeightProfile, ramp_default: float = 0.5):
    """Piecewise height reference with finite-rate ramps and its derivative."""
    def ref(t: float) -> tuple[float, float]:
        eps = 1e-4
        h = profile.value_at(t)
        hdot = (profile.value_at(t + eps) - profile.value_at(max(t - eps, 0.0))) / (2 * eps)
        return h, hdot
    return ref


# -- controllers behind one interface ------------------------------------------

@dataclass
class TriggeredPush:
    """Disturbance armed at a wall-clock time but fired at the next
    mid-stance moment (phase >= half the step), so pushes land at a
    comparable gait phase across runs."""

    force: float
    duration: float
    arm_time: float
    phase_fraction: float = 0.5


class BaselineController:
    """ALIP dead-beat planner adapted to the trace-runner interface."""

    name = "baseline"

    def __init__(self, model: RobotModel, schedule: GaitSchedule | None = None):
        sched = schedule or GaitSchedule()
        self.model = model
        self.lip = planner.LipParams(height=model.nominal_base_height,
                                     step_duration=sched.step_duration)
        self.prev_action = np.zeros(2)

    def reset(self) -> None:
        self.prev_action = np.zeros(2)

    def act(self, core: WalkingCore, v_des: float) -> PolicyAction:
        act = planner.baseline_action(core.state, v_des, core.state.phase,
                                      self.lip, self.model)
        self.prev_action = act.as_array()
        return act

    def latent(self, core: WalkingCore, encoder: AutoencoderModel | None) -> np.ndarray:
        if encoder is None:
            return np.zeros(0)
        return encode(encoder, core.stance_features())


class PolicyController:
    """Trained policy checkpoint + frozen encoder."""

    name = "policy"

    def __init__(self, checkpoint: PolicyCheckpoint, encoder: AutoencoderModel):
        self.checkpoint = checkpoint
        self.encoder = encoder
        self.prev_action = np.zeros(2)

    def reset(self) -> None:
        self.prev_action = np.zeros(2)

    def act(self, core: WalkingCore, v_des: float) -> PolicyAction:
        z = encode(self.encoder, core.stance_features())
        vbar = core.average_velocity()
        raw = np.concatenate((z, [vbar - v_des], [v_des], self.prev_action))
        a = self.checkpoint.act(raw)
        action = PolicyAction.clipped(float(a[0]), float(a[1]))
        self.prev_action = action.as_array()
        return action

    def latent(self, core: WalkingCore, encoder: AutoencoderModel | None) -> np.ndarray:
        enc = encoder or self.encoder
        return encode(enc, core.stance_features())


# -- trace runner ---------------------------------------------------------------

# stance_leg is 0 for left, 1 for right; touchdown counts events in the step
TRACE_COLUMNS = ["t", "v_des", "vbar", "v_inst", "base_height", "stance_leg",
                 "action_swing_x", "action_dv", "touchdown"]


def run_trace(model: RobotModel, controller, profile: VelocityProfile, seed: int,
              encoder: AutoencoderModel | None = None,
              height_ref=None,
              disturbance: Disturbance | TriggeredPush | None = None,
              env_config: EnvConfig | None = None,
              gains: ControlGains | None = None) -> dict:
    """Closed-loop rollout over a velocity profile, sampled at the policy rate.

    Returns a column dict (including per-step latents when an encoder is
    given), survival time, and the fall flag. Falls end the trace early but
    are data, not errors.
    """
    cfg = env_config or EnvConfig()
    rng = np.random.default_rng(seed)
    core = WalkingCore(model=model, gains=gains or ControlGains())
    st = sample_initial_state(model, rng, cfg.joint_noise, cfg.velocity_noise)
    core.reset(st)
    controller.reset()
    n_steps = int(round(profile.duration * cfg.policy_rate))
    latent_dim = encoder.latent_dim if encoder is not None else (
        controller.encoder.latent_dim if isinstance(controller, PolicyController) else 0)
    cols: dict = {name: [] for name in TRACE_COLUMNS}
    for d in range(latent_dim):
        cols[f"z{d}"] = []
    pending_push = disturbance if isinstance(disturbance, TriggeredPush) else None
    active = disturbance if isinstance(disturbance, Disturbance) else None
    fell = False
    for k in range(n_steps):
        t = core.state.time
        v_des = profile.value_at(t)
        if pending_push is not None and t >= pending_push.arm_time \
                and core.state.phase >= pending_push.phase_fraction \
                * core.schedule.step_duration:
            active = Disturbance(force=pending_push.force,
                                 start=t, duration=pending_push.duration)
            pending_push = None
        z = controller.latent(core, encoder)
        try:
            action = controller.act(core, v_des)
            ev = core.run_substeps(action, v_des, cfg.substeps,
                                   disturbance=active, height_ref=height_ref)
        except LatentGaitError:
            fell = True
            break
        cols["t"].append(t)
        cols["v_des"].append(v_des)
        cols["vbar"].append(core.average_velocity())
        cols["v_inst"].append(float(core.state.dq[0]))
        cols["base_height"].append(float(core.state.q[1]))
        cols["stance_leg"].append(0 if core.state.stance_leg == sim.LEFT else 1)
        cols["action_swing_x"].append(action.swing_target_x)
        cols["action_dv"].append(action.velocity_offset)
        cols["touchdown"].append(len(ev.touchdown_times))
        for d in range(latent_dim):
            cols[f"z{d}"].append(float(z[d]) if z.size else 0.0)
        if walking.is_fallen(core.state, cfg.pitch_limit, cfg.min_base_height):
            fell = True
            break
    return {"columns": {k: np.asarray(v) for k, v in cols.items()},
            "fell": fell,
            "survival_time": float(core.state.time)}


def sample_initial_state(model: RobotModel, rng: np.random.Generator,
                         joint_noise: float, velocity_noise: float):
    """Noisy standing pose re-seated on the stance weld (shared with the env)."""
    st = sim.standing_pose(model)
    st.q[2:] += rng.normal(0.0, joint_noise, 7)
    st.dq[:] = rng.normal(0.0, velocity_noise, 9)
    kin = sim._kin(model, st.q, st.dq)
    pt, _ = sim._stance_indices(st.stance_leg)
    st.q[0] -= kin.pos[pt, 0]
    st.q[1] -= kin.pos[pt, 1]
    q, dq, _ = sim._project_to_manifold(model, st.q, st.dq, st.stance_leg, 0.0)
    return sim.RobotState(q, dq, st.stance_leg, 0.0, 0.0, 0.0)


def write_trace_csv(trace: dict, path) -> None:
    cols = trace["columns"]
    names = list(cols.keys())
    buf = io.StringIO()
    buf.write(",".join(names) + "\n")
    n = len(cols["t"])
    for k in range(n):
        buf.write(",".join(repr(float(cols[name][k])) for name in names) + "\n")
    with open(path, "w") as f:
        f.write(buf.getvalue())


def read_trace_csv(path) -> dict:
    with open(path) as f:
        lines = f.read().splitlines()
    names = lines[0].split(",")
    rows = [[float(cell) for cell in ln.split(",")] for ln in lines[1:]]
    arr = np.asarray(rows) if rows else np.zeros((0, len(names)))
    return {name: arr[:, i] for i, name in enumerate(names)}


def param_hash(*parts) -> str:
    text = "|".join(str(p) for p in parts)
    return hashlib.sha256(text.encode()).hexdigest()[:12]


# -- metrics (pure functions of trace columns) ----------------------------------

def tracking_metrics(cols: dict, profile: VelocityProfile) -> dict:
    """Per-segment steady-state error (last 50% of the segment) plus overall
    RMSE of the average velocity against the command."""
    t = cols["t"]
    err = cols["vbar"] - cols["v_des"]
    segments = []
    for start, end, value in profile.segment_windows():
        window = (t >= start + 0.5 * (end - start)) & (t < end)
        if window.any():
            seg_err = float(np.mean(cols["vbar"][window]) - value)
        else:
            seg_err = float("nan")
        segments.append({"start": start, "end": end, "v_des": value,
                         "steady_state_error": seg_err})
    rmse = float(np.sqrt(np.mean(err**2))) if err.size else float("nan")
    return {"segments": segments, "rmse": rmse}


def pca_project(samples: np.ndarray, out_dims: int = 2
                ) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Principal components of the sample covariance.

    Components are orthonormal rows sorted by descending variance, with the
    sign fixed so each component's largest-magnitude entry is positive.
    """
    x = np.asarray(samples, dtype=float)
    if x.ndim != 2 or x.shape[0] <= out_dims:
        raise DataError(f"need more than {out_dims} samples, got shape {x.shape}")
    centered = x - x.mean(axis=0)
    cov = centered.T @ centered / (x.shape[0] - 1)
    if float(np.trace(cov)) < 1e-24:
        raise DataError("degenerate data: zero variance in every direction")
    evals, evecs = np.linalg.eigh(cov)
    order = np.argsort(evals)[::-1][:out_dims]
    comps = evecs[:, order].T
    for row in comps:
        if row[np.argmax(np.abs(row))] < 0:
            row *= -1.0
    return centered @ comps.T, comps, np.maximum(evals[order], 0.0)


def ols_r2(features: np.ndarray, targets: np.ndarray,
           fit_mask: np.ndarray | None = None,
           eval_mask: np.ndarray | None = None) -> float | None:
    """R^2 of an ordinary-least-squares fit (with intercept), evaluated on
    `eval_mask` rows. None when the evaluated targets have no variance."""
    x = np.asarray(features, dtype=float)
    y = np.asarray(targets, dtype=float)
    fit = np.ones(len(y), bool) if fit_mask is None else fit_mask
    ev = np.ones(len(y), bool) if eval_mask is None else eval_mask
    a = np.column_stack((x, np.ones(len(y))))
    coef, *_ = np.linalg.lstsq(a[fit], y[fit], rcond=None)
    pred = a[ev] @ coef
    ss_tot = float(np.sum((y[ev] - y[ev].mean()) ** 2))
    if ss_tot < 1e-18:
        return None
    ss_res = float(np.sum((y[ev] - pred) ** 2))
    return 1.0 - ss_res / ss_tot


# -- scenarios -------------------------------------------------------------------

@dataclass
class EvalReport:
    scenarios: dict = field(default_factory=dict)

    def to_json(self) -> str:
        return json.dumps(self.scenarios, indent=2, sort_keys=True) + "\n"

    def save(self, path) -> None:
        with open(path, "w") as f:
            f.write(self.to_json())


def _scenario_dir(out_dir, name: str) -> str:
    d = os.path.join(out_dir, name)
    os.makedirs(d, exist_ok=True)
    return d


def velocity_tracking_eval(model: RobotModel, controller, profile: VelocityProfile,
                           seed: int, out_dir, encoder: AutoencoderModel | None = None,
                           env_config: EnvConfig | None = None) -> dict:
    trace = run_trace(model, controller, profile, seed, encoder=encoder,
                      env_config=env_config)
    d = _scenario_dir(out_dir, "velocity")
    path = os.path.join(d, f"{param_hash(controller.name, profile.segments, seed)}.csv")
    write_trace_csv(trace, path)
    cols = read_trace_csv(path)
    metrics = tracking_metrics(cols, profile)
    metrics.update({"trace": path, "fell": trace["fell"],
                    "survival_time": trace["survival_time"],
                    "controller": controller.name, "seed": seed})
    return metrics


def latent_structure_report(model: RobotModel, controller,
                            encoder: AutoencoderModel, speeds, seed: int, out_dir,
                            seconds_per_speed: float = 10.0,
                            holdout_speeds=(), env_config: EnvConfig | None = None
                            ) -> dict:
    """Collect per-speed latent clouds, fit speed from z by OLS, and contrast
    with a 2-component PCA of the raw full-order states."""
    d = _scenario_dir(out_dir, "latent")
    flagged = []
    cloud_paths = {}
    raw_rows, raw_labels = [], []
    for v in speeds:
        trace = run_trace(model, controller, constant_profile(v, seconds_per_speed),
                          seed, encoder=encoder, env_config=env_config)
        if trace["fell"]:
            flagged.append(v)
            continue
        cols = trace["columns"]
        z = np.column_stack([cols[f"z{k}"] for k in range(encoder.latent_dim)])
        path = os.path.join(d, f"cloud_{param_hash(controller.name, v, seed)}.csv")
        buf = io.StringIO()
        buf.write(",".join(f"z{k}" for k in range(encoder.latent_dim)) + ",v_des\n")
        for row in z:
            buf.write(",".join(repr(float(x)) for x in row) + f",{v!r}\n")
        with open(path, "w") as f:
            f.write(buf.getvalue())
        cloud_paths[str(v)] = path
        # raw full-order states for the contrast, from a rerun of the scenario
        raw = _raw_state_matrix(model, controller, v, seconds_per_speed, seed,
                                env_config)
        raw_rows.append(raw)
        raw_labels.append(np.full(raw.shape[0], v))

    if not cloud_paths:
        return {"error": "every probe speed fell", "flagged_speeds": flagged}
    # metrics are recomputed from the emitted cloud files
    zs, labels = [], []
    for path in cloud_paths.values():
        cols = read_trace_csv(path)
        zs.append(np.column_stack([cols[f"z{k}"] for k in range(encoder.latent_dim)]))
        labels.append(cols["v_des"])
    z_all = np.concatenate(zs)
    y_all = np.concatenate(labels)
    holdout = np.isin(y_all, np.asarray(holdout_speeds)) if len(holdout_speeds) else None
    if holdout is not None and holdout.any() and not holdout.all():
        fit_mask, eval_mask = ~holdout, holdout
    else:
        fit_mask = eval_mask = None
    r2_latent = ols_r2(z_all, y_all, fit_mask, eval_mask) \
        if np.unique(y_all).size >= 2 else None

    # raw-state decodability under the identical regression protocol
    raw_r2 = None
    if raw_rows:
        raw_all = np.concatenate(raw_rows)
        ry = np.concatenate(raw_labels)
        if np.unique(ry).size >= 2:
            proj, _, _ = pca_project(raw_all, 2)
            rh = np.isin(ry, np.asarray(holdout_speeds)) if len(holdout_speeds) else None
            if rh is not None and rh.any() and not rh.all():
                raw_r2 = ols_r2(proj, ry, ~rh, rh)
            else:
                raw_r2 = ols_r2(proj, ry)
    return {"r2_latent": r2_latent, "r2_raw_pca": raw_r2, "clouds": cloud_paths,
            "flagged_speeds": flagged, "holdout_speeds": list(holdout_speeds),
            "controller": controller.name, "seed": seed}


def _raw_state_matrix(model, controller, v, seconds, seed, env_config) -> np.ndarray:
    """Stance-frame full-order states along a rerun of the same scenario."""
    cfg = env_config or EnvConfig()
    rng = np.random.default_rng(seed)
    core = WalkingCore(model=model)
    core.reset(sample_initial_state(model, rng, cfg.joint_noise, cfg.velocity_noise))
    controller.reset()
    rows = []
    for k in range(int(round(seconds * cfg.policy_rate))):
        action = controller.act(core, v)
        core.run_substeps(action, v, cfg.substeps)
        rows.append(core.stance_features())
        if walking.is_fallen(core.state, cfg.pitch_limit, cfg.min_base_height):
            break
    return np.asarray(rows)


def disturbance_eval(model: RobotModel, controller, forces, durations, seeds,
                     out_dir, v_des: float = 0.5, apply_after: float = 4.0,
                     settle: float = 4.0, encoder: AutoencoderModel | None = None,
                     env_config: EnvConfig | None = None) -> dict:
    """Survival table over a force x duration grid at a fixed commanded speed.

    Pushes are armed at `apply_after` and fire at the next mid-stance. The
    table records outcomes only: survival is deliberately not assumed (or
    asserted) monotone in force or duration, the dynamics are not.
    """
    d = _scenario_dir(out_dir, "disturbance")
    rows = []
    for force in forces:
        for duration in durations:
            survived = 0
            max_dev = 0.0
            for seed in seeds:
                total = apply_after + duration + settle
                push = TriggeredPush(force=force, duration=duration,
                                     arm_time=apply_after)
                trace = run_trace(model, controller, constant_profile(v_des, total),
                                  seed, encoder=encoder, disturbance=push,
                                  env_config=env_config)
                path = os.path.join(
                    d, f"{param_hash(controller.name, force, duration, seed)}.csv")
                write_trace_csv(trace, path)
                cols = read_trace_csv(path)
                if not trace["fell"]:
                    survived += 1
                after = cols["t"] >= apply_after
                if after.any():
                    dev = float(np.max(np.abs(cols["vbar"][after] - v_des)))
                    max_dev = max(max_dev, dev)
            rows.append({"force": force, "duration": duration,
                         "trials": len(list(seeds)), "survived": survived,
                         "max_speed_deviation": max_dev})
    return {"table": rows, "v_des": v_des, "apply_after": apply_after,
            "controller": controller.name}


def ood_height_eval(model: RobotModel, controller, height_profile: HeightProfile,
                    v_des: float, seed: int, out_dir,
                    encoder: AutoencoderModel | None = None,
                    env_config: EnvConfig | None = None) -> dict:
    """Track a fixed speed while the commanded base height steps through the
    profile; reports the speed error per height plateau."""
    d = _scenario_dir(out_dir, "ood_height")
    ref = height_ref_from_profile(height_profile)
    vel_profile = constant_profile(v_des, height_profile.duration)
    trace = run_trace(model, controller, vel_profile, seed, encoder=encoder,
                      height_ref=ref, env_config=env_config)
    path = os.path.join(d, f"{param_hash(controller.name, v_des, seed)}.csv")
    write_trace_csv(trace, path)
    cols = read_trace_csv(path)
    segments = []
    for start, end, height in height_profile.segment_windows():
        window = (cols["t"] >= start + 0.5 * (end - start)) & (cols["t"] < end)
        if window.any():
            err = float(np.mean(cols["vbar"][window]) - v_des)
            got_h = float(np.mean(cols["base_height"][window]))
        else:
            err, got_h = float("nan"), float("nan")
        segments.append({"height": height, "start": start, "end": end,
                         "steady_state_speed_error": err, "mean_height": got_h})
    return {"trace": path, "segments": segments, "fell": trace["fell"],
            "v_des": v_des, "controller": controller.name}


def action_comparison(model: RobotModel, policy_ctl, baseline_ctl, speeds,
                      seed: int, out_dir, seconds: float = 10.0,
                      encoder: AutoencoderModel | None = None,
                      env_config: EnvConfig | None = None) -> dict:
    """Phase-aligned swing-target traces for both controllers at probe speeds."""
    d = _scenario_dir(out_dir, "actions")
    out = {"speeds": {}, "probe_speeds": list(speeds)}
    for v in speeds:
        per_ctl = {}
        for ctl in (policy_ctl, baseline_ctl):
            trace = run_trace(model, ctl, constant_profile(v, seconds), seed,
                              encoder=encoder, env_config=env_config)
            cols = trace["columns"]
            # phase-align: time since the most recent touchdown
            phase = np.zeros(len(cols["t"]))
            last_td = cols["t"][0] if len(cols["t"]) else 0.0
            for k in range(len(cols["t"])):
                if cols["touchdown"][k] > 0:
                    last_td = cols["t"][k]
                phase[k] = cols["t"][k] - last_td
            path = os.path.join(d, f"{param_hash(ctl.name, v, seed)}.csv")
            buf = io.StringIO()
            buf.write("t,phase,action_swing_x,touchdown\n")
            for k in range(len(cols["t"])):
                buf.write(f"{float(cols['t'][k])!r},{float(phase[k])!r},"
                          f"{float(cols['action_swing_x'][k])!r},"
                          f"{float(cols['touchdown'][k])!r}\n")
            with open(path, "w") as f:
                f.write(buf.getvalue())
            per_ctl[ctl.name] = {"trace": path, "fell": trace["fell"]}
        # mean landing offset difference over matched steps, from the files
        diffs = _landing_offsets_diff(per_ctl[policy_ctl.name]["trace"],
                                      per_ctl[baseline_ctl.name]["trace"])
        out["speeds"][str(v)] = {**per_ctl, "mean_landing_difference": diffs}
    return out


def _landing_offsets_diff(path_a, path_b) -> float:
    """Mean |difference| of swing targets sampled just before each touchdown."""
    def landings(path):
        cols = read_trace_csv(path)
        td = cols["touchdown"] > 0
        idx = np.flatnonzero(td)
        idx = idx[idx > 0]
        return cols["action_swing_x"][idx - 1]

    a, b = landings(path_a), landings(path_b)
    n = min(a.size, b.size)
    if n == 0:
        return float("nan")
    return float(np.mean(np.abs(a[:n] - b[:n])))

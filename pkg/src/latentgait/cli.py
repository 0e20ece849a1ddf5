"""Pipeline entry point: collect | train-ae | train-policy | eval | reconstruct.

Exit codes: 0 ok, 1 usage, 2 configuration/artifact-format problems,
3 runtime failures.
"""

from __future__ import annotations

import argparse
import io
import json
import logging
import os
import sys
import tempfile

from . import __version__
from . import dataset as ds
from .autoencoder import (AeConfig, TrainingHistory, load_autoencoder,
                          reconstruction_report, save_autoencoder, train_autoencoder,
                          write_overlay_csv, write_report_csv)
from .config import ExperimentConfig, load_config
from .env import WalkingEnv
from .errors import (CompatibilityError, ConfigError, FormatError, LatentGaitError)
from .evals import (BaselineController, EvalReport, HeightProfile, PolicyController,
                    ProfileSegment, VelocityProfile, action_comparison,
                    disturbance_eval, latent_structure_report, ood_height_eval,
                    velocity_tracking_eval)
from .ppo import PpoState, file_sha256, load_policy, save_policy, train_policy

log = logging.getLogger("latentgait")

EXIT_OK = 0
EXIT_USAGE = 1
EXIT_CONFIG = 2
EXIT_RUNTIME = 3

SCENARIOS = ("velocity", "latent", "disturbance", "ood-height", "actions")


class _Parser(argparse.ArgumentParser):
    def error(self, message):  # usage problems exit 1, not argparse's 2
        self.print_usage(sys.stderr)
        print(f"{self.prog}: error: {message}", file=sys.stderr)
        raise SystemExit(EXIT_USAGE)


def atomic_write_text(path, text: str) -> None:
    d = os.path.dirname(os.path.abspath(path))
    fd, tmp = tempfile.mkstemp(dir=d, suffix=".tmp")
    try:
        with os.fdopen(fd, "w") as f:
            f.write(text)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def atomic_write_bytes(path, blob: bytes) -> None:
    d = os.path.dirname(os.path.abspath(path))
    fd, tmp = tempfile.mkstemp(dir=d, suffix=".tmp")
    try:
        with os.fdopen(fd, "wb") as f:
            f.write(blob)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def _capture_file(write_fn) -> bytes:
    """Run a path-taking writer into memory for atomic persistence."""
    fd, tmp = tempfile.mkstemp(suffix=".capture")
    os.close(fd)
    try:
        write_fn(tmp)
        with open(tmp, "rb") as f:
            return f.read()
    finally:
        if os.path.exists(tmp):
            os.unlink(tmp)


def atomic_save_pair(save_fn, path_a, path_b) -> None:
    """Atomically persist a writer that produces two files."""
    tmp_a, tmp_b = str(path_a) + ".tmp", str(path_b) + ".tmp"
    try:
        save_fn(tmp_a, tmp_b)
        os.replace(tmp_a, path_a)
        os.replace(tmp_b, path_b)
    finally:
        for tmp in (tmp_a, tmp_b):
            if os.path.exists(tmp):
                os.unlink(tmp)


def write_run_metadata(out_dir, cfg: ExperimentConfig, command: str, seed: int) -> None:
    os.makedirs(out_dir, exist_ok=True)
    atomic_write_text(os.path.join(out_dir, "config.resolved.json"), cfg.to_json())
    info = {"tool": "latentgait", "version": __version__, "command": command,
            "seed": seed}
    atomic_write_text(os.path.join(out_dir, "run_info.json"),
                      json.dumps(info, indent=2, sort_keys=True) + "\n")


def cmd_collect(cfg: ExperimentConfig, out_dir: str, seed: int, csv_mirror: bool) -> int:
    write_run_metadata(out_dir, cfg, "collect", seed)
    model = cfg.model.build()
    sec = cfg.dataset
    data = ds.collect_gaits(model,
                            velocity_grid=sec.velocity_grid(),
                            duration_per_gait=sec.duration_per_gait,
                            rate=sec.rate, seed=seed, warmup=sec.warmup,
                            gains=cfg.control.gains(),
                            schedule=cfg.control.schedule(),
                            min_success_fraction=sec.min_success_fraction)
    blob = _capture_file(lambda p: ds.save_dataset(data, p))
    atomic_write_bytes(os.path.join(out_dir, "dataset.lgds"), blob)
    if csv_mirror:
        text = _capture_file(lambda p: ds.export_csv(data, p))
        atomic_write_bytes(os.path.join(out_dir, "dataset.csv"), text)
    log.info("collected %d samples across %d gaits", data.n_samples,
             len(set(data.labels.tolist())))
    print(f"dataset: {data.n_samples} samples -> {os.path.join(out_dir, 'dataset.lgds')}")
    return EXIT_OK


def history_csv(history: TrainingHistory) -> str:
    buf = io.StringIO()
    buf.write("epoch,train_loss,val_loss\n")
    for k, (tr, va) in enumerate(zip(history.train_loss, history.val_loss)):
        buf.write(f"{k},{tr!r},{va!r}\n")
    return buf.getvalue()


def timing_csv(history: TrainingHistory) -> str:
    buf = io.StringIO()
    buf.write("epoch,wall_time_s\n")
    for k, w in enumerate(history.wall_time):
        buf.write(f"{k},{w!r}\n")
    return buf.getvalue()


def cmd_train_ae(cfg: ExperimentConfig, dataset_path: str, out_dir: str, seed: int) -> int:
    write_run_metadata(out_dir, cfg, "train-ae", seed)
    data = ds.load_dataset(dataset_path)
    train, val = ds.split(data, cfg.dataset.holdout_fraction, seed=seed)
    sec = cfg.autoencoder
    ae_cfg = AeConfig(latent_dim=sec.latent_dim, epochs=sec.epochs, lr=sec.lr,
                      batch_size=sec.batch_size, seed=seed)
    model, history = train_autoencoder(train, val, ae_cfg)
    container = os.path.join(out_dir, "autoencoder.lgnn")
    sidecar = os.path.join(out_dir, "autoencoder.json")
    atomic_save_pair(lambda a, b: save_autoencoder(model, a, b), container, sidecar)
    atomic_write_text(os.path.join(out_dir, "history.csv"), history_csv(history))
    atomic_write_text(os.path.join(out_dir, "timing.csv"), timing_csv(history))
    print(f"autoencoder: best val MSE {history.best_val:.6f} over {history.epochs} "
          f"epochs -> {container}")
    return EXIT_OK


def cmd_train_policy(cfg: ExperimentConfig, encoder_path: str, out_dir: str,
                     seed: int) -> int:
    write_run_metadata(out_dir, cfg, "train-policy", seed)
    sidecar_path = _sidecar_for(encoder_path)
    encoder = load_autoencoder(encoder_path, sidecar_path)
    encoder_hash = file_sha256(encoder_path)
    model = cfg.model.build()
    env_cfg = cfg.env.build()
    gains = cfg.control.gains()
    schedule_proto = cfg.control.schedule()

    def factory(worker: int) -> WalkingEnv:
        import dataclasses as dc
        return WalkingEnv(model, encoder, env_cfg, gains=gains,
                          schedule=dc.replace(schedule_proto))

    container = os.path.join(out_dir, "policy.lgnn")
    sidecar = os.path.join(out_dir, "policy.json")

    def checkpoint_fn(state: PpoState) -> None:
        atomic_save_pair(
            lambda a, b: save_policy(state, a, b, encoder_hash, encoder.latent_dim),
            container, sidecar)

    def log_fn(row: dict) -> None:
        log.info("iter %d steps %d return %.2f len %.1f rmse %.3f",
                 row["iteration"], row["steps"], row["mean_return"],
                 row["mean_ep_len"], row["speed_rmse"])

    result = train_policy(factory, cfg.ppo.build(), seed=seed,
                          checkpoint_fn=checkpoint_fn, log_fn=log_fn)
    atomic_write_text(os.path.join(out_dir, "curves.csv"), result.curve_csv())
    last = result.curves[-1]
    print(f"policy: {last[1]} env steps, final mean return {last[2]:.2f} -> {container}")
    return EXIT_OK


def _sidecar_for(container_path: str) -> str:
    base, _ = os.path.splitext(container_path)
    return base + ".json"


def _load_artifacts(cfg: ExperimentConfig, encoder_path: str, policy_path: str | None):
    encoder = load_autoencoder(encoder_path, _sidecar_for(encoder_path))
    model = cfg.model.build()
    policy_ctl = None
    if policy_path is not None:
        checkpoint = load_policy(policy_path, _sidecar_for(policy_path))
        actual = file_sha256(encoder_path)
        if checkpoint.encoder_hash != actual:
            raise CompatibilityError(
                f"policy was trained against encoder {checkpoint.encoder_hash[:12]}, "
                f"given encoder hashes to {actual[:12]}")
        policy_ctl = PolicyController(checkpoint, encoder)
    return model, encoder, policy_ctl


def _velocity_profile(sec) -> VelocityProfile:
    return VelocityProfile([ProfileSegment(float(v), float(d)) for v, d in
                            sec.velocity_profile])


def _height_profile(sec) -> HeightProfile:
    segs = [ProfileSegment(float(h), float(sec.height_segment_duration),
                           ramp=float(sec.height_ramp) if i > 0 else 0.0)
            for i, h in enumerate(sec.heights)]
    return HeightProfile(segs)


def cmd_eval(cfg: ExperimentConfig, encoder_path: str, policy_path: str | None,
             out_dir: str, seed: int, scenario: str) -> int:
    write_run_metadata(out_dir, cfg, "eval", seed)
    model, encoder, policy_ctl = _load_artifacts(cfg, encoder_path, policy_path)
    baseline = BaselineController(model, cfg.control.schedule())
    controller = policy_ctl if policy_ctl is not None else baseline
    env_cfg = cfg.env.build()
    sec = cfg.eval
    report = EvalReport()
    wanted = SCENARIOS if scenario == "all" else (scenario,)

    if "velocity" in wanted:
        profile = _velocity_profile(sec)
        velocity: dict = {
            controller.name: velocity_tracking_eval(model, controller, profile, seed,
                                                    out_dir, encoder=encoder,
                                                    env_config=env_cfg)}
        if controller is not baseline:
            velocity["baseline"] = velocity_tracking_eval(
                model, baseline, profile, seed, out_dir, encoder=encoder,
                env_config=env_cfg)
        report.scenarios["velocity"] = velocity
    if "latent" in wanted:
        report.scenarios["latent"] = latent_structure_report(
            model, controller, encoder, sec.probe_speeds, seed, out_dir,
            seconds_per_speed=sec.seconds_per_speed,
            holdout_speeds=tuple(sec.holdout_speeds), env_config=env_cfg)
    if "disturbance" in wanted:
        scale = model.total_mass / sec.force_reference_mass \
            if sec.scale_forces_by_mass else 1.0
        forces = [f * scale for f in sec.forces]
        report.scenarios["disturbance"] = disturbance_eval(
            model, controller, forces, sec.durations,
            seeds=range(sec.disturbance_seeds), out_dir=out_dir,
            v_des=sec.disturbance_v_des, apply_after=sec.apply_after,
            encoder=encoder, env_config=env_cfg)
    if "ood-height" in wanted:
        report.scenarios["ood_height"] = ood_height_eval(
            model, controller, _height_profile(sec), sec.ood_v_des, seed, out_dir,
            encoder=encoder, env_config=env_cfg)
    if "actions" in wanted:
        if policy_ctl is None:
            report.scenarios["actions"] = {"skipped": "needs a trained policy"}
        else:
            report.scenarios["actions"] = action_comparison(
                model, policy_ctl, baseline, sec.action_speeds, seed, out_dir,
                encoder=encoder, env_config=env_cfg)
    atomic_write_text(os.path.join(out_dir, "report.json"), report.to_json())
    print(f"eval report -> {os.path.join(out_dir, 'report.json')}")
    return EXIT_OK


def cmd_reconstruct(cfg: ExperimentConfig, encoder_path: str, dataset_path: str,
                    out_dir: str, seed: int) -> int:
    write_run_metadata(out_dir, cfg, "reconstruct", seed)
    encoder = load_autoencoder(encoder_path, _sidecar_for(encoder_path))
    data = ds.load_dataset(dataset_path)
    report = reconstruction_report(encoder, data)
    text = _capture_file(lambda p: write_report_csv(report, p))
    atomic_write_bytes(os.path.join(out_dir, "reconstruction.csv"), text)
    overlay = _capture_file(lambda p: write_overlay_csv(encoder, data, p))
    atomic_write_bytes(os.path.join(out_dir, "overlay.csv"), overlay)
    print(f"reconstruction: aggregate standardized MSE "
          f"{report.aggregate_standardized:.6f} -> {out_dir}")
    return EXIT_OK


def build_parser() -> _Parser:
    parser = _Parser(prog="latentgait",
                     description="Latent-state gait pipeline: collect, train, evaluate")
    parser.add_argument("--version", action="version", version=__version__)
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p):
        p.add_argument("--config", required=True, help="experiment config JSON")
        p.add_argument("--out", required=True, help="output directory")
        p.add_argument("--seed", type=int, default=None,
                       help="override the config's global seed")
        p.add_argument("--workers", type=int, default=1,
                       help="execution concurrency cap (collection runs sequentially)")

    p = sub.add_parser("collect", help="collect the baseline gait dataset")
    common(p)
    p.add_argument("--csv", action="store_true", help="also write a CSV mirror")

    p = sub.add_parser("train-ae", help="train the autoencoder")
    common(p)
    p.add_argument("--dataset", required=True, help="dataset .lgds file")

    p = sub.add_parser("train-policy", help="train the PPO gait policy")
    common(p)
    p.add_argument("--encoder", required=True, help="autoencoder .lgnn checkpoint")

    p = sub.add_parser("eval", help="run evaluation scenarios")
    common(p)
    p.add_argument("--encoder", required=True, help="autoencoder .lgnn checkpoint")
    p.add_argument("--policy", default=None,
                   help="policy .lgnn checkpoint (omit to evaluate the baseline)")
    p.add_argument("--scenario", default="all", choices=("all",) + SCENARIOS)

    p = sub.add_parser("reconstruct", help="reconstruction report for a dataset")
    common(p)
    p.add_argument("--encoder", required=True)
    p.add_argument("--dataset", required=True)
    return parser


def main(argv=None) -> int:
    logging.basicConfig(level=logging.INFO, format="%(levelname)s %(message)s")
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    try:
        cfg = load_config(args.config)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    seed = args.seed if args.seed is not None else cfg.seed
    try:
        if args.command == "collect":
            return cmd_collect(cfg, args.out, seed, args.csv)
        if args.command == "train-ae":
            return cmd_train_ae(cfg, args.dataset, args.out, seed)
        if args.command == "train-policy":
            return cmd_train_policy(cfg, args.encoder, args.out, seed)
        if args.command == "eval":
            return cmd_eval(cfg, args.encoder, args.policy, args.out, seed,
                            args.scenario)
        if args.command == "reconstruct":
            return cmd_reconstruct(cfg, args.encoder, args.dataset, args.out, seed)
        parser.error(f"unknown command {args.command}")
    except (ConfigError, FormatError, CompatibilityError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except LatentGaitError as exc:
        print(f"runtime error: {exc}", file=sys.stderr)
        return EXIT_RUNTIME
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())

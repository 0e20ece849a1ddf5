"""Gait dataset: collection via the baseline closed loop, standardization,
splitting, and the LGDS binary container."""

from __future__ import annotations

import io
import logging
import struct
from dataclasses import dataclass, replace

import numpy as np

from . import planner, sim, walking
from .control import ControlGains, GaitSchedule, STANCE_FRAME_FEATURES
from .errors import CollectionError, DataError, FormatError, RangeError
from .sim import RobotModel

log = logging.getLogger(__name__)

MAGIC = b"LGDS"
FORMAT_VERSION = 1

DEFAULT_VELOCITY_GRID = tuple(round(-0.5 + 0.1 * k, 1) for k in range(16))  # [-0.5, 1.0]


@dataclass
class StandardizerStats:
    mean: np.ndarray
    std: np.ndarray
    flagged: np.ndarray  # features whose raw std was ~0 (std forced to 1)


@dataclass
class GaitDataset:
    samples: np.ndarray  # [M, d] stance-frame states
    labels: np.ndarray  # [M] commanded forward velocity
    stats: StandardizerStats | None
    rate: float  # Hz
    provenance: str

    def __post_init__(self) -> None:
        self.samples = np.asarray(self.samples, dtype=float)
        self.labels = np.asarray(self.labels, dtype=float)
        if self.samples.ndim != 2 or self.samples.shape[0] == 0:
            raise DataError("samples must be a non-empty [M, d] matrix")
        if self.labels.shape != (self.samples.shape[0],):
            raise DataError("labels length must match sample count")

    @property
    def n_samples(self) -> int:
        return self.samples.shape[0]

    @property
    def n_features(self) -> int:
        return self.samples.shape[1]


SCALE_FLOOR = 0.01  # physical units; sub-centi wiggles are control noise


def fit_standardizer(samples: np.ndarray, scale_floor: float = SCALE_FLOOR
                     ) -> StandardizerStats:
    """Per-feature z-score statistics.

    Constant features are flagged and get unit scale so they standardize to
    zero. Features the controller regulates almost perfectly (std below the
    scale floor, e.g. base height held to 0.1 mm) keep the floor as their
    scale: raw z-scores of such features explode under physically tiny
    deviations, which defeats the point of bounding the encoder inputs.
    """
    samples = np.asarray(samples, dtype=float)
    if samples.ndim != 2 or samples.shape[0] < 2:
        raise DataError("standardizer needs at least two samples")
    mean = samples.mean(axis=0)
    std = samples.std(axis=0)
    flagged = std < 1e-8
    std = np.where(flagged, 1.0, np.maximum(std, scale_floor))
    return StandardizerStats(mean=mean, std=std, flagged=flagged)


def apply_standardizer(stats: StandardizerStats, samples: np.ndarray) -> np.ndarray:
    return (np.asarray(samples, dtype=float) - stats.mean) / stats.std


def invert_standardizer(stats: StandardizerStats, samples: np.ndarray) -> np.ndarray:
    return np.asarray(samples, dtype=float) * stats.std + stats.mean


def collect_gaits(model: RobotModel,
                  velocity_grid=DEFAULT_VELOCITY_GRID,
                  duration_per_gait: float = 10.0,
                  rate: float = 50.0,
                  seed: int = 0,
                  warmup: float = 2.0,
                  gains: ControlGains | None = None,
                  schedule: GaitSchedule | None = None,
                  min_success_fraction: float = 0.8) -> GaitDataset:
    """Run the baseline planner over a velocity grid and record stance-frame
    states at `rate` after a warm-up discard.

    A grid speed whose gait falls is logged and excluded; collection fails
    outright when fewer than `min_success_fraction` of the grid survives.
    """
    if not velocity_grid:
        raise DataError("empty velocity grid")
    control_rate = 1000.0
    substeps = int(round(control_rate / rate))
    if abs(control_rate / rate - substeps) > 1e-9:
        raise RangeError(f"control rate {control_rate} not divisible by sample rate {rate}")
    schedule = schedule or GaitSchedule()
    gains = gains or ControlGains()
    lip = planner.LipParams(height=model.nominal_base_height,
                            step_duration=schedule.step_duration)
    n_record = int(round(duration_per_gait * rate))
    n_warmup = int(round(warmup * rate))

    all_samples: list[np.ndarray] = []
    all_labels: list[float] = []
    failed: list[float] = []
    for gait_idx, v_des in enumerate(velocity_grid):
        core = walking.WalkingCore(model=model, gains=gains,
                                   schedule=replace(schedule))
        core.reset(sim.standing_pose(model))
        rows = np.empty((n_record, 18))
        ok = True
        try:
            for k in range(n_warmup + n_record):
                act = planner.baseline_action(core.state, v_des, core.state.phase,
                                              lip, model)
                core.run_substeps(act, v_des, substeps)
                if walking.is_fallen(core.state):
                    ok = False
                    break
                if k >= n_warmup:
                    rows[k - n_warmup] = core.stance_features()
        except Exception as exc:  # dynamics/control blowup counts as a fall
            log.warning("gait v=%.2f aborted: %s", v_des, exc)
            ok = False
        if ok:
            all_samples.append(rows)
            all_labels.extend([v_des] * n_record)
        else:
            failed.append(v_des)
            log.warning("collection warning: grid speed %.2f m/s fell, excluded", v_des)

    n_ok = len(velocity_grid) - len(failed)
    if n_ok < min_success_fraction * len(velocity_grid) or n_ok == 0:
        raise CollectionError(
            f"only {n_ok}/{len(velocity_grid)} grid speeds survived "
            f"(failed: {sorted(failed)})")
    samples = np.concatenate(all_samples, axis=0)
    labels = np.array(all_labels)
    prov = (f"controller=alip-deadbeat seed={seed} rate={rate} warmup={warmup} "
            f"duration={duration_per_gait} grid={list(velocity_grid)} "
            f"failed={sorted(failed)}")
    ds = GaitDataset(samples=samples, labels=labels, stats=None, rate=rate,
                     provenance=prov)
    ds.stats = fit_standardizer(ds.samples)
    return ds


def split(dataset: GaitDataset, holdout_fraction: float, seed: int
          ) -> tuple[GaitDataset, GaitDataset]:
    """Label-stratified disjoint train/validation split with a seeded shuffle."""
    if not (0.0 < holdout_fraction < 1.0):
        raise RangeError(f"holdout fraction {holdout_fraction} outside (0, 1)")
    rng = np.random.default_rng(seed)
    train_idx: list[np.ndarray] = []
    val_idx: list[np.ndarray] = []
    for label in np.unique(dataset.labels):
        idx = np.flatnonzero(dataset.labels == label)
        idx = idx[rng.permutation(idx.size)]
        n_val = int(round(idx.size * holdout_fraction))
        n_val = min(max(n_val, 1), idx.size - 1)  # both splits see every label
        val_idx.append(idx[:n_val])
        train_idx.append(idx[n_val:])
    tr = np.sort(np.concatenate(train_idx))
    va = np.sort(np.concatenate(val_idx))

    def take(ix: np.ndarray, tag: str) -> GaitDataset:
        return GaitDataset(samples=dataset.samples[ix], labels=dataset.labels[ix],
                           stats=dataset.stats, rate=dataset.rate,
                           provenance=f"{dataset.provenance} split={tag}")

    return take(tr, "train"), take(va, "val")


def _write_vec(buf: io.BytesIO, vec: np.ndarray) -> None:
    buf.write(np.ascontiguousarray(vec, dtype="<f8").tobytes())


def save_dataset(dataset: GaitDataset, path) -> None:
    """LGDS container: magic, version, M, d, rate, samples, labels, stats,
    flag bytes, length-prefixed provenance."""
    if dataset.stats is None:
        raise DataError("dataset has no standardizer stats; fit before saving")
    buf = io.BytesIO()
    buf.write(MAGIC)
    buf.write(struct.pack("<I", FORMAT_VERSION))
    buf.write(struct.pack("<II", dataset.n_samples, dataset.n_features))
    buf.write(struct.pack("<d", dataset.rate))
    _write_vec(buf, dataset.samples)
    _write_vec(buf, dataset.labels)
    _write_vec(buf, dataset.stats.mean)
    _write_vec(buf, dataset.stats.std)
    buf.write(dataset.stats.flagged.astype(np.uint8).tobytes())
    prov = dataset.provenance.encode("utf-8")
    buf.write(struct.pack("<I", len(prov)))
    buf.write(prov)
    with open(path, "wb") as f:
        f.write(buf.getvalue())


def load_dataset(path) -> GaitDataset:
    try:
        with open(path, "rb") as f:
            blob = f.read()
    except OSError as exc:
        raise FormatError(f"cannot read dataset file {path}: {exc}") from exc
    if len(blob) < 24:
        raise FormatError(f"dataset file {path} truncated before header")
    if blob[:4] != MAGIC:
        raise FormatError(f"bad dataset magic {blob[:4]!r} in {path}")
    version, = struct.unpack_from("<I", blob, 4)
    if version != FORMAT_VERSION:
        raise FormatError(f"unknown dataset version {version} in {path}")
    m, d = struct.unpack_from("<II", blob, 8)
    rate, = struct.unpack_from("<d", blob, 16)
    pos = 24
    need = 8 * (m * d + m + d + d) + d + 4
    if len(blob) - pos < need:
        raise FormatError(f"dataset file {path} truncated (need {need} more bytes)")
    samples = np.frombuffer(blob, "<f8", m * d, pos).reshape(m, d).copy()
    pos += 8 * m * d
    labels = np.frombuffer(blob, "<f8", m, pos).copy()
    pos += 8 * m
    mean = np.frombuffer(blob, "<f8", d, pos).copy()
    pos += 8 * d
    std = np.frombuffer(blob, "<f8", d, pos).copy()
    pos += 8 * d
    flagged = np.frombuffer(blob, np.uint8, d, pos).astype(bool)
    pos += d
    plen, = struct.unpack_from("<I", blob, pos)
    pos += 4
    if len(blob) - pos < plen:
        raise FormatError(f"dataset file {path} truncated in provenance")
    prov = blob[pos:pos + plen].decode("utf-8")
    return GaitDataset(samples=samples, labels=labels,
                       stats=StandardizerStats(mean, std, flagged),
                       rate=rate, provenance=prov)


def export_csv(dataset: GaitDataset, path) -> None:
    """Human-readable mirror of the container for inspection."""
    buf = io.StringIO()
    buf.write(",".join(["label"] + STANCE_FRAME_FEATURES[:dataset.n_features]) + "\n")
    for label, row in zip(dataset.labels, dataset.samples):
        buf.write(",".join([repr(float(label))] + [repr(float(v)) for v in row]) + "\n")
    with open(path, "w") as f:
        f.write(buf.getvalue())

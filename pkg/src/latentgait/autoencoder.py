"""Latent-state autoencoder: training, inference, reconstruction reports."""

from __future__ import annotations

import io
import json
import time
from dataclasses import dataclass, field

import numpy as np

from . import nets
from .control import STANCE_FRAME_FEATURES
from .dataset import GaitDataset, StandardizerStats, apply_standardizer, invert_standardizer
from .errors import DataError, FormatError, NumericError, ShapeError, TrainingError
from .nets import Batch, MlpParams, adam_step, clip_grad_global_norm, init_adam, \
    init_mlp, mlp_backward, mlp_forward, mse_loss

ENCODER_HIDDEN = (128, 64, 32)
INPUT_CLIP = 10.0  # standardized units; matches the dataset sanity bound


@dataclass
class AeConfig:
    latent_dim: int = 2
    epochs: int = 400
    lr: float = 1e-3
    batch_size: int = 128
    seed: int = 0
    hidden: tuple[int, ...] = ENCODER_HIDDEN


@dataclass
class TrainingHistory:
    train_loss: list[float] = field(default_factory=list)
    val_loss: list[float] = field(default_factory=list)
    wall_time: list[float] = field(default_factory=list)

    @property
    def epochs(self) -> int:
        return len(self.train_loss)

    @property
    def best_val(self) -> float:
        return min(self.val_loss)


@dataclass
class AutoencoderModel:
    encoder: MlpParams
    decoder: MlpParams
    latent_dim: int
    stats: StandardizerStats
    feature_names: list[str] = field(default_factory=lambda: list(STANCE_FRAME_FEATURES))

    def __post_init__(self) -> None:
        if self.encoder.out_dim != self.latent_dim:
            raise ShapeError(f"encoder outputs {self.encoder.out_dim}, latent dim is {self.latent_dim}")
        if self.decoder.in_dim != self.latent_dim:
            raise ShapeError(f"decoder expects {self.decoder.in_dim}, latent dim is {self.latent_dim}")
        if self.encoder.in_dim != self.decoder.out_dim:
            raise ShapeError("encoder input dim must equal decoder output dim")


def build_autoencoder(n_features: int, config: AeConfig,
                      rng: np.random.Generator) -> tuple[MlpParams, MlpParams]:
    enc_dims = [n_features, *config.hidden, config.latent_dim]
    dec_dims = [config.latent_dim, *reversed(config.hidden), n_features]
    return init_mlp(enc_dims, rng=rng), init_mlp(dec_dims, rng=rng)


def encode(model: AutoencoderModel, state_raw: np.ndarray) -> np.ndarray:
    """Latent coordinates of a raw stance-frame state.

    Inputs are standardized and clipped to +-INPUT_CLIP standardized units so
    the encoder sees bounded values even for states far outside the training
    gaits (falling robots during exploration, out-of-distribution commands).
    """
    x = np.asarray(state_raw, dtype=float)
    if x.shape[-1] != model.encoder.in_dim:
        raise ShapeError(f"state width {x.shape[-1]} != encoder input {model.encoder.in_dim}")
    z = np.clip(apply_standardizer(model.stats, x), -INPUT_CLIP, INPUT_CLIP)
    return mlp_forward(model.encoder, z).output


def decode(model: AutoencoderModel, z: np.ndarray) -> np.ndarray:
    """Reconstructed raw state (de-standardized) from latent coordinates."""
    z = np.asarray(z, dtype=float)
    if z.shape[-1] != model.latent_dim:
        raise ShapeError(f"latent width {z.shape[-1]} != {model.latent_dim}")
    return invert_standardizer(model.stats, mlp_forward(model.decoder, z).output)


def _epoch_pass(encoder, decoder, x, batch_size, rng, enc_state, dec_state, epoch):
    """One shuffled minibatch epoch; returns updated nets/states and mean loss."""
    order = rng.permutation(x.shape[0])
    losses = []
    for start in range(0, x.shape[0], batch_size):
        idx = order[start:start + batch_size]
        batch = Batch(inputs=x[idx], targets=x[idx])  # reconstruction objective
        enc_fwd = mlp_forward(encoder, batch.inputs)
        dec_fwd = mlp_forward(decoder, enc_fwd.output)
        loss, dloss = mse_loss(dec_fwd.output, batch.targets)
        if not np.isfinite(loss):
            raise TrainingError(f"training loss diverged at epoch {epoch}")
        losses.append(loss)
        dec_grads, dz = mlp_backward(decoder, dec_fwd, dloss)
        enc_grads, _ = mlp_backward(encoder, enc_fwd, dz)
        dec_grads = clip_grad_global_norm(dec_grads)
        enc_grads = clip_grad_global_norm(enc_grads)
        encoder, enc_state = adam_step(encoder, enc_grads, enc_state)
        decoder, dec_state = adam_step(decoder, dec_grads, dec_state)
    return encoder, decoder, enc_state, dec_state, float(np.mean(losses))


def validation_loss(encoder: MlpParams, decoder: MlpParams, x: np.ndarray) -> float:
    recon = mlp_forward(decoder, mlp_forward(encoder, x).output).output
    return mse_loss(recon, x)[0]


def train_autoencoder(train: GaitDataset, val: GaitDataset, config: AeConfig
                      ) -> tuple[AutoencoderModel, TrainingHistory]:
    """Minibatch Adam on reconstruction MSE over standardized states.

    Returns the parameters from the best-validation epoch.
    """
    if train.stats is None:
        raise DataError("training dataset carries no standardizer stats")
    rng = np.random.default_rng(config.seed)
    x_train = np.clip(apply_standardizer(train.stats, train.samples),
                      -INPUT_CLIP, INPUT_CLIP)
    x_val = np.clip(apply_standardizer(train.stats, val.samples),
                    -INPUT_CLIP, INPUT_CLIP)
    encoder, decoder = build_autoencoder(train.n_features, config, rng)
    enc_state = init_adam(encoder, lr=config.lr)
    dec_state = init_adam(decoder, lr=config.lr)

    history = TrainingHistory()
    best = (np.inf, encoder, decoder)
    for epoch in range(config.epochs):
        t0 = time.perf_counter()
        try:
            encoder, decoder, enc_state, dec_state, train_loss = _epoch_pass(
                encoder, decoder, x_train, config.batch_size, rng, enc_state,
                dec_state, epoch)
        except NumericError as exc:
            raise TrainingError(f"training diverged at epoch {epoch}: {exc}") from exc
        val_loss = validation_loss(encoder, decoder, x_val)
        if not np.isfinite(val_loss):
            raise TrainingError(f"validation loss diverged at epoch {epoch}")
        history.train_loss.append(train_loss)
        history.val_loss.append(val_loss)
        history.wall_time.append(time.perf_counter() - t0)
        if val_loss < best[0]:
            best = (val_loss, encoder.copy(), decoder.copy())
    model = AutoencoderModel(encoder=best[1], decoder=best[2],
                             latent_dim=config.latent_dim, stats=train.stats)
    return model, history


@dataclass
class ReconstructionReport:
    feature_names: list[str]
    mse_standardized: np.ndarray  # per feature
    mse_physical: np.ndarray  # per feature, raw units
    aggregate_standardized: float
    aggregate_physical: float


def reconstruction_report(model: AutoencoderModel, data: GaitDataset
                          ) -> ReconstructionReport:
    z = encode(model, data.samples)
    recon = decode(model, z)
    err_phys = (recon - data.samples) ** 2
    std_scale = model.stats.std**2
    err_std = err_phys / std_scale
    return ReconstructionReport(
        feature_names=list(model.feature_names),
        mse_standardized=err_std.mean(axis=0),
        mse_physical=err_phys.mean(axis=0),
        aggregate_standardized=float(err_std.mean()),
        aggregate_physical=float(err_phys.mean()),
    )


def write_report_csv(report: ReconstructionReport, path) -> None:
    buf = io.StringIO()
    buf.write("feature,mse_standardized,mse_physical\n")
    for name, s, p in zip(report.feature_names, report.mse_standardized,
                          report.mse_physical):
        buf.write(f"{name},{float(s)!r},{float(p)!r}\n")
    buf.write(f"aggregate,{report.aggregate_standardized!r},{report.aggregate_physical!r}\n")
    with open(path, "w") as f:
        f.write(buf.getvalue())


OVERLAY_FEATURES = ("d_base_x", "knee_st")


def write_overlay_csv(model: AutoencoderModel, data: GaitDataset, path,
                      max_rows: int = 500) -> None:
    """Time-aligned original/reconstructed traces for selected features."""
    n = min(max_rows, data.n_samples)
    rows = data.samples[:n]
    recon = decode(model, encode(model, rows))
    cols = [model.feature_names.index(f) for f in OVERLAY_FEATURES]
    buf = io.StringIO()
    header = ["time"]
    for f in OVERLAY_FEATURES:
        header += [f"{f}_original", f"{f}_reconstructed"]
    buf.write(",".join(header) + "\n")
    for k in range(n):
        cells = [repr(k / data.rate)]
        for c in cols:
            cells += [repr(float(rows[k, c])), repr(float(recon[k, c]))]
        buf.write(",".join(cells) + "\n")
    with open(path, "w") as f:
        f.write(buf.getvalue())


def save_autoencoder(model: AutoencoderModel, container_path, sidecar_path) -> None:
    nets.save_mlps(container_path, [model.encoder, model.decoder])
    sidecar = {
        "latent_dim": model.latent_dim,
        "encoder_layers": len(model.encoder.layers),
        "feature_names": model.feature_names,
        "standardizer": {
            "mean": model.stats.mean.tolist(),
            "std": model.stats.std.tolist(),
            "flagged": model.stats.flagged.astype(int).tolist(),
        },
    }
    with open(sidecar_path, "w") as f:
        json.dump(sidecar, f, indent=2, sort_keys=True)
        f.write("\n")


def load_autoencoder(container_path, sidecar_path) -> AutoencoderModel:
    try:
        with open(sidecar_path) as f:
            sidecar = json.load(f)
    except (OSError, json.JSONDecodeError) as exc:
        raise FormatError(f"cannot read autoencoder sidecar {sidecar_path}: {exc}") from exc
    encoder, decoder = nets.load_mlps(container_path, 2)
    stats = StandardizerStats(
        mean=np.array(sidecar["standardizer"]["mean"], dtype=float),
        std=np.array(sidecar["standardizer"]["std"], dtype=float),
        flagged=np.array(sidecar["standardizer"]["flagged"], dtype=bool),
    )
    return AutoencoderModel(encoder=encoder, decoder=decoder,
                            latent_dim=int(sidecar["latent_dim"]), stats=stats,
                            feature_names=list(sidecar["feature_names"]))

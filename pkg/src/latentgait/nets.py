"""Dense-network machinery: forward pass, exact backprop, Adam, losses, checkpoints.

Everything is float64 numpy. Networks are plain data (lists of layers), all
functions are pure: they return new parameter structures instead of mutating.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, replace

import numpy as np

from .errors import FormatError, NumericError, ShapeError

ACTIVATIONS = ("relu", "tanh", "identity")

# checkpoint container
MAGIC = b"LGNN"
FORMAT_VERSION = 1
_ACT_TO_TAG = {"relu": 0, "tanh": 1, "identity": 2}
_TAG_TO_ACT = {v: k for k, v in _ACT_TO_TAG.items()}


@dataclass
class Layer:
    weight: np.ndarray  # [out, in]
    bias: np.ndarray  # [out]
    activation: str

    @property
    def in_dim(self) -> int:
        return self.weight.shape[1]

    @property
    def out_dim(self) -> int:
        return self.weight.shape[0]


@dataclass
class MlpParams:
    layers: list[Layer]

    def __post_init__(self) -> None:
        if not self.layers:
            raise ShapeError("network needs at least one layer")
        for k, layer in enumerate(self.layers):
            if layer.activation not in ACTIVATIONS:
                raise ShapeError(f"layer {k}: unknown activation {layer.activation!r}")
            if layer.weight.ndim != 2 or layer.bias.ndim != 1:
                raise ShapeError(f"layer {k}: weight must be 2-d and bias 1-d")
            if layer.bias.shape[0] != layer.weight.shape[0]:
                raise ShapeError(
                    f"layer {k}: bias dim {layer.bias.shape[0]} != weight rows {layer.weight.shape[0]}"
                )
            if k > 0 and layer.in_dim != self.layers[k - 1].out_dim:
                raise ShapeError(
                    f"layer {k}: input dim {layer.in_dim} != previous output dim "
                    f"{self.layers[k - 1].out_dim}"
                )
            if not (np.isfinite(layer.weight).all() and np.isfinite(layer.bias).all()):
                raise NumericError(f"layer {k}: non-finite parameter entries")

    @property
    def in_dim(self) -> int:
        return self.layers[0].in_dim

    @property
    def out_dim(self) -> int:
        return self.layers[-1].out_dim

    def copy(self) -> "MlpParams":
        return MlpParams(
            [Layer(l.weight.copy(), l.bias.copy(), l.activation) for l in self.layers]
        )


# Gradients carry the same shapes as MlpParams: one (dW, db) pair per layer.
GradList = list[tuple[np.ndarray, np.ndarray]]


@dataclass
class Batch:
    """One training minibatch: inputs [B, d_in], targets [B, d_out]."""

    inputs: np.ndarray
    targets: np.ndarray

    def __post_init__(self) -> None:
        self.inputs = np.atleast_2d(np.asarray(self.inputs, dtype=float))
        self.targets = np.atleast_2d(np.asarray(self.targets, dtype=float))
        if self.inputs.shape[0] != self.targets.shape[0]:
            raise ShapeError(
                f"batch rows differ: {self.inputs.shape[0]} inputs vs "
                f"{self.targets.shape[0]} targets")
        if self.inputs.shape[0] < 1:
            raise ShapeError("batch needs at least one row")

    @property
    def size(self) -> int:
        return self.inputs.shape[0]


@dataclass
class ForwardPass:
    """Per-layer records from mlp_forward, enough for exact backprop."""

    inputs: np.ndarray  # [B, d_in]
    pre: list[np.ndarray]  # pre-activation per layer, [B, out_k]
    post: list[np.ndarray]  # post-activation per layer
    output: np.ndarray  # final output in the caller's rank (1-d in, 1-d out)


@dataclass
class AdamState:
    m: GradList
    v: GradList
    step: int = 0
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8


def init_mlp(dims: list[int], hidden_activation: str = "relu",
             output_activation: str = "identity", rng: np.random.Generator | None = None) -> MlpParams:
    """Xavier-uniform init: weights in +-sqrt(6/(fan_in+fan_out)), zero biases."""
    if rng is None:
        rng = np.random.default_rng(0)
    layers = []
    for k in range(len(dims) - 1):
        fan_in, fan_out = dims[k], dims[k + 1]
        bound = np.sqrt(6.0 / (fan_in + fan_out))
        w = rng.uniform(-bound, bound, size=(fan_out, fan_in))
        b = np.zeros(fan_out)
        act = hidden_activation if k < len(dims) - 2 else output_activation
        layers.append(Layer(w, b, act))
    return MlpParams(layers)


def init_adam(params: MlpParams, lr: float = 1e-3, beta1: float = 0.9,
              beta2: float = 0.999, eps: float = 1e-8) -> AdamState:
    zeros = [(np.zeros_like(l.weight), np.zeros_like(l.bias)) for l in params.layers]
    zeros2 = [(np.zeros_like(l.weight), np.zeros_like(l.bias)) for l in params.layers]
    return AdamState(m=zeros, v=zeros2, step=0, lr=lr, beta1=beta1, beta2=beta2, eps=eps)


def _apply_activation(z: np.ndarray, kind: str) -> np.ndarray:
    if kind == "relu":
        return np.maximum(z, 0.0)
    if kind == "tanh":
        return np.tanh(z)
    return z


def _activation_grad(z: np.ndarray, post: np.ndarray, kind: str) -> np.ndarray:
    if kind == "relu":
        return (z > 0.0).astype(z.dtype)
    if kind == "tanh":
        return 1.0 - post * post
    return np.ones_like(z)


def mlp_forward(params: MlpParams, x: np.ndarray) -> ForwardPass:
    """Run the network on a vector or a [B, d_in] batch.

    The returned record keeps every pre/post-activation so mlp_backward can
    compute exact reverse-mode gradients.
    """
    x = np.asarray(x, dtype=float)
    squeeze = x.ndim == 1
    xb = x[None, :] if squeeze else x
    if xb.ndim != 2 or xb.shape[1] != params.in_dim:
        raise ShapeError(
            f"input width {xb.shape[-1] if xb.ndim else 0} != first-layer input dim {params.in_dim}"
        )
    pre: list[np.ndarray] = []
    post: list[np.ndarray] = []
    a = xb
    for layer in params.layers:
        z = a @ layer.weight.T + layer.bias
        a = _apply_activation(z, layer.activation)
        pre.append(z)
        post.append(a)
    out = a[0] if squeeze else a
    return ForwardPass(inputs=xb, pre=pre, post=post, output=out)


def mlp_backward(params: MlpParams, fwd: ForwardPass,
                 output_gradient: np.ndarray) -> tuple[GradList, np.ndarray]:
    """Exact reverse-mode gradients of sum(output * output_gradient).

    Returns per-layer (dW, db) plus the gradient with respect to the input,
    in the same rank the input was given.
    """
    g = np.asarray(output_gradient, dtype=float)
    squeeze = g.ndim == 1
    gb = g[None, :] if squeeze else g
    if gb.shape != fwd.post[-1].shape:
        raise ShapeError(
            f"output_gradient shape {gb.shape} != forward output shape {fwd.post[-1].shape}"
        )
    grads: GradList = [None] * len(params.layers)  # type: ignore[list-item]
    delta = gb
    for k in range(len(params.layers) - 1, -1, -1):
        layer = params.layers[k]
        delta = delta * _activation_grad(fwd.pre[k], fwd.post[k], layer.activation)
        a_prev = fwd.inputs if k == 0 else fwd.post[k - 1]
        grads[k] = (delta.T @ a_prev, delta.sum(axis=0))
        delta = delta @ layer.weight
    input_grad = delta[0] if squeeze else delta
    return grads, input_grad


def adam_step(params: MlpParams, grads: GradList, state: AdamState) -> tuple[MlpParams, AdamState]:
    """One bias-corrected Adam update; returns new params and state."""
    if len(grads) != len(params.layers):
        raise ShapeError(f"{len(grads)} gradient layers for {len(params.layers)} parameter layers")
    t = state.step + 1
    new_layers = []
    new_m: GradList = []
    new_v: GradList = []
    for k, (layer, (dw, db)) in enumerate(zip(params.layers, grads)):
        if dw.shape != layer.weight.shape or db.shape != layer.bias.shape:
            raise ShapeError(f"layer {k}: gradient shape {dw.shape}/{db.shape} does not match parameters")
        if not (np.isfinite(dw).all() and np.isfinite(db).all()):
            raise NumericError(f"layer {k}: non-finite gradient entries")
        mw = state.beta1 * state.m[k][0] + (1.0 - state.beta1) * dw
        mb = state.beta1 * state.m[k][1] + (1.0 - state.beta1) * db
        vw = state.beta2 * state.v[k][0] + (1.0 - state.beta2) * dw * dw
        vb = state.beta2 * state.v[k][1] + (1.0 - state.beta2) * db * db
        c1 = 1.0 - state.beta1**t
        c2 = 1.0 - state.beta2**t
        w = layer.weight - state.lr * (mw / c1) / (np.sqrt(vw / c2) + state.eps)
        b = layer.bias - state.lr * (mb / c1) / (np.sqrt(vb / c2) + state.eps)
        new_layers.append(Layer(w, b, layer.activation))
        new_m.append((mw, mb))
        new_v.append((vw, vb))
    return MlpParams(new_layers), replace(state, m=new_m, v=new_v, step=t)


def mse_loss(prediction: np.ndarray, target: np.ndarray) -> tuple[float, np.ndarray]:
    """Mean squared error over every entry, plus the gradient w.r.t. prediction."""
    p = np.asarray(prediction, dtype=float)
    t = np.asarray(target, dtype=float)
    if p.shape != t.shape:
        raise ShapeError(f"prediction shape {p.shape} != target shape {t.shape}")
    diff = p - t
    n = diff.size
    loss = float(np.sum(diff * diff) / n)
    return loss, 2.0 * diff / n


def clip_grad_global_norm(grads: GradList, max_norm: float = 5.0) -> GradList:
    """Scale all gradients so their joint L2 norm is at most max_norm."""
    total = 0.0
    for dw, db in grads:
        total += float(np.sum(dw * dw)) + float(np.sum(db * db))
    norm = np.sqrt(total)
    if not np.isfinite(norm):
        raise NumericError("gradient norm overflow")
    if norm <= max_norm or norm == 0.0:
        return grads
    scale = max_norm / norm
    return [(dw * scale, db * scale) for dw, db in grads]


def zero_grads(params: MlpParams) -> GradList:
    return [(np.zeros_like(l.weight), np.zeros_like(l.bias)) for l in params.layers]


def accumulate_grads(total: GradList, part: GradList, scale: float = 1.0) -> None:
    """In-place total += scale * part (training-loop helper)."""
    for (tw, tb), (pw, pb) in zip(total, part):
        tw += scale * pw
        tb += scale * pb


def serialize_mlp(params: MlpParams) -> bytes:
    """Versioned binary container: LGNN | version | layer count | per-layer blocks."""
    out = bytearray()
    out += MAGIC
    out += struct.pack("<I", FORMAT_VERSION)
    out += struct.pack("<I", len(params.layers))
    for layer in params.layers:
        out += struct.pack("<IIB", layer.in_dim, layer.out_dim, _ACT_TO_TAG[layer.activation])
        out += np.ascontiguousarray(layer.weight, dtype="<f8").tobytes()
        out += np.ascontiguousarray(layer.bias, dtype="<f8").tobytes()
    return bytes(out)


def deserialize_mlp(blob: bytes, offset: int = 0) -> tuple[MlpParams, int]:
    """Parse one network from the container; returns (params, next offset)."""
    need = len(MAGIC) + 8
    if len(blob) - offset < need:
        raise FormatError("container truncated before header")
    if blob[offset:offset + 4] != MAGIC:
        raise FormatError(f"bad magic bytes {blob[offset:offset + 4]!r}")
    version, n_layers = struct.unpack_from("<II", blob, offset + 4)
    if version != FORMAT_VERSION:
        raise FormatError(f"unknown container version {version}")
    pos = offset + 12
    layers = []
    for k in range(n_layers):
        if len(blob) - pos < 9:
            raise FormatError(f"container truncated in layer {k} header")
        d_in, d_out, tag = struct.unpack_from("<IIB", blob, pos)
        pos += 9
        if tag not in _TAG_TO_ACT:
            raise FormatError(f"layer {k}: unknown activation tag {tag}")
        nbytes = 8 * d_in * d_out + 8 * d_out
        if len(blob) - pos < nbytes:
            raise FormatError(f"container truncated in layer {k} data")
        w = np.frombuffer(blob, dtype="<f8", count=d_in * d_out, offset=pos).reshape(d_out, d_in)
        pos += 8 * d_in * d_out
        b = np.frombuffer(blob, dtype="<f8", count=d_out, offset=pos)
        pos += 8 * d_out
        layers.append(Layer(w.copy(), b.copy(), _TAG_TO_ACT[tag]))
    return MlpParams(layers), pos


def save_mlps(path, nets: list[MlpParams]) -> None:
    """Write one or more networks back to back into a single container file."""
    blob = b"".join(serialize_mlp(net) for net in nets)
    with open(path, "wb") as f:
        f.write(blob)


def load_mlps(path, count: int) -> list[MlpParams]:
    with open(path, "rb") as f:
        blob = f.read()
    nets = []
    pos = 0
    for _ in range(count):
        net, pos = deserialize_mlp(blob, pos)
        nets.append(net)
    if pos != len(blob):
        raise FormatError(f"{len(blob) - pos} trailing bytes after {count} networks")
    return nets

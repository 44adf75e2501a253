"""Six-layer residual 1-D CNN: parameters, forward/backward, Adam, training and checkpoints.

Layer table (C = input leads, L = window length)::

    conv1  C->16, k=7   ReLU  maxpool2            (16, L/2)
    conv2  16->16, k=5  ReLU                      residual branch
    conv3  16->16, k=5  (+ identity)  ReLU  maxpool2   (16, L/4)
    conv4  16->32, k=3  ReLU  maxpool2            (32, L/8)
    global average pool                           (32,)
    fc5    32->64       ReLU
    fc6    64->5        softmax
"""

from __future__ import annotations

import logging
import math
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable

import numpy as np

from . import nn
from ._io import atomic_write_bytes
from .errors import (
    BadMagic,
    ConfigError,
    ConfigMismatch,
    CorruptPayload,
    EmptyTrainSet,
    ShapeMismatch,
    StaleCache,
    VersionMismatch,
)
from .nn import Param
from .wfdb import N_CLASSES, BeatClass

log = logging.getLogger(__name__)

Params = dict[str, Param]

# name, kind, (out, in[, k])
LAYERS: tuple[tuple[str, str, tuple[int, ...]], ...] = (
    ("conv1", "conv", (16, -1, 7)),
    ("conv2", "conv", (16, 16, 5)),
    ("conv3", "conv", (16, 16, 5)),
    ("conv4", "conv", (32, 16, 3)),
    ("fc5", "dense", (64, 32)),
    ("fc6", "dense", (N_CLASSES, 64)),
)


@dataclass(frozen=True)
class ModelConfig:
    in_channels: int = 2
    window_len: int = 256
    seed: int = 0

    def __post_init__(self):
        if self.in_channels < 1:
            raise ConfigError("in_channels must be >= 1")
        if self.window_len <= 0 or self.window_len % 8:
            raise ConfigError(f"window_len must be a positive multiple of 8, got {self.window_len}")
        if not 0 <= self.seed < 2**64:
            raise ConfigError("seed must fit in an unsigned 64-bit integer")

    def layer_shapes(self) -> list[tuple[str, str, tuple[int, ...]]]:
        out = []
        for name, kind, shape in LAYERS:
            if shape[1] == -1:
                shape = (shape[0], self.in_channels) + shape[2:]
            out.append((name, kind, shape))
        return out


@dataclass(frozen=True)
class AdamHyper:
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    batch_size: int = 64
    epochs: int = 30

    def __post_init__(self):
        if not self.lr >= 0:
            raise ConfigError("lr must be non-negative")
        if not (0 <= self.beta1 < 1 and 0 <= self.beta2 < 1):
            raise ConfigError("betas must lie in [0, 1)")
        if self.batch_size < 1 or self.epochs < 0:
            raise ConfigError("batch_size must be >= 1 and epochs >= 0")


def parameter_count(config: ModelConfig) -> int:
    total = 0
    for _, _, shape in config.layer_shapes():
        total += math.prod(shape) + shape[0]
    return total


def init_model(config: ModelConfig, dtype=np.float32, zero_head: bool = True) -> Params:
    """He-normal weights (std ``sqrt(2/fan_in)``) and zero biases.

    Layer ``i`` (1-based) draws from a generator seeded by ``(seed, i)``.
    The classifier head starts at zero so the initial softmax is uniform;
    pass ``zero_head=False`` to draw it like the other layers.
    """
    params: Params = {}
    layers = config.layer_shapes()
    for i, (name, _, shape) in enumerate(layers, start=1):
        fan_in = math.prod(shape[1:])
        rng = np.random.default_rng([config.seed, i])
        w = rng.standard_normal(shape) * math.sqrt(2.0 / fan_in)
        if zero_head and i == len(layers):
            w = np.zeros(shape)
        params[f"{name}.weight"] = Param(w.astype(dtype))
        params[f"{name}.bias"] = Param(np.zeros(shape[0], dtype=dtype))
    return params


def _versions(params: Params) -> tuple[int, ...]:
    return tuple(p.step for p in params.values())


def forward(params: Params, window: np.ndarray, debug: bool = False):
    """Logits for one window ``(C, L)`` or a batch ``(N, C, L)``."""
    conv1_w = params["conv1.weight"].value
    c_in = conv1_w.shape[1]
    if window.ndim not in (2, 3) or window.shape[-2] != c_in or window.shape[-1] % 8:
        raise ShapeMismatch(f"window shape {window.shape} does not fit a {c_in}-lead model")
    x = window.astype(conv1_w.dtype, copy=False)
    if debug:
        nn.check_finite(x, "input window")
    c: dict = {"versions": _versions(params)}
    v = params

    trace = c["trace"] = []
    h, c["conv1"] = nn.conv1d(x, v["conv1.weight"].value, v["conv1.bias"].value)
    h, c["relu1"] = nn.relu(h)
    trace.append(h.shape)
    block_in, c["pool1"] = nn.maxpool1d(h)
    trace.append(block_in.shape)

    h, c["conv2"] = nn.conv1d(block_in, v["conv2.weight"].value, v["conv2.bias"].value)
    h, c["relu2"] = nn.relu(h)
    h, c["conv3"] = nn.conv1d(h, v["conv3.weight"].value, v["conv3.bias"].value)
    h, c["relu3"] = nn.relu(block_in + h)
    trace.append(h.shape)
    h, c["pool2"] = nn.maxpool1d(h)
    trace.append(h.shape)

    h, c["conv4"] = nn.conv1d(h, v["conv4.weight"].value, v["conv4.bias"].value)
    h, c["relu4"] = nn.relu(h)
    trace.append(h.shape)
    h, c["pool3"] = nn.maxpool1d(h)
    trace.append(h.shape)

    h, c["gap"] = nn.global_avg_pool(h)
    trace.append(h.shape)
    h, c["fc5"] = nn.dense(h, v["fc5.weight"].value, v["fc5.bias"].value)
    h, c["relu5"] = nn.relu(h)
    trace.append(h.shape)
    logits, c["fc6"] = nn.dense(h, v["fc6.weight"].value, v["fc6.bias"].value)
    trace.append(logits.shape)
    if debug:
        nn.check_finite(logits, "logits")
    return logits, c


def backward(params: Params, cache: dict, dlogits: np.ndarray) -> np.ndarray:
    """Accumulate parameter gradients; returns the gradient w.r.t. the input window."""
    if cache["versions"] != _versions(params):
        raise StaleCache("parameters were updated after this forward pass")
    g = params

    def acc(name, dw, db):
        g[f"{name}.weight"].grad += dw
        g[f"{name}.bias"].grad += db

    d, dw, db = nn.dense_backward(cache["fc6"], dlogits)
    acc("fc6", dw, db)
    d = nn.relu_backward(cache["relu5"], d)
    d, dw, db = nn.dense_backward(cache["fc5"], d)
    acc("fc5", dw, db)
    d = nn.global_avg_pool_backward(cache["gap"], d)

    d = nn.maxpool1d_backward(cache["pool3"], d)
    d = nn.relu_backward(cache["relu4"], d)
    d, dw, db = nn.conv1d_backward(cache["conv4"], d)
    acc("conv4", dw, db)

    d = nn.maxpool1d_backward(cache["pool2"], d)
    d_block_out = nn.relu_backward(cache["relu3"], d)
    d, dw, db = nn.conv1d_backward(cache["conv3"], d_block_out)
    acc("conv3", dw, db)
    d = nn.relu_backward(cache["relu2"], d)
    d, dw, db = nn.conv1d_backward(cache["conv2"], d)
    acc("conv2", dw, db)
    d = d + d_block_out  # identity skip

    d = nn.maxpool1d_backward(cache["pool1"], d)
    d = nn.relu_backward(cache["relu1"], d)
    d, dw, db = nn.conv1d_backward(cache["conv1"], d)
    acc("conv1", dw, db)
    return d


def zero_grads(params: Params) -> None:
    for p in params.values():
        p.zero_grad()


def batch_loss_and_grad(params: Params, windows: np.ndarray, targets: np.ndarray, weights: np.ndarray) -> float:
    """Mean weighted cross-entropy over a batch; gradients of that mean are accumulated."""
    logits, cache = forward(params, windows)
    losses, dlogits = nn.softmax_xent(logits, targets, weights)
    n = len(targets)
    backward(params, cache, dlogits / n)
    return float(losses.mean())


def adam_step(params: Params, hyper: AdamHyper, t: int) -> None:
    """One bias-corrected Adam update, then clear the gradients."""
    if t < 1:
        raise ValueError("Adam step index starts at 1")
    b1, b2 = hyper.beta1, hyper.beta2
    c1 = 1 - b1**t
    c2 = 1 - b2**t
    for p in params.values():
        g = p.grad
        p.m *= b1
        p.m += (1 - b1) * g
        p.v *= b2
        p.v += (1 - b2) * g * g
        p.value -= (hyper.lr * (p.m / c1) / (np.sqrt(p.v / c2) + hyper.eps)).astype(p.value.dtype)
        p.step += 1
        p.zero_grad()


def copy_params(params: Params) -> Params:
    out = {}
    for name, p in params.items():
        q = Param(p.value.copy())
        q.m[...] = p.m
        q.v[...] = p.v
        q.step = p.step
        out[name] = q
    return out


def predict_proba(params: Params, windows: np.ndarray, batch_size: int = 512) -> np.ndarray:
    single = windows.ndim == 2
    xb = windows[None] if single else windows
    out = []
    for start in range(0, len(xb), batch_size):
        logits, _ = forward(params, xb[start : start + batch_size])
        out.append(nn.softmax(logits.astype(np.float64)))
    probs = np.concatenate(out) if out else np.zeros((0, N_CLASSES))
    return probs[0] if single else probs


def predict(params: Params, window: np.ndarray) -> tuple[BeatClass, np.ndarray]:
    probs = predict_proba(params, window)
    if probs.ndim != 1:
        raise ShapeMismatch("predict takes a single window; use predict_proba for batches")
    return BeatClass(int(np.argmax(probs))), probs


def evaluate(params: Params, windows: np.ndarray, labels: np.ndarray, weights: np.ndarray) -> tuple[float, float, np.ndarray]:
    """Mean weighted loss, accuracy and predicted labels over a set of windows."""
    if len(labels) == 0:
        return float("nan"), float("nan"), np.zeros(0, dtype=np.int64)
    probs = predict_proba(params, windows)
    pred = probs.argmax(axis=1)
    rows = np.arange(len(labels))
    w = weights[labels]
    loss = float(np.mean(-w * np.log(np.maximum(probs[rows, labels], 1e-300))))
    return loss, float(np.mean(pred == labels)), pred


@dataclass
class TrainResult:
    params: Params
    history: list[dict] = field(default_factory=list)
    best_epoch: int = 0
    steps: int = 0


def train(
    windows: np.ndarray,
    labels: np.ndarray,
    split,
    config: ModelConfig,
    hyper: AdamHyper,
    weights: np.ndarray,
    on_epoch: Callable[[dict], None] | None = None,
    params: Params | None = None,
) -> TrainResult:
    """Mini-batch Adam training with best-validation retention.

    Train indices are reshuffled every epoch by a generator seeded by
    ``(config.seed, epoch)``. When the split has no validation indices the
    training bucket stands in for it.
    """
    train_idx = np.asarray(split.train, dtype=np.int64)
    if train_idx.size == 0:
        raise EmptyTrainSet("the training bucket is empty")
    val_idx = np.asarray(split.val if len(split.val) else split.train, dtype=np.int64)
    labels = np.asarray(labels, dtype=np.int64)
    weights = np.asarray(weights, dtype=np.float64)
    if params is None:
        params = init_model(config)
    dtype = params["conv1.weight"].value.dtype
    wdt = weights.astype(dtype)

    result = TrainResult(params=copy_params(params))
    best_acc = -1.0
    t = 0
    val_x, val_y = windows[val_idx], labels[val_idx]
    for epoch in range(1, hyper.epochs + 1):
        order = train_idx[np.random.default_rng([config.seed, epoch]).permutation(train_idx.size)]
        total_loss = 0.0
        correct = 0
        for start in range(0, order.size, hyper.batch_size):
            batch = order[start : start + hyper.batch_size]
            xb, yb = windows[batch], labels[batch]
            zero_grads(params)
            logits, cache = forward(params, xb)
            losses, dlogits = nn.softmax_xent(logits, yb, wdt[yb])
            backward(params, cache, dlogits / len(batch))
            total_loss += float(losses.astype(np.float64).sum())
            correct += int(np.sum(logits.argmax(axis=1) == yb))
            t += 1
            adam_step(params, hyper, t)
        val_loss, val_acc, _ = evaluate(params, val_x, val_y, weights)
        stats = {
            "epoch": epoch,
            "train_loss": total_loss / order.size,
            "train_accuracy": correct / order.size,
            "val_loss": val_loss,
            "val_accuracy": val_acc,
            "steps": t,
        }
        result.history.append(stats)
        if val_acc > best_acc:
            best_acc = val_acc
            result.params = copy_params(params)
            result.best_epoch = epoch
        log.info("epoch %d train_loss %.4f val_loss %.4f val_acc %.4f", epoch, stats["train_loss"], val_loss, val_acc)
        if on_epoch is not None:
            on_epoch(stats)
    result.steps = t
    return result


# -- checkpoints -----------------------------------------------------------

CKPT_MAGIC = b"EBNC"
CKPT_VERSION = 1
_CKPT_HEAD = struct.Struct("<4sHHIQ")  # magic, version, in_channels, window_len, model seed
_CKPT_META = struct.Struct("<IQQH")  # epoch, split seed, optimizer step, n_params


@dataclass(frozen=True)
class CheckpointMeta:
    epoch: int = 0
    seed: int = 0
    step: int = 0


def encode_checkpoint(params: Params, config: ModelConfig, meta: CheckpointMeta = CheckpointMeta()) -> bytes:
    parts = [
        _CKPT_HEAD.pack(CKPT_MAGIC, CKPT_VERSION, config.in_channels, config.window_len, config.seed),
        _CKPT_META.pack(meta.epoch, meta.seed, meta.step, len(params)),
    ]
    body = []
    for name, p in params.items():
        raw = name.encode("ascii")
        body.append(struct.pack("<B", len(raw)) + raw + struct.pack("<B", p.value.ndim))
        body.append(struct.pack(f"<{p.value.ndim}I", *p.value.shape))
        body.append(np.ascontiguousarray(p.value, dtype="<f4").tobytes())
    payload = b"".join(body)
    parts.append(struct.pack("<Q", len(payload)))
    parts.append(payload)
    return b"".join(parts)


def decode_checkpoint(blob: bytes, expected: ModelConfig | None = None) -> tuple[Params, ModelConfig, CheckpointMeta]:
    head = _CKPT_HEAD.size + _CKPT_META.size + 8
    if len(blob) < 4 or blob[:4] != CKPT_MAGIC:
        raise BadMagic("not a checkpoint file (bad magic)")
    if len(blob) < head:
        raise CorruptPayload("checkpoint header truncated")
    _, version, in_channels, window_len, seed = _CKPT_HEAD.unpack_from(blob, 0)
    if version != CKPT_VERSION:
        raise VersionMismatch(f"checkpoint version {version}, expected {CKPT_VERSION}")
    epoch, split_seed, step, n_params = _CKPT_META.unpack_from(blob, _CKPT_HEAD.size)
    (payload_len,) = struct.unpack_from("<Q", blob, _CKPT_HEAD.size + _CKPT_META.size)
    if len(blob) - head != payload_len:
        raise CorruptPayload(f"payload is {len(blob) - head} bytes, header says {payload_len}")
    config = ModelConfig(in_channels=in_channels, window_len=window_len, seed=seed)
    if expected is not None and (expected.in_channels, expected.window_len) != (in_channels, window_len):
        raise ConfigMismatch(
            f"checkpoint is for {in_channels} leads x {window_len} samples, "
            f"requested {expected.in_channels} x {expected.window_len}"
        )
    want = {f"{n}.{part}": (s if part == "weight" else s[:1]) for n, _, s in config.layer_shapes() for part in ("weight", "bias")}
    params: Params = {}
    pos = head
    try:
        for _ in range(n_params):
            (name_len,) = struct.unpack_from("<B", blob, pos)
            pos += 1
            name = blob[pos : pos + name_len].decode("ascii")
            pos += name_len
            (ndim,) = struct.unpack_from("<B", blob, pos)
            pos += 1
            shape = struct.unpack_from(f"<{ndim}I", blob, pos)
            pos += 4 * ndim
            count = math.prod(shape)
            if pos + 4 * count > len(blob):
                raise CorruptPayload(f"parameter {name} truncated")
            value = np.frombuffer(blob, dtype="<f4", count=count, offset=pos).reshape(shape).astype(np.float32)
            pos += 4 * count
            params[name] = Param(value)
    except (struct.error, UnicodeDecodeError) as e:
        raise CorruptPayload(f"malformed parameter table: {e}") from None
    if pos != len(blob):
        raise CorruptPayload(f"{len(blob) - pos} trailing bytes in checkpoint")
    got = {n: p.shape for n, p in params.items()}
    if got != want:
        raise ConfigMismatch(f"checkpoint parameters {got} do not match the layer table {want}")
    for p in params.values():
        p.step = step
    return params, config, CheckpointMeta(epoch=epoch, seed=split_seed, step=step)


def save_checkpoint(path: str | Path, params: Params, config: ModelConfig, meta: CheckpointMeta = CheckpointMeta()) -> None:
    atomic_write_bytes(path, encode_checkpoint(params, config, meta))


def load_checkpoint(path: str | Path, expected: ModelConfig | None = None):
    return decode_checkpoint(Path(path).read_bytes(), expected)


def activation_pattern(params: Params, window: np.ndarray) -> bytes:
    """ReLU masks and pooling argmaxes of one forward pass, packed as bytes.

    Two inputs with the same pattern lie on the same linear piece of the
    network, which is what a finite-difference check needs.
    """
    _, c = forward(params, window)
    parts = [np.packbits(c[k]).tobytes() for k in ("relu1", "relu2", "relu3", "relu4", "relu5")]
    parts += [c[k][0].astype(np.uint8).tobytes() for k in ("pool1", "pool2", "pool3")]
    return b"".join(parts)


def shape_trace(params: Params, window: np.ndarray) -> list[tuple[int, ...]]:
    """Activation shapes after each stage of the forward pass for one window."""
    _, cache = forward(params, window)
    return cache["trace"]

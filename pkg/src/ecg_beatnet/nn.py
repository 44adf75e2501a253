"""Dense-array layer primitives with hand-written backward passes.

Every layer takes either a single example or a batch with one extra leading
axis; the batched form is the single-example map applied row by row.
Forward functions return ``(output, cache)``; backward functions take that
cache and the upstream gradient.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .errors import NonFiniteError, OddLength, ShapeMismatch


@dataclass
class Param:
    value: np.ndarray
    grad: np.ndarray = field(init=False)
    m: np.ndarray = field(init=False)
    v: np.ndarray = field(init=False)
    step: int = 0

    def __post_init__(self):
        self.grad = np.zeros_like(self.value)
        self.m = np.zeros_like(self.value)
        self.v = np.zeros_like(self.value)

    @property
    def shape(self) -> tuple[int, ...]:
        return self.value.shape

    def zero_grad(self) -> None:
        self.grad.fill(0)


def check_finite(x: np.ndarray, what: str = "tensor") -> np.ndarray:
    if not np.all(np.isfinite(x)):
        raise NonFiniteError(f"{what} contains NaN or Inf")
    return x


def _batched(x: np.ndarray, ndim: int) -> tuple[np.ndarray, bool]:
    if x.ndim == ndim:
        return x[None], True
    if x.ndim == ndim + 1:
        return x, False
    raise ShapeMismatch(f"expected {ndim}-D input (or batch of them), got shape {x.shape}")


# -- convolution -----------------------------------------------------------


def conv1d(x: np.ndarray, w: np.ndarray, b: np.ndarray):
    """Stride-1 "same" cross-correlation: ``y[o,t] = b[o] + sum_{c,k} x[c,t+k-P] w[o,c,k]``."""
    xb, single = _batched(x, 2)
    n, c_in, length = xb.shape
    if w.ndim != 3 or w.shape[1] != c_in:
        raise ShapeMismatch(f"kernel {w.shape} does not match input channels {c_in}")
    c_out, _, k = w.shape
    if k % 2 == 0:
        raise ShapeMismatch(f"kernel width must be odd, got {k}")
    if b.shape != (c_out,):
        raise ShapeMismatch(f"bias shape {b.shape} != ({c_out},)")
    pad = (k - 1) // 2
    xp = np.pad(xb, ((0, 0), (0, 0), (pad, pad)))
    # (n, c_in, L, k) -> (n*L, c_in*k)
    cols = sliding_window_view(xp, k, axis=2).transpose(0, 2, 1, 3).reshape(n * length, c_in * k)
    y = (cols @ w.reshape(c_out, -1).T).reshape(n, length, c_out).transpose(0, 2, 1) + b[:, None]
    y = np.ascontiguousarray(y)
    cache = (cols, w, xb.shape, single)
    return (y[0] if single else y), cache


def conv1d_backward(cache, dy: np.ndarray):
    cols, w, (n, c_in, length), single = cache
    c_out, _, k = w.shape
    pad = (k - 1) // 2
    dyb = dy[None] if single else dy
    dy2 = dyb.transpose(0, 2, 1).reshape(n * length, c_out)
    dw = (dy2.T @ cols).reshape(w.shape)
    db = dyb.sum(axis=(0, 2))
    dcols = (dy2 @ w.reshape(c_out, -1)).reshape(n, length, c_in, k)
    dxp = np.zeros((n, c_in, length + 2 * pad), dtype=dcols.dtype)
    for j in range(k):
        dxp[:, :, j : j + length] += dcols[:, :, :, j].transpose(0, 2, 1)
    dx = dxp[:, :, pad : pad + length]
    return (dx[0] if single else np.ascontiguousarray(dx)), dw, db


# -- activations and pooling ------------------------------------------------


def relu(x: np.ndarray):
    mask = x > 0
    return np.where(mask, x, 0).astype(x.dtype, copy=False), mask


def relu_backward(mask: np.ndarray, dy: np.ndarray) -> np.ndarray:
    return np.where(mask, dy, 0).astype(dy.dtype, copy=False)


def maxpool1d(x: np.ndarray):
    """Window 2, stride 2 max pooling; ties resolve to the earlier sample."""
    xb, single = _batched(x, 2)
    n, c, length = xb.shape
    if length % 2:
        raise OddLength(f"max pooling needs an even length, got {length}")
    pairs = xb.reshape(n, c, length // 2, 2)
    arg = pairs.argmax(axis=-1)
    y = np.take_along_axis(pairs, arg[..., None], axis=-1)[..., 0]
    cache = (arg, single)
    return (y[0] if single else y), cache


def maxpool1d_backward(cache, dy: np.ndarray) -> np.ndarray:
    arg, single = cache
    dyb = dy[None] if single else dy
    n, c, half = arg.shape
    dx = np.zeros((n, c, half, 2), dtype=dyb.dtype)
    np.put_along_axis(dx, arg[..., None], dyb[..., None], axis=-1)
    dx = dx.reshape(n, c, 2 * half)
    return dx[0] if single else dx


def global_avg_pool(x: np.ndarray):
    if x.shape[-1] < 1:
        raise ShapeMismatch("cannot pool an empty axis")
    return x.mean(axis=-1), x.shape


def global_avg_pool_backward(shape, dy: np.ndarray) -> np.ndarray:
    return np.broadcast_to(dy[..., None] / shape[-1], shape).astype(dy.dtype)


# -- dense -----------------------------------------------------------------


def dense(x: np.ndarray, w: np.ndarray, b: np.ndarray):
    xb, single = _batched(x, 1)
    if w.ndim != 2 or w.shape[1] != xb.shape[1]:
        raise ShapeMismatch(f"weight {w.shape} does not match input width {xb.shape[1]}")
    if b.shape != (w.shape[0],):
        raise ShapeMismatch(f"bias shape {b.shape} != ({w.shape[0]},)")
    y = xb @ w.T + b
    return (y[0] if single else y), (xb, w, single)


def dense_backward(cache, dy: np.ndarray):
    xb, w, single = cache
    dyb = dy[None] if single else dy
    dx = dyb @ w
    dw = dyb.T @ xb
    db = dyb.sum(axis=0)
    return (dx[0] if single else dx), dw, db


# -- loss ------------------------------------------------------------------


def softmax(logits: np.ndarray) -> np.ndarray:
    z = logits - logits.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


def softmax_xent(logits: np.ndarray, target, weight=1.0):
    """Weighted cross-entropy and its gradient with respect to the logits.

    Works on one example (``logits`` of shape ``(5,)``) or a batch; for a
    batch the per-example losses are returned, not their mean.
    """
    zb, single = _batched(np.asarray(logits), 1)
    target = np.atleast_1d(np.asarray(target, dtype=np.int64))
    weight = np.broadcast_to(np.asarray(weight, dtype=zb.dtype), target.shape)
    if np.any(weight <= 0):
        raise ValueError("loss weights must be positive")
    z = zb - zb.max(axis=-1, keepdims=True)
    log_norm = np.log(np.exp(z).sum(axis=-1))
    rows = np.arange(zb.shape[0])
    loss = weight * (log_norm - z[rows, target])
    p = np.exp(z - log_norm[:, None])
    p[rows, target] -= 1
    dlogits = weight[:, None] * p
    if single:
        return float(loss[0]), dlogits[0]
    return loss, dlogits


# -- gradient checking -----------------------------------------------------


@dataclass
class GradCheckResult:
    max_rel_error: float
    checked: int
    skipped: int  # coordinates whose +/-epsilon probe crossed a kink


def grad_check_report(
    f,
    inputs: list[np.ndarray],
    analytic: list[np.ndarray],
    epsilon: float = 1e-5,
    max_coords: int = 200,
    seed: int = 0,
    signature=None,
) -> GradCheckResult:
    """Compare ``analytic`` against central differences of ``f``.

    ``f`` is called with no arguments and must read ``inputs``, which are
    perturbed in place and restored. At most ``max_coords`` coordinates are
    checked (every array contributes some); all are used when fewer exist.

    ``signature``, if given, returns a value identifying the active linear
    piece of ``f`` (ReLU masks, pooling argmaxes). A coordinate whose
    perturbations change it straddles a kink where the central difference is
    not a derivative estimate; it is skipped and another coordinate drawn.
    """
    for a in inputs:
        if a.dtype != np.float64:
            raise TypeError("gradient checks run in float64")
    sizes = np.array([a.size for a in inputs])
    total = int(sizes.sum())
    rng = np.random.default_rng(seed)
    if total <= max_coords:
        quota = sizes.copy()
    else:
        quota = np.minimum(sizes, np.maximum(np.minimum(sizes, 4), np.round(max_coords * sizes / total).astype(int)))
        while quota.sum() < max_coords:  # rounding can fall short
            quota[np.argmax(sizes - quota)] += 1
    base = signature() if signature is not None else None
    worst = 0.0
    checked = skipped = 0
    for i, (s, q) in enumerate(zip(sizes, quota)):
        flat = inputs[i].reshape(-1)
        grad = analytic[i].reshape(-1)
        done = 0
        for j in rng.permutation(s) if q < s else range(s):
            if done == q:
                break
            old = flat[j]
            flat[j] = old + epsilon
            up = float(f())
            kink = signature is not None and signature() != base
            flat[j] = old - epsilon
            down = float(f())
            kink = kink or (signature is not None and signature() != base)
            flat[j] = old
            if kink:
                skipped += 1
                continue
            numeric = (up - down) / (2 * epsilon)
            a = float(grad[j])
            worst = max(worst, abs(a - numeric) / max(abs(a), abs(numeric), 1e-8))
            done += 1
        checked += done
    return GradCheckResult(worst, checked, skipped)


def grad_check(
    f,
    inputs: list[np.ndarray],
    analytic: list[np.ndarray],
    epsilon: float = 1e-5,
    max_coords: int = 200,
    seed: int = 0,
    signature=None,
) -> float:
    """Largest relative error ``|a-n| / max(|a|, |n|, 1e-8)`` over the checked coordinates."""
    return grad_check_report(f, inputs, analytic, epsilon, max_coords, seed, signature).max_rel_error

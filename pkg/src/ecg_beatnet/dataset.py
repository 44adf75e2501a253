"""Beat windows: baseline removal, segmentation, normalization, splits and the cache file."""

from __future__ import annotations

import math
import struct
from collections import Counter
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, NamedTuple, Sequence

import numpy as np
from scipy import ndimage

from ._io import atomic_write_bytes
from .errors import BadCache, ConfigError, EmptyClass, MissingLead
from .wfdb import N_CLASSES, AnnotationEvent, BeatClass, map_beat_class


@dataclass(frozen=True)
class PreprocessConfig:
    window_len: int = 256
    leads: tuple[int, ...] = (0, 1)
    baseline_filter: bool = True
    median_win_1: float = 0.2
    median_win_2: float = 0.6
    epsilon_std: float = 1e-6

    def __post_init__(self):
        object.__setattr__(self, "leads", tuple(int(i) for i in self.leads))
        if not isinstance(self.window_len, int) or self.window_len <= 0 or self.window_len % 2:
            raise ConfigError(f"window_len must be a positive even integer, got {self.window_len!r}")
        if not self.leads:
            raise ConfigError("at least one lead is required")
        if len(set(self.leads)) != len(self.leads):
            raise ConfigError(f"leads must be unique, got {list(self.leads)}")
        if any(i < 0 for i in self.leads):
            raise ConfigError(f"lead indices must be non-negative, got {list(self.leads)}")
        if not 0 < self.median_win_1 < self.median_win_2:
            raise ConfigError("median windows must satisfy 0 < median_win_1 < median_win_2")
        if not self.epsilon_std > 0:
            raise ConfigError("epsilon_std must be positive")


@dataclass(frozen=True)
class BeatWindow:
    record_id: str
    r_sample: int
    channels: np.ndarray  # (n_leads, window_len) float32
    label: BeatClass


@dataclass(frozen=True)
class DatasetSplit:
    seed: int
    train: list[int] = field(default_factory=list)
    val: list[int] = field(default_factory=list)
    test: list[int] = field(default_factory=list)


class PhysicalRecord(NamedTuple):
    signals: np.ndarray  # (n_signals, n_samples) in mV
    annotations: Sequence[AnnotationEvent]
    record_id: str
    fs: float = 360.0


def round_to_odd(x: float) -> int:
    n = max(1, int(math.floor(x + 0.5)))
    return n if n % 2 else n + 1


def remove_baseline(signal: np.ndarray, fs: float, w1: float = 0.2, w2: float = 0.6) -> np.ndarray:
    """Subtract a two-stage running-median estimate of baseline wander.

    Window lengths are ``w1*fs`` and ``w2*fs`` samples rounded to the nearest
    odd integer; edges are padded by replication.
    """
    x = np.asarray(signal, dtype=np.float64)
    if x.size == 0:
        raise ValueError("signal must be non-empty")
    if not 0 < w1 < w2:
        raise ValueError("need 0 < w1 < w2")
    stage1 = _running_median(x, round_to_odd(w1 * fs))
    stage2 = _running_median(stage1, round_to_odd(w2 * fs))
    return x - stage2


def _running_median(x: np.ndarray, size: int) -> np.ndarray:
    # scipy's mode="nearest" stops replicating once the window is longer than
    # about twice the signal, so pad explicitly and crop
    h = size // 2
    padded = np.pad(x, h, mode="edge")
    return ndimage.median_filter(padded, size=size, mode="nearest")[h : h + x.size]


def normalize_window(raw: np.ndarray, epsilon_std: float = 1e-6) -> np.ndarray:
    raw = np.asarray(raw, dtype=np.float64)
    if raw.ndim != 2 or raw.shape[1] < 2:
        raise ValueError(f"expected (n_leads, W>=2), got {raw.shape}")
    mean = raw.mean(axis=1, keepdims=True)
    std = raw.std(axis=1, keepdims=True)
    return (raw - mean) / np.maximum(std, epsilon_std)


def preprocess_signals(signals: np.ndarray, fs: float, config: PreprocessConfig) -> np.ndarray:
    """Select the configured leads and optionally strip baseline wander."""
    n_signals = signals.shape[0]
    for lead in config.leads:
        if lead >= n_signals:
            raise MissingLead(f"lead {lead} requested but record has {n_signals} signals")
    out = np.asarray(signals, dtype=np.float64)[list(config.leads)]
    if config.baseline_filter:
        out = np.stack([remove_baseline(s, fs, config.median_win_1, config.median_win_2) for s in out])
    return out


def segment_beats(
    records: Iterable[PhysicalRecord],
    config: PreprocessConfig = PreprocessConfig(),
    tally: Counter | None = None,
) -> list[BeatWindow]:
    """Cut one normalized window per mappable beat annotation.

    ``tally``, when given, counts ``emitted``, ``boundary`` (window left the
    record) and ``unmapped`` (code outside the five classes) annotations.
    """
    half = config.window_len // 2
    windows = []
    for rec in records:
        signals = preprocess_signals(rec.signals, rec.fs, config)
        n = signals.shape[1]
        for ann in rec.annotations:
            label = map_beat_class(ann.code)
            if label is None:
                outcome = "unmapped"
            elif ann.sample_index - half < 0 or ann.sample_index + half > n:
                outcome = "boundary"
            else:
                r = ann.sample_index
                chunk = normalize_window(signals[:, r - half : r + half], config.epsilon_std)
                windows.append(BeatWindow(rec.record_id, r, chunk.astype(np.float32), label))
                outcome = "emitted"
            if tally is not None:
                tally[outcome] += 1
    return windows


def stack_windows(windows: Sequence[BeatWindow]) -> tuple[np.ndarray, np.ndarray]:
    if not windows:
        return np.zeros((0, 0, 0), dtype=np.float32), np.zeros(0, dtype=np.int64)
    x = np.stack([w.channels for w in windows]).astype(np.float32, copy=False)
    y = np.array([int(w.label) for w in windows], dtype=np.int64)
    return x, y


def _half_up(x: float) -> int:
    return int(math.floor(x + 0.5))


def stratified_split(
    labels: Sequence[int],
    fractions: tuple[float, float, float] = (0.8, 0.1, 0.1),
    seed: int = 0,
) -> DatasetSplit:
    """Per-class shuffled train/val/test buckets.

    Class ``c`` is permuted with a generator seeded by ``(seed, c)`` and cut
    at ``round(n_c*train)`` and ``round(n_c*(train+val))`` (halves round up).
    Classes with no members contribute nothing.
    """
    fractions = tuple(float(f) for f in fractions)
    if len(fractions) != 3 or any(f < 0 for f in fractions) or abs(sum(fractions) - 1.0) > 1e-9:
        raise ConfigError(f"split fractions must be three non-negative numbers summing to 1, got {fractions}")
    labels = np.asarray(labels, dtype=np.int64)
    if labels.size and (labels.min() < 0 or labels.max() >= N_CLASSES):
        raise ValueError("labels must be class indices 0..4")
    train_f, val_f, _ = fractions
    buckets: tuple[list[int], list[int], list[int]] = ([], [], [])
    for c in range(N_CLASSES):
        members = np.flatnonzero(labels == c)
        if members.size == 0:
            continue
        rng = np.random.default_rng([seed, c])
        perm = members[rng.permutation(members.size)]
        a = _half_up(members.size * train_f)
        b = _half_up(members.size * (train_f + val_f))
        for bucket, part in zip(buckets, (perm[:a], perm[a:b], perm[b:])):
            bucket.extend(int(i) for i in part)
    train, val, test = (sorted(b) for b in buckets)
    return DatasetSplit(seed=seed, train=train, val=val, test=test)


def class_weights(labels: Sequence[int]) -> np.ndarray:
    labels = np.asarray(labels, dtype=np.int64)
    counts = np.bincount(labels, minlength=N_CLASSES)[:N_CLASSES]
    empty = [BeatClass(c).name for c in range(N_CLASSES) if counts[c] == 0]
    if empty:
        raise EmptyClass(f"no examples for class(es): {', '.join(empty)}")
    return labels.size / (N_CLASSES * counts.astype(np.float64))


# -- cache -----------------------------------------------------------------

CACHE_MAGIC = b"EBW1"
CACHE_VERSION = 1
_CACHE_HEAD = struct.Struct("<4sHIHH")


def encode_cache(windows: Sequence[BeatWindow]) -> bytes:
    if windows:
        n_leads, window_len = windows[0].channels.shape
    else:
        n_leads, window_len = 0, 0
    parts = [_CACHE_HEAD.pack(CACHE_MAGIC, CACHE_VERSION, len(windows), n_leads, window_len)]
    for w in windows:
        if w.channels.shape != (n_leads, window_len):
            raise ValueError("all windows must share one shape")
        rid = w.record_id.encode("utf-8")
        if len(rid) > 255:
            raise ValueError(f"record id too long: {w.record_id!r}")
        parts.append(struct.pack("<B", len(rid)) + rid + struct.pack("<qB", w.r_sample, int(w.label)))
        parts.append(np.ascontiguousarray(w.channels, dtype="<f4").tobytes())
    return b"".join(parts)


def decode_cache(blob: bytes) -> list[BeatWindow]:
    if len(blob) < _CACHE_HEAD.size:
        raise BadCache("cache file too short for its header")
    magic, version, n, n_leads, window_len = _CACHE_HEAD.unpack_from(blob, 0)
    if magic != CACHE_MAGIC:
        raise BadCache(f"bad cache magic {magic!r}")
    if version != CACHE_VERSION:
        raise BadCache(f"unsupported cache version {version}")
    pos = _CACHE_HEAD.size
    n_values = n_leads * window_len
    windows = []
    try:
        for _ in range(n):
            (rid_len,) = struct.unpack_from("<B", blob, pos)
            pos += 1
            rid = blob[pos : pos + rid_len].decode("utf-8")
            pos += rid_len
            r_sample, label = struct.unpack_from("<qB", blob, pos)
            pos += 9
            end = pos + 4 * n_values
            if end > len(blob):
                raise BadCache("cache file truncated")
            channels = np.frombuffer(blob, dtype="<f4", count=n_values, offset=pos)
            pos = end
            windows.append(BeatWindow(rid, r_sample, channels.reshape(n_leads, window_len).astype(np.float32), BeatClass(label)))
    except struct.error:
        raise BadCache("cache file truncated") from None
    except ValueError as e:
        raise BadCache(f"corrupt cache entry: {e}") from None
    if pos != len(blob):
        raise BadCache(f"{len(blob) - pos} trailing bytes after {n} windows")
    return windows


def write_cache(path: str | Path, windows: Sequence[BeatWindow]) -> None:
    atomic_write_bytes(path, encode_cache(windows))


def read_cache(path: str | Path) -> list[BeatWindow]:
    return decode_cache(Path(path).read_bytes())


def balanced_subset(labels: Sequence[int], size: int, seed: int = 0) -> list[int]:
    """Indices of a class-balanced subset of ``size`` windows.

    Each class gets ``size // 5`` windows, the first ``size % 5`` classes one
    more; a class with fewer members contributes all of them.
    """
    labels = np.asarray(labels, dtype=np.int64)
    base, extra = divmod(int(size), N_CLASSES)
    chosen: list[int] = []
    for c in range(N_CLASSES):
        members = np.flatnonzero(labels == c)
        quota = min(base + (1 if c < extra else 0), members.size)
        rng = np.random.default_rng([seed, c, 1])
        chosen.extend(int(i) for i in rng.choice(members, size=quota, replace=False))
    return sorted(chosen)

"""Readers for the WFDB files that make up an MIT-BIH record.

Only what the arrhythmia database actually uses is supported: text ``.hea``
headers, format-212 ``.dat`` signal files and MIT-format ``.atr`` annotation
streams.
"""

from __future__ import annotations

import enum
import re
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import (
    MalformedHeader,
    ShapeMismatch,
    TruncatedAnnotationFile,
    TruncatedSignalFile,
    UnknownPseudoCodeLayout,
    UnsupportedFormat,
)

DEFAULT_FS = 250.0
DEFAULT_GAIN = 200.0

# Annotation pseudo-codes
SKIP, NUM, SUB, CHN, AUX = 59, 60, 61, 62, 63


class BeatClass(enum.IntEnum):
    NORMAL = 0
    LBBB = 1
    RBBB = 2
    APC = 3
    PVC = 4

    @property
    def short(self) -> str:
        return _SHORT_NAMES[self]


_SHORT_NAMES = {
    BeatClass.NORMAL: "N",
    BeatClass.LBBB: "L",
    BeatClass.RBBB: "R",
    BeatClass.APC: "A",
    BeatClass.PVC: "V",
}

# WFDB annotation codes: N=1, L=2, R=3, V=5, A=8
_CODE_TO_CLASS = {
    1: BeatClass.NORMAL,
    2: BeatClass.LBBB,
    3: BeatClass.RBBB,
    8: BeatClass.APC,
    5: BeatClass.PVC,
}

N_CLASSES = len(BeatClass)


@dataclass(frozen=True)
class SignalSpec:
    file_name: str
    format_code: int
    adc_gain: float
    baseline: int
    adc_resolution: int
    adc_zero: int
    initial_value: int
    checksum: int | None
    description: str = ""
    samples_per_frame: int = 1
    byte_offset: int = 0
    units: str = "mV"

    @property
    def effective_gain(self) -> float:
        return self.adc_gain if self.adc_gain != 0 else DEFAULT_GAIN


@dataclass(frozen=True)
class RecordHeader:
    record_name: str
    n_signals: int
    sampling_frequency: float = DEFAULT_FS
    n_samples: int = 0
    signals: tuple[SignalSpec, ...] = ()
    comments: tuple[str, ...] = ()

    def __post_init__(self):
        if len(self.signals) != self.n_signals:
            raise MalformedHeader(
                f"record {self.record_name!r}: header declares {self.n_signals} "
                f"signals but describes {len(self.signals)}"
            )
        if not self.sampling_frequency > 0:
            raise MalformedHeader(f"record {self.record_name!r}: sampling frequency must be positive")

    @property
    def descriptions(self) -> list[str]:
        return [s.description for s in self.signals]


@dataclass(frozen=True)
class SignalData:
    """Digital samples, shape ``(n_signals, n_samples)``."""

    samples: np.ndarray

    def __post_init__(self):
        if self.samples.ndim != 2:
            raise ShapeMismatch(f"samples must be 2-D, got shape {self.samples.shape}")
        self.samples.setflags(write=False)

    @property
    def n_signals(self) -> int:
        return self.samples.shape[0]

    @property
    def n_samples(self) -> int:
        return self.samples.shape[1]


@dataclass(frozen=True)
class AnnotationEvent:
    sample_index: int
    code: int
    subtype: int = 0
    channel: int = 0
    num: int = 0
    aux: bytes | None = None


@dataclass(frozen=True)
class ChecksumResult:
    signal: int
    description: str
    computed: int
    expected: int | None

    @property
    def ok(self) -> bool:
        if self.expected is None:
            return True
        return (self.computed - self.expected) % 65536 == 0


@dataclass
class Record:
    name: str
    header: RecordHeader
    data: SignalData
    annotations: list[AnnotationEvent] = field(default_factory=list)

    def physical(self) -> np.ndarray:
        return to_physical(self.data, self.header)


# -- headers ---------------------------------------------------------------

_FORMAT_RE = re.compile(r"^(\d+)(?:x(\d+))?(?::(\d+))?(?:\+(\d+))?$")
_GAIN_RE = re.compile(r"^([-+0-9.eE]+)(?:\(([-+]?\d+)\))?(?:/(\S+))?$")


def _int(token: str, what: str, line: str) -> int:
    try:
        return int(token)
    except ValueError:
        raise MalformedHeader(f"non-numeric {what} {token!r} in header line {line!r}") from None


def _parse_signal_line(line: str) -> SignalSpec:
    tokens = line.split()
    if len(tokens) < 2:
        raise MalformedHeader(f"signal line needs at least a file name and format: {line!r}")
    m = _FORMAT_RE.match(tokens[1])
    if not m:
        raise MalformedHeader(f"bad format field {tokens[1]!r} in {line!r}")
    fmt = int(m.group(1))
    spf = int(m.group(2) or 1)
    offset = int(m.group(4) or 0)

    gain, baseline, units = DEFAULT_GAIN, None, "mV"
    if len(tokens) > 2:
        g = _GAIN_RE.match(tokens[2])
        if not g:
            raise MalformedHeader(f"bad gain field {tokens[2]!r} in {line!r}")
        try:
            gain = float(g.group(1))
        except ValueError:
            raise MalformedHeader(f"non-numeric gain {tokens[2]!r} in {line!r}") from None
        if g.group(2) is not None:
            baseline = int(g.group(2))
        units = g.group(3) or units
    resolution = _int(tokens[3], "ADC resolution", line) if len(tokens) > 3 else 12
    zero = _int(tokens[4], "ADC zero", line) if len(tokens) > 4 else 0
    initial = _int(tokens[5], "initial value", line) if len(tokens) > 5 else zero
    checksum = _int(tokens[6], "checksum", line) if len(tokens) > 6 else None
    if len(tokens) > 7:
        _int(tokens[7], "block size", line)
    description = " ".join(tokens[8:])
    return SignalSpec(
        file_name=tokens[0],
        format_code=fmt,
        adc_gain=gain,
        baseline=zero if baseline is None else baseline,
        adc_resolution=resolution,
        adc_zero=zero,
        initial_value=initial,
        checksum=checksum,
        description=description,
        samples_per_frame=spf,
        byte_offset=offset,
        units=units,
    )


def parse_header(text: str) -> RecordHeader:
    """Parse the contents of a single-segment ``.hea`` file."""
    lines, comments = [], []
    for raw in text.splitlines():
        stripped = raw.strip()
        if not stripped:
            continue
        if stripped.startswith("#"):
            comments.append(stripped[1:].strip())
            continue
        lines.append(stripped)
    if not lines:
        raise MalformedHeader("header has no record line")

    record_line = lines[0]
    tokens = record_line.split()
    if len(tokens) < 2:
        raise MalformedHeader(f"record line needs a name and a signal count: {record_line!r}")
    name = tokens[0]
    if "/" in name:
        raise MalformedHeader(f"multi-segment records are not supported: {name!r}")
    n_signals = _int(tokens[1], "signal count", record_line)
    if n_signals < 1:
        raise MalformedHeader(f"record {name!r} has no signals")
    fs = DEFAULT_FS
    if len(tokens) > 2:
        fs_token = tokens[2].split("/")[0]
        try:
            fs = float(fs_token)
        except ValueError:
            raise MalformedHeader(f"non-numeric sampling frequency {tokens[2]!r}") from None
    n_samples = _int(tokens[3], "sample count", record_line) if len(tokens) > 3 else 0

    signal_lines = lines[1:]
    if len(signal_lines) != n_signals:
        raise MalformedHeader(
            f"record {name!r} declares {n_signals} signals but has {len(signal_lines)} signal lines"
        )
    return RecordHeader(
        record_name=name,
        n_signals=n_signals,
        sampling_frequency=fs,
        n_samples=n_samples,
        signals=tuple(_parse_signal_line(s) for s in signal_lines),
        comments=tuple(comments),
    )


# -- signals ---------------------------------------------------------------


def decode_format212(data: bytes, n_signals: int, n_samples: int) -> SignalData:
    """Unpack frame-interleaved 12-bit two's-complement pairs.

    Each 3-byte group ``b0 b1 b2`` holds two samples: the low nibble of ``b1``
    is the high nibble of the first, the high nibble of ``b1`` the high
    nibble of the second.
    """
    if n_signals < 1:
        raise ValueError("n_signals must be >= 1")
    total = n_signals * n_samples
    needed = (total * 3 + 1) // 2
    if len(data) < needed:
        raise TruncatedSignalFile(
            f"format 212 needs {needed} bytes for {n_samples} samples x {n_signals} signals, got {len(data)}"
        )
    n_groups = (total + 1) // 2
    raw = np.frombuffer(data, dtype=np.uint8, count=min(len(data), n_groups * 3))
    if raw.size < n_groups * 3:
        raw = np.concatenate([raw, np.zeros(n_groups * 3 - raw.size, dtype=np.uint8)])
    triples = raw.reshape(-1, 3).astype(np.int32)
    b0, b1, b2 = triples[:, 0], triples[:, 1], triples[:, 2]
    out = np.empty((n_groups, 2), dtype=np.int32)
    out[:, 0] = ((b1 & 0x0F) << 8) | b0
    out[:, 1] = ((b1 & 0xF0) << 4) | b2
    flat = out.reshape(-1)[:total]
    flat = np.where(flat >= 2048, flat - 4096, flat)
    samples = flat.reshape(n_samples, n_signals).T.astype(np.int16)
    return SignalData(np.ascontiguousarray(samples))


def verify_checksums(data: SignalData, header: RecordHeader) -> list[ChecksumResult]:
    if data.n_signals != header.n_signals:
        raise ShapeMismatch(f"data has {data.n_signals} signals, header {header.n_signals}")
    results = []
    for i, spec in enumerate(header.signals):
        total = int(data.samples[i].astype(np.int64).sum())
        computed = (total + 32768) % 65536 - 32768
        expected = None
        if spec.checksum is not None:
            expected = (spec.checksum + 32768) % 65536 - 32768
        results.append(ChecksumResult(i, spec.description, computed, expected))
    return results


def to_physical(data: SignalData, header: RecordHeader) -> np.ndarray:
    """Digital ADC units to millivolts, shape ``(n_signals, n_samples)``."""
    if data.n_signals != header.n_signals:
        raise ShapeMismatch(f"data has {data.n_signals} signals, header {header.n_signals}")
    baseline = np.array([s.baseline for s in header.signals], dtype=np.float64)[:, None]
    gain = np.array([s.effective_gain for s in header.signals], dtype=np.float64)[:, None]
    return (data.samples.astype(np.float64) - baseline) / gain


# -- annotations -----------------------------------------------------------


def parse_annotations(data: bytes) -> list[AnnotationEvent]:
    """Decode an MIT-format annotation stream.

    NUM and CHN apply to the event they follow and persist for later events;
    SUB and AUX apply only to the event they follow. NUM and SUB are signed
    bytes, CHN an unsigned byte, as in the reference readers.
    """
    n = len(data)
    events: list[dict] = []
    t = 0
    num = 0
    chan = 0
    pos = 0
    while True:
        if pos + 2 > n:
            raise TruncatedAnnotationFile(f"annotation stream ends without EOF word at byte {pos}")
        word = data[pos] | (data[pos + 1] << 8)
        word_at = pos
        pos += 2
        code = word >> 10
        delta = word & 0x3FF
        if code == 0 and delta == 0:
            break
        if code == SKIP:
            if pos + 4 > n:
                raise TruncatedAnnotationFile(f"SKIP at byte {word_at} lacks its 4-byte offset")
            hi = data[pos] | (data[pos + 1] << 8)
            lo = data[pos + 2] | (data[pos + 3] << 8)
            pos += 4
            offset = (hi << 16) | lo
            if offset >= 1 << 31:
                offset -= 1 << 32
            t += offset
        elif code == NUM:
            num = _int8(delta)
            if events:
                events[-1]["num"] = num
        elif code == SUB:
            if events:
                events[-1]["subtype"] = _int8(delta)
        elif code == CHN:
            chan = delta & 0xFF
            if events:
                events[-1]["channel"] = chan
        elif code == AUX:
            padded = delta + (delta & 1)
            if pos + padded > n:
                raise TruncatedAnnotationFile(f"AUX at byte {word_at} needs {delta} bytes")
            aux = bytes(data[pos : pos + delta])
            pos += padded
            if events:
                events[-1]["aux"] = aux
        elif 50 <= code <= 58:
            raise UnknownPseudoCodeLayout(f"annotation code {code} at byte {word_at} has no known layout")
        else:
            # code 0 with a non-zero delta only moves the clock
            t += delta
            if code:
                events.append({"sample_index": t, "code": code, "num": num, "channel": chan})
    return [AnnotationEvent(**e) for e in events]


def _int8(v: int) -> int:
    v &= 0xFF
    return v - 256 if v >= 128 else v


def map_beat_class(code: int) -> BeatClass | None:
    return _CODE_TO_CLASS.get(code)


# -- files -----------------------------------------------------------------


def read_header(path: str | Path) -> RecordHeader:
    path = Path(path)
    try:
        return parse_header(path.read_text(encoding="ascii", errors="replace"))
    except MalformedHeader as e:
        raise MalformedHeader(f"{path}: {e}") from None


def read_signals(directory: str | Path, header: RecordHeader) -> SignalData:
    directory = Path(directory)
    groups: dict[str, list[int]] = {}
    for i, spec in enumerate(header.signals):
        if spec.format_code != 212:
            raise UnsupportedFormat(f"signal {i} ({spec.description}) uses format {spec.format_code}; only 212 is supported")
        if spec.samples_per_frame != 1:
            raise UnsupportedFormat(f"signal {i}: multi-sample frames are not supported")
        groups.setdefault(spec.file_name, []).append(i)

    per_signal: dict[int, np.ndarray] = {}
    n_samples = header.n_samples
    for file_name, idx in groups.items():
        path = directory / file_name
        blob = path.read_bytes()[header.signals[idx[0]].byte_offset :]
        count = n_samples if n_samples > 0 else (len(blob) * 2 // 3) // len(idx)
        try:
            decoded = decode_format212(blob, len(idx), count)
        except TruncatedSignalFile as e:
            raise TruncatedSignalFile(f"{path}: {e}") from None
        for row, i in enumerate(idx):
            per_signal[i] = decoded.samples[row]
    lengths = {v.size for v in per_signal.values()}
    if len(lengths) != 1:
        raise ShapeMismatch(f"record {header.record_name}: signal files disagree on length")
    return SignalData(np.stack([per_signal[i] for i in range(header.n_signals)]))


def read_annotations(path: str | Path) -> list[AnnotationEvent]:
    path = Path(path)
    try:
        return parse_annotations(path.read_bytes())
    except (TruncatedAnnotationFile, UnknownPseudoCodeLayout) as e:
        raise type(e)(f"{path}: {e}") from None


def read_record(directory: str | Path, name: str, annotator: str | None = "atr") -> Record:
    directory = Path(directory)
    header = read_header(directory / f"{name}.hea")
    data = read_signals(directory, header)
    annotations = read_annotations(directory / f"{name}.{annotator}") if annotator else []
    return Record(name, header, data, annotations)

"""Confusion matrix and the per-class one-vs-rest statistics derived from it."""

from __future__ import annotations

import json
import math
from dataclasses import dataclass
from typing import Iterable

import numpy as np

from .errors import EmptyMatrix, UndefinedMetric
from .wfdb import N_CLASSES, BeatClass

REPORT_SCHEMA_VERSION = 1


class ConfusionMatrix:
    """Counts indexed ``[true class, predicted class]``."""

    def __init__(self, counts=None):
        if counts is None:
            counts = np.zeros((N_CLASSES, N_CLASSES), dtype=np.int64)
        counts = np.array(counts, dtype=np.int64)
        if counts.shape != (N_CLASSES, N_CLASSES) or np.any(counts < 0):
            raise ValueError("counts must be a non-negative 5x5 matrix")
        self.counts = counts

    @classmethod
    def from_labels(cls, truth: Iterable[int], pred: Iterable[int]) -> ConfusionMatrix:
        cm = cls()
        np.add.at(cm.counts, (np.asarray(list(truth), dtype=np.int64), np.asarray(list(pred), dtype=np.int64)), 1)
        return cm

    def accumulate(self, truth: int, pred: int) -> ConfusionMatrix:
        self.counts[int(truth), int(pred)] += 1
        return self

    def merge(self, other: ConfusionMatrix) -> ConfusionMatrix:
        return ConfusionMatrix(self.counts + other.counts)

    @property
    def total(self) -> int:
        return int(self.counts.sum())

    @property
    def trace(self) -> int:
        return int(np.trace(self.counts))

    def __eq__(self, other):
        return isinstance(other, ConfusionMatrix) and np.array_equal(self.counts, other.counts)

    def __repr__(self):
        return f"ConfusionMatrix({self.counts.tolist()})"


def overall_accuracy(cm: ConfusionMatrix) -> float:
    if cm.total == 0:
        raise EmptyMatrix("confusion matrix is empty")
    return cm.trace / cm.total


def _one_vs_rest(cm: ConfusionMatrix, c: int) -> tuple[int, int, int, int]:
    counts = cm.counts
    tp = int(counts[c, c])
    fn = int(counts[c, :].sum()) - tp
    fp = int(counts[:, c].sum()) - tp
    tn = cm.total - tp - fn - fp
    return tp, fn, fp, tn


def sensitivity(cm: ConfusionMatrix, c: int) -> float:
    tp, fn, _, _ = _one_vs_rest(cm, int(c))
    if tp + fn == 0:
        raise UndefinedMetric(f"sensitivity of {BeatClass(c).name} undefined: no true examples")
    return tp / (tp + fn)


def specificity(cm: ConfusionMatrix, c: int) -> float:
    _, _, fp, tn = _one_vs_rest(cm, int(c))
    if tn + fp == 0:
        raise UndefinedMetric(f"specificity of {BeatClass(c).name} undefined: no negative examples")
    return tn / (tn + fp)


def _maybe(fn, cm, c):
    try:
        return fn(cm, c)
    except UndefinedMetric:
        return None


@dataclass(frozen=True)
class ClassStats:
    sensitivity: float | None
    specificity: float | None
    support: int


@dataclass(frozen=True)
class EvalReport:
    overall_accuracy: float
    per_class: dict[str, ClassStats]
    macro_sensitivity: float | None
    macro_specificity: float | None
    n_total: int
    confusion: list[list[int]]

    def to_dict(self) -> dict:
        return {
            "schema_version": REPORT_SCHEMA_VERSION,
            "n_total": self.n_total,
            "overall_accuracy": self.overall_accuracy,
            "macro_sensitivity": self.macro_sensitivity,
            "macro_specificity": self.macro_specificity,
            "per_class": {
                name: {"sensitivity": s.sensitivity, "specificity": s.specificity, "support": s.support}
                for name, s in self.per_class.items()
            },
            "confusion_matrix": self.confusion,
        }

    def to_json(self) -> str:
        return _dumps(self.to_dict()) + "\n"

    @classmethod
    def from_dict(cls, doc: dict) -> EvalReport:
        return cls(
            overall_accuracy=doc["overall_accuracy"],
            per_class={
                name: ClassStats(v["sensitivity"], v["specificity"], v["support"]) for name, v in doc["per_class"].items()
            },
            macro_sensitivity=doc["macro_sensitivity"],
            macro_specificity=doc["macro_specificity"],
            n_total=doc["n_total"],
            confusion=doc["confusion_matrix"],
        )

    @classmethod
    def from_json(cls, text: str) -> EvalReport:
        return cls.from_dict(json.loads(text))

    def rounded(self, places: int = 6) -> EvalReport:
        r = lambda v: None if v is None else round(v, places)  # noqa: E731
        return EvalReport(
            overall_accuracy=r(self.overall_accuracy),
            per_class={k: ClassStats(r(v.sensitivity), r(v.specificity), v.support) for k, v in self.per_class.items()},
            macro_sensitivity=r(self.macro_sensitivity),
            macro_specificity=r(self.macro_specificity),
            n_total=self.n_total,
            confusion=self.confusion,
        )


def _mean_defined(values) -> float | None:
    vals = [v for v in values if v is not None]
    return sum(vals) / len(vals) if vals else None


def report(cm: ConfusionMatrix) -> EvalReport:
    acc = overall_accuracy(cm)
    per_class = {}
    for c in BeatClass:
        per_class[c.name] = ClassStats(
            sensitivity=_maybe(sensitivity, cm, c),
            specificity=_maybe(specificity, cm, c),
            support=int(cm.counts[c].sum()),
        )
    return EvalReport(
        overall_accuracy=acc,
        per_class=per_class,
        macro_sensitivity=_mean_defined(s.sensitivity for s in per_class.values()),
        macro_specificity=_mean_defined(s.specificity for s in per_class.values()),
        n_total=cm.total,
        confusion=cm.counts.tolist(),
    )


def _dumps(obj, indent: int = 0) -> str:
    """JSON with floats at six decimal places and keys in insertion order."""
    pad = "  " * (indent + 1)
    end = "  " * indent
    if isinstance(obj, dict):
        if not obj:
            return "{}"
        items = [f"{pad}{json.dumps(str(k))}: {_dumps(v, indent + 1)}" for k, v in obj.items()]
        return "{\n" + ",\n".join(items) + "\n" + end + "}"
    if isinstance(obj, (list, tuple)):
        if all(not isinstance(v, (dict, list, tuple)) for v in obj):
            return "[" + ", ".join(_dumps(v, indent) for v in obj) + "]"
        return "[\n" + ",\n".join(pad + _dumps(v, indent + 1) for v in obj) + "\n" + end + "]"
    if isinstance(obj, bool) or obj is None:
        return json.dumps(obj)
    if isinstance(obj, (int, np.integer)):
        return str(int(obj))
    if isinstance(obj, (float, np.floating)):
        if not math.isfinite(obj):
            return "null"
        return f"{float(obj):.6f}"
    return json.dumps(obj)

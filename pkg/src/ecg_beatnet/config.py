"""Run configuration: one JSON document, overridable from the command line.

Schema (every key optional; defaults shown)::

    {
      "data_dir": "data/mitdb",
      "work_dir": "work",
      "cache_path": null,              # default: <work_dir>/beats.ebw
      "base_url": "https://physionet.org/files/mitdb/1.0.0/",
      "records": [... the 48 MIT-BIH record names ...],
      "subset_size": null,             # class-balanced subset of the cache
      "preprocess": {"window_len": 256, "leads": [0, 1], "baseline_filter": true,
                     "median_win_1": 0.2, "median_win_2": 0.6, "epsilon_std": 1e-6},
      "model": {"seed": 0},
      "optimizer": {"lr": 0.001, "beta1": 0.9, "beta2": 0.999, "eps": 1e-8,
                    "batch_size": 64, "epochs": 30},
      "split": {"fractions": [0.8, 0.1, 0.1], "seed": 0}
    }

The model's input shape is taken from ``preprocess``; a ``model`` section
that names a different ``in_channels`` or ``window_len`` is rejected.
"""

from __future__ import annotations

import json
import os
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path

from .dataset import PreprocessConfig
from .errors import ConfigError
from .model import AdamHyper, ModelConfig

MITDB_RECORDS = (
    "100 101 102 103 104 105 106 107 108 109 111 112 113 114 115 116 117 118 119 121 122 123 124 "
    "200 201 202 203 205 207 208 209 210 212 213 214 215 217 219 220 221 222 223 228 230 231 232 233 234"
).split()

# Six records that between them carry all five beat classes.
CI_RECORDS = ["100", "109", "118", "207", "208", "232"]

PHYSIONET_MITDB = "https://physionet.org/files/mitdb/1.0.0/"
DATA_ENV = "ECG_BEATNET_DATA"


@dataclass(frozen=True)
class SplitConfig:
    fractions: tuple[float, float, float] = (0.8, 0.1, 0.1)
    seed: int = 0

    def __post_init__(self):
        fr = tuple(float(f) for f in self.fractions)
        object.__setattr__(self, "fractions", fr)
        if len(fr) != 3 or any(f < 0 for f in fr) or abs(sum(fr) - 1) > 1e-9:
            raise ConfigError(f"split fractions must be three non-negative numbers summing to 1, got {list(fr)}")


@dataclass(frozen=True)
class RunConfig:
    data_dir: Path = Path("data/mitdb")
    work_dir: Path = Path("work")
    cache_path: Path | None = None
    base_url: str = PHYSIONET_MITDB
    records: tuple[str, ...] = tuple(MITDB_RECORDS)
    subset_size: int | None = None
    preprocess: PreprocessConfig = field(default_factory=PreprocessConfig)
    model_seed: int = 0
    optimizer: AdamHyper = field(default_factory=AdamHyper)
    split: SplitConfig = field(default_factory=SplitConfig)

    def __post_init__(self):
        if not self.records:
            raise ConfigError("records must not be empty")
        if self.subset_size is not None and self.subset_size < 1:
            raise ConfigError("subset_size must be positive")

    @property
    def cache_file(self) -> Path:
        return Path(self.cache_path) if self.cache_path else Path(self.work_dir) / "beats.ebw"

    @property
    def checkpoint_file(self) -> Path:
        return Path(self.work_dir) / "model.ebnc"

    @property
    def log_file(self) -> Path:
        return Path(self.work_dir) / "train_log.jsonl"

    @property
    def report_file(self) -> Path:
        return Path(self.work_dir) / "report.json"

    @property
    def model(self) -> ModelConfig:
        return ModelConfig(
            in_channels=len(self.preprocess.leads),
            window_len=self.preprocess.window_len,
            seed=self.model_seed,
        )

    def to_dict(self) -> dict:
        return {
            "data_dir": str(self.data_dir),
            "work_dir": str(self.work_dir),
            "cache_path": None if self.cache_path is None else str(self.cache_path),
            "base_url": self.base_url,
            "records": list(self.records),
            "subset_size": self.subset_size,
            "preprocess": {**asdict(self.preprocess), "leads": list(self.preprocess.leads)},
            "model": asdict(self.model),
            "optimizer": asdict(self.optimizer),
            "split": {"fractions": list(self.split.fractions), "seed": self.split.seed},
        }


_TOP_KEYS = {"data_dir", "work_dir", "cache_path", "base_url", "records", "subset_size", "preprocess", "model", "optimizer", "split"}


def _section(cls, doc: dict | None, name: str):
    doc = doc or {}
    if not isinstance(doc, dict):
        raise ConfigError(f"config section {name!r} must be an object")
    try:
        return cls(**doc)
    except TypeError as e:
        raise ConfigError(f"config section {name!r}: {e}") from None


def from_dict(doc: dict) -> RunConfig:
    unknown = set(doc) - _TOP_KEYS
    if unknown:
        raise ConfigError(f"unknown config keys: {sorted(unknown)}")
    pre_doc = dict(doc.get("preprocess") or {})
    if "leads" in pre_doc:
        pre_doc["leads"] = tuple(pre_doc["leads"])
    preprocess = _section(PreprocessConfig, pre_doc, "preprocess")

    model_doc = dict(doc.get("model") or {})
    unknown = set(model_doc) - {"seed", "in_channels", "window_len"}
    if unknown:
        raise ConfigError(f"unknown model keys: {sorted(unknown)}")
    if model_doc.get("in_channels", len(preprocess.leads)) != len(preprocess.leads):
        raise ConfigError("model.in_channels must equal the number of configured leads")
    if model_doc.get("window_len", preprocess.window_len) != preprocess.window_len:
        raise ConfigError("model.window_len must equal preprocess.window_len")

    split_doc = dict(doc.get("split") or {})
    if "fractions" in split_doc:
        split_doc["fractions"] = tuple(split_doc["fractions"])
    kwargs = dict(
        preprocess=preprocess,
        model_seed=int(model_doc.get("seed", 0)),
        optimizer=_section(AdamHyper, doc.get("optimizer"), "optimizer"),
        split=_section(SplitConfig, split_doc, "split"),
    )
    for key in ("data_dir", "work_dir", "cache_path"):
        if doc.get(key) is not None:
            kwargs[key] = Path(doc[key])
    if "base_url" in doc:
        kwargs["base_url"] = str(doc["base_url"])
    if "records" in doc:
        kwargs["records"] = tuple(str(r) for r in doc["records"])
    if "subset_size" in doc:
        kwargs["subset_size"] = doc["subset_size"]
    cfg = RunConfig(**kwargs)
    cfg.model  # validates window_len against the pooling chain
    return cfg


def load(path: str | Path | None) -> RunConfig:
    if path is None:
        return RunConfig()
    try:
        doc = json.loads(Path(path).read_text())
    except FileNotFoundError:
        raise ConfigError(f"config file not found: {path}") from None
    except json.JSONDecodeError as e:
        raise ConfigError(f"config file {path} is not valid JSON: {e}") from None
    if not isinstance(doc, dict):
        raise ConfigError("config root must be a JSON object")
    return from_dict(doc)


def apply_overrides(cfg: RunConfig, *, data_dir=None, work_dir=None, seed=None, records=None, epochs=None, env=None) -> RunConfig:
    env = os.environ if env is None else env
    changes = {}
    if data_dir is not None:
        changes["data_dir"] = Path(data_dir)
    elif env.get(DATA_ENV):
        changes["data_dir"] = Path(env[DATA_ENV])
    if work_dir is not None:
        changes["work_dir"] = Path(work_dir)
    if seed is not None:
        changes["model_seed"] = seed
        changes["split"] = replace(cfg.split, seed=seed)
    if records:
        changes["records"] = tuple(records)
    if epochs is not None:
        changes["optimizer"] = replace(cfg.optimizer, epochs=epochs)
    return replace(cfg, **changes) if changes else cfg

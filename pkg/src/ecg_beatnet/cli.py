"""``ecg-beatnet`` command line: fetch, inspect, segment, train, eval, predict.

Exit codes: 0 success, 1 usage/config error, 2 data/parse error, 3 network error.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from collections import Counter
from pathlib import Path

import numpy as np

from . import config as cfgmod
from . import dataset, metrics
from . import model as mdl
from . import wfdb
from ._io import atomic_write_text
from .errors import BeatNetError, ConfigError, DataError
from .fetch import fetch_records

log = logging.getLogger("ecg_beatnet")


class ChecksumFailure(DataError):
    pass


# -- commands (library-callable) --------------------------------------------


def cmd_fetch(cfg: cfgmod.RunConfig, workers: int = 4, attempts: int = 3, backoff: float = 1.0) -> dict:
    result = fetch_records(cfg.records, cfg.data_dir, cfg.base_url, workers=workers, attempts=attempts, backoff=backoff)
    return {
        "data_dir": str(cfg.data_dir),
        "downloaded": result.downloaded,
        "skipped": result.skipped,
        "bytes_transferred": result.bytes_transferred,
    }


def _load_record(data_dir: Path, name: str, strict: bool, annotator: str = "atr") -> wfdb.Record:
    for ext in ("hea", annotator):
        path = Path(data_dir) / f"{name}.{ext}"
        if not path.exists():
            raise FileNotFoundError(f"missing record file: {path}")
    rec = wfdb.read_record(data_dir, name, annotator)
    bad = [c for c in wfdb.verify_checksums(rec.data, rec.header) if not c.ok]
    for c in bad:
        msg = f"record {name} signal {c.signal} ({c.description}): checksum {c.computed} != header {c.expected}"
        if strict:
            raise ChecksumFailure(msg)
        log.warning(msg)
    return rec


def cmd_inspect(cfg: cfgmod.RunConfig, record: str, strict: bool = False) -> dict:
    rec = _load_record(cfg.data_dir, record, strict)
    h = rec.header
    codes = Counter(a.code for a in rec.annotations)
    classes = Counter()
    for a in rec.annotations:
        c = wfdb.map_beat_class(a.code)
        if c is not None:
            classes[c.name] += 1
    return {
        "record": h.record_name,
        "sampling_frequency": h.sampling_frequency,
        "n_samples": rec.data.n_samples,
        "duration_s": rec.data.n_samples / h.sampling_frequency,
        "leads": h.descriptions,
        "checksums": [
            {"signal": c.signal, "lead": c.description, "computed": c.computed, "expected": c.expected, "ok": c.ok}
            for c in wfdb.verify_checksums(rec.data, h)
        ],
        "n_annotations": len(rec.annotations),
        "annotation_codes": {str(k): codes[k] for k in sorted(codes)},
        "beat_classes": {c.name: classes.get(c.name, 0) for c in wfdb.BeatClass},
    }


def _physical_records(cfg: cfgmod.RunConfig, strict: bool):
    for name in cfg.records:
        rec = _load_record(cfg.data_dir, name, strict)
        yield dataset.PhysicalRecord(rec.physical(), rec.annotations, name, rec.header.sampling_frequency)


def cmd_segment(cfg: cfgmod.RunConfig, strict: bool = False) -> dict:
    tally: Counter = Counter()
    windows = dataset.segment_beats(_physical_records(cfg, strict), cfg.preprocess, tally)
    dataset.write_cache(cfg.cache_file, windows)
    counts = Counter(w.label.name for w in windows)
    return {
        "cache": str(cfg.cache_file),
        "n_windows": len(windows),
        "class_counts": {c.name: counts.get(c.name, 0) for c in wfdb.BeatClass},
        "annotations": {k: tally.get(k, 0) for k in ("emitted", "boundary", "unmapped")},
    }


def _load_split(cfg: cfgmod.RunConfig):
    windows = dataset.read_cache(cfg.cache_file)
    if not windows:
        raise DataError(f"cache {cfg.cache_file} holds no windows")
    x, y = dataset.stack_windows(windows)
    if x.shape[1:] != (cfg.model.in_channels, cfg.model.window_len):
        raise ConfigError(
            f"cache windows are {x.shape[1:]}, config expects {(cfg.model.in_channels, cfg.model.window_len)}; re-run segment"
        )
    pool = np.arange(len(y))
    if cfg.subset_size is not None:
        pool = np.asarray(dataset.balanced_subset(y, cfg.subset_size, cfg.split.seed), dtype=np.int64)
    local = dataset.stratified_split(y[pool], cfg.split.fractions, cfg.split.seed)
    split = dataset.DatasetSplit(
        seed=local.seed,
        train=[int(pool[i]) for i in local.train],
        val=[int(pool[i]) for i in local.val],
        test=[int(pool[i]) for i in local.test],
    )
    return windows, x, y, split


def cmd_train(cfg: cfgmod.RunConfig) -> dict:
    _, x, y, split = _load_split(cfg)
    weights = dataset.class_weights(y[split.train])
    result = mdl.train(x, y, split, cfg.model, cfg.optimizer, weights)
    meta = mdl.CheckpointMeta(epoch=result.best_epoch, seed=cfg.split.seed, step=result.steps)
    mdl.save_checkpoint(cfg.checkpoint_file, result.params, cfg.model, meta)
    lines = "".join(json.dumps(h, sort_keys=True) + "\n" for h in result.history)
    atomic_write_text(cfg.log_file, lines)
    final_train = result.history[-1]["train_accuracy"] if result.history else None
    _, best_train_acc, _ = mdl.evaluate(result.params, x[split.train], y[split.train], weights)
    return {
        "checkpoint": str(cfg.checkpoint_file),
        "log": str(cfg.log_file),
        "best_epoch": result.best_epoch,
        "epochs": len(result.history),
        "train_size": len(split.train),
        "val_size": len(split.val),
        "test_size": len(split.test),
        "final_epoch_train_accuracy": final_train,
        "checkpoint_train_accuracy": best_train_acc,
    }


def cmd_eval(cfg: cfgmod.RunConfig, checkpoint: Path | None = None, on: str = "test") -> metrics.EvalReport:
    checkpoint = Path(checkpoint) if checkpoint else cfg.checkpoint_file
    params, _, meta = mdl.load_checkpoint(checkpoint, expected=cfg.model)
    if meta.seed != cfg.split.seed:
        log.warning("checkpoint was trained with split seed %d, config uses %d", meta.seed, cfg.split.seed)
    _, x, y, split = _load_split(cfg)
    idx = np.asarray(getattr(split, on), dtype=np.int64)
    if idx.size == 0:
        raise DataError(f"the {on} bucket is empty")
    pred = mdl.predict_proba(params, x[idx]).argmax(axis=1)
    rep = metrics.report(metrics.ConfusionMatrix.from_labels(y[idx], pred))
    atomic_write_text(cfg.report_file, rep.to_json())
    return rep


def cmd_predict(cfg: cfgmod.RunConfig, checkpoint: Path, record: str, annotator: str = "atr", strict: bool = False) -> list[str]:
    params, model_cfg, _ = mdl.load_checkpoint(checkpoint)
    if model_cfg.in_channels != len(cfg.preprocess.leads) or model_cfg.window_len != cfg.preprocess.window_len:
        raise ConfigError(
            f"checkpoint expects {model_cfg.in_channels} leads x {model_cfg.window_len} samples; "
            f"preprocessing gives {len(cfg.preprocess.leads)} x {cfg.preprocess.window_len}"
        )
    rec = _load_record(cfg.data_dir, record, strict, annotator)
    phys = dataset.PhysicalRecord(rec.physical(), rec.annotations, record, rec.header.sampling_frequency)
    windows = dataset.segment_beats([phys], cfg.preprocess)
    if not windows:
        return []
    x, _ = dataset.stack_windows(windows)
    probs = mdl.predict_proba(params, x)
    lines = []
    for w, p in zip(windows, probs):
        cls = wfdb.BeatClass(int(np.argmax(p)))
        lines.append(f"{w.r_sample}\t{cls.name}\t" + "\t".join(f"{v:.6f}" for v in p))
    return lines


# -- argument parsing ---------------------------------------------------------


def _emit(doc: dict, fmt: str) -> None:
    if fmt == "json":
        sys.stdout.write(json.dumps(doc, indent=2) + "\n")
        return
    for key, value in doc.items():
        if isinstance(value, dict):
            sys.stdout.write(f"{key}:\n")
            for k, v in value.items():
                sys.stdout.write(f"  {k}: {v}\n")
        elif isinstance(value, list) and value and isinstance(value[0], dict):
            sys.stdout.write(f"{key}:\n")
            for item in value:
                sys.stdout.write("  " + ", ".join(f"{k}={v}" for k, v in item.items()) + "\n")
        else:
            sys.stdout.write(f"{key}: {value}\n")


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", type=Path, help="JSON run configuration")
    common.add_argument("--data-dir", type=Path, help="directory holding the WFDB record files")
    common.add_argument("--work-dir", type=Path, help="directory for cache, checkpoint, log and report")
    common.add_argument("--seed", type=int, help="seed for both the split and the model")
    common.add_argument("--records", nargs="+", metavar="NAME", help="restrict to these records")
    common.add_argument("--format", choices=("text", "json"), default="text")
    common.add_argument("--strict", action="store_true", help="abort on signal checksum mismatches")
    common.add_argument("-v", "--verbose", action="store_true")

    parser = argparse.ArgumentParser(prog="ecg-beatnet", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("fetch", parents=[common], help="download MIT-BIH records")
    p.add_argument("--workers", type=int, default=4)

    p = sub.add_parser("inspect", parents=[common], help="summarize one record")
    p.add_argument("record")

    sub.add_parser("segment", parents=[common], help="build the beat-window cache")

    p = sub.add_parser("train", parents=[common], help="train and write the best-validation checkpoint")
    p.add_argument("--epochs", type=int)

    p = sub.add_parser("eval", parents=[common], help="metrics on a held-out bucket")
    p.add_argument("--checkpoint", type=Path)
    p.add_argument("--on", choices=("train", "val", "test"), default="test")

    p = sub.add_parser("predict", parents=[common], help="per-beat predictions for one record")
    p.add_argument("record")
    p.add_argument("--checkpoint", type=Path)
    p.add_argument("--annotations", default="atr", metavar="EXT", help="annotator supplying beat positions")
    return parser


def run(argv: list[str] | None = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as e:
        return 0 if e.code == 0 else 1
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(name)s: %(message)s")
    try:
        cfg = cfgmod.load(args.config)
        cfg = cfgmod.apply_overrides(
            cfg,
            data_dir=args.data_dir,
            work_dir=args.work_dir,
            seed=args.seed,
            records=args.records,
            epochs=getattr(args, "epochs", None),
        )
        if args.command == "fetch":
            _emit(cmd_fetch(cfg, workers=args.workers), args.format)
        elif args.command == "inspect":
            _emit(cmd_inspect(cfg, args.record, strict=args.strict), args.format)
        elif args.command == "segment":
            _emit(cmd_segment(cfg, strict=args.strict), args.format)
        elif args.command == "train":
            _emit(cmd_train(cfg), args.format)
        elif args.command == "eval":
            rep = cmd_eval(cfg, args.checkpoint, on=args.on)
            if args.format == "json":
                sys.stdout.write(rep.to_json())
            else:
                _print_report(rep)
        elif args.command == "predict":
            lines = cmd_predict(cfg, args.checkpoint or cfg.checkpoint_file, args.record, args.annotations, strict=args.strict)
            sys.stdout.write("".join(line + "\n" for line in lines))
    except BeatNetError as e:
        print(f"error: {e}", file=sys.stderr)
        return e.exit_code
    except FileNotFoundError as e:
        print(f"error: {e}", file=sys.stderr)
        return 2
    return 0


def _print_report(rep: metrics.EvalReport) -> None:
    fmt = lambda v: "   n/a" if v is None else f"{v:.4f}"  # noqa: E731
    print(f"n = {rep.n_total}   overall accuracy = {rep.overall_accuracy:.4f}")
    print(f"{'class':8s} {'sens':>7s} {'spec':>7s} {'support':>8s}")
    for name, s in rep.per_class.items():
        print(f"{name:8s} {fmt(s.sensitivity):>7s} {fmt(s.specificity):>7s} {s.support:8d}")
    print(f"{'macro':8s} {fmt(rep.macro_sensitivity):>7s} {fmt(rep.macro_specificity):>7s}")


def main() -> None:
    sys.exit(run())


if __name__ == "__main__":
    main()

"""Download MIT-BIH record files and keep a digest manifest of what is on disk."""

from __future__ import annotations

import hashlib
import json
import logging
import time
import urllib.error
import urllib.request
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

from ._io import atomic_write_bytes, atomic_write_text
from .errors import DigestMismatch, NetworkError

log = logging.getLogger(__name__)

EXTENSIONS = ("hea", "dat", "atr")
MANIFEST = "manifest.json"


@dataclass
class FetchResult:
    downloaded: list[str]
    skipped: list[str]
    bytes_transferred: int


def sha256(data: bytes) -> str:
    return hashlib.sha256(data).hexdigest()


def load_manifest(data_dir: Path) -> dict:
    path = data_dir / MANIFEST
    if not path.exists():
        return {}
    return json.loads(path.read_text()).get("files", {})


def write_manifest(data_dir: Path, files: dict) -> None:
    doc = {"files": {k: files[k] for k in sorted(files)}}
    atomic_write_text(data_dir / MANIFEST, json.dumps(doc, indent=2, sort_keys=True) + "\n")


def download(url: str, attempts: int = 3, backoff: float = 1.0, timeout: float = 60.0) -> bytes:
    """GET ``url`` with bounded exponential backoff between attempts."""
    last = None
    for attempt in range(attempts):
        try:
            with urllib.request.urlopen(url, timeout=timeout) as resp:
                return resp.read()
        except (urllib.error.URLError, OSError) as e:
            last = e
            log.warning("fetch %s failed (attempt %d/%d): %s", url, attempt + 1, attempts, e)
            if attempt + 1 < attempts:
                time.sleep(backoff * 2**attempt)
    raise NetworkError(f"could not download {url} after {attempts} attempts: {last}")


def _fetch_file(name: str, data_dir: Path, base_url: str, known: dict | None, attempts: int, backoff: float):
    """Returns ``(manifest entry, bytes transferred)``."""
    path = data_dir / name
    if path.exists():
        blob = path.read_bytes()
        digest = sha256(blob)
        if known is None:
            return {"sha256": digest, "size": len(blob)}, 0
        if digest == known["sha256"] and len(blob) == known["size"]:
            return known, 0
        log.warning("%s does not match its manifest digest; downloading again", path)
    blob = download(base_url.rstrip("/") + "/" + name, attempts=attempts, backoff=backoff)
    digest = sha256(blob)
    if known is not None and digest != known["sha256"]:
        raise DigestMismatch(f"{name}: downloaded digest {digest} differs from manifest {known['sha256']}")
    atomic_write_bytes(path, blob)
    return {"sha256": digest, "size": len(blob)}, len(blob)


def fetch_records(
    records: Sequence[str],
    data_dir: str | Path,
    base_url: str,
    workers: int = 4,
    attempts: int = 3,
    backoff: float = 1.0,
) -> FetchResult:
    data_dir = Path(data_dir)
    data_dir.mkdir(parents=True, exist_ok=True)
    manifest = load_manifest(data_dir)
    names = [f"{r}.{ext}" for r in records for ext in EXTENSIONS]
    with ThreadPoolExecutor(max_workers=max(1, workers)) as pool:
        futures = [pool.submit(_fetch_file, n, data_dir, base_url, manifest.get(n), attempts, backoff) for n in names]
        outcomes = []
        error = None
        for name, fut in zip(names, futures):
            try:
                outcomes.append((name, *fut.result()))
            except Exception as e:  # keep completed files in the manifest
                error = error or e
    result = FetchResult([], [], 0)
    for name, entry, n_bytes in outcomes:
        manifest[name] = entry
        (result.downloaded if n_bytes else result.skipped).append(name)
        result.bytes_transferred += n_bytes
    write_manifest(data_dir, manifest)
    if error is not None:
        raise error
    return result

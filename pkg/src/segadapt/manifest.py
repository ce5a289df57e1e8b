"""Run manifests: JSON records of config + seeds + per-seed VI with a CSV mirror.

Aggregation uses the sample standard deviation (n-1 denominator); the choice
is recorded in the manifest so downstream tables are auditable.
"""

from __future__ import annotations

import csv
import hashlib
import json
from dataclasses import asdict, dataclass
from pathlib import Path
from typing import Sequence

import numpy as np

from .errors import EmptyRun

__all__ = [
    "ResultRow",
    "write_run_manifest",
    "read_run_manifest",
    "aggregate_rows",
    "config_hash",
    "content_hash",
    "VERSION",
]

VERSION = "0.1.0"

CSV_COLUMNS = (
    "target",
    "method",
    "transfer_domain",
    "sample_size",
    "seed",
    "vi_split",
    "vi_merge",
    "vi_total",
)


@dataclass(frozen=True)
class ResultRow:
    """One adaptation run's evaluation result."""

    target: str
    method: str
    transfer_domain: str
    sample_size: int
    seed: int
    vi_split: float
    vi_merge: float
    vi_total: float


def _canonical_json(obj) -> str:
    return json.dumps(obj, sort_keys=True, separators=(",", ":"))


def config_hash(config) -> str:
    """SHA-256 of the canonical JSON form of a config mapping."""
    return hashlib.sha256(_canonical_json(config).encode()).hexdigest()


def content_hash(path: str | Path) -> str:
    """SHA-256 of a file, or of the sorted (relpath, file-hash) list of a tree."""
    p = Path(path)
    if p.is_file():
        return hashlib.sha256(p.read_bytes()).hexdigest()
    if p.is_dir():
        h = hashlib.sha256()
        for f in sorted(p.rglob("*")):
            if f.is_file():
                h.update(str(f.relative_to(p)).encode())
                h.update(bytes.fromhex(content_hash(f)))
        return h.hexdigest()
    raise FileNotFoundError(path)


def _mean_std(values: Sequence[float]) -> tuple[float, float]:
    arr = np.asarray(values, dtype=np.float64)
    mean = float(arr.mean())
    std = float(arr.std(ddof=1)) if arr.size > 1 else 0.0
    return mean, std


def aggregate_rows(rows: Sequence[ResultRow]) -> list[dict]:
    """Group rows by (target, method, transfer_domain, sample_size); mean +/- std over seeds."""
    groups: dict[tuple, list[ResultRow]] = {}
    for r in rows:
        groups.setdefault((r.target, r.method, r.transfer_domain, r.sample_size), []).append(r)
    out = []
    for key in sorted(groups):
        rs = sorted(groups[key], key=lambda r: r.seed)
        target, method, transfer, size = key
        entry = {
            "target": target,
            "method": method,
            "transfer_domain": transfer,
            "sample_size": size,
            "seeds": [r.seed for r in rs],
        }
        for metric in ("vi_split", "vi_merge", "vi_total"):
            mean, std = _mean_std([getattr(r, metric) for r in rs])
            entry[f"{metric}_mean"] = mean
            entry[f"{metric}_std"] = std
        out.append(entry)
    return out


def write_run_manifest(config, rows: Sequence[ResultRow], path: str | Path) -> Path:
    """Write `<path>` (JSON) and its `.csv` sibling; returns the JSON path."""
    if not rows:
        raise EmptyRun("no result rows to record")
    path = Path(path)
    manifest = {
        "version": VERSION,
        "config": config,
        "config_hash": config_hash(config),
        "std_convention": "sample (n-1 denominator)",
        "seeds": sorted({r.seed for r in rows}),
        "results": [asdict(r) for r in rows],
        "aggregates": aggregate_rows(rows),
    }
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")
    csv_path = path.with_suffix(".csv")
    with open(csv_path, "w", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(CSV_COLUMNS)
        for r in rows:
            writer.writerow(
                [r.target, r.method, r.transfer_domain, r.sample_size, r.seed,
                 repr(float(r.vi_split)), repr(float(r.vi_merge)), repr(float(r.vi_total))]
            )
    return path


def read_run_manifest(path: str | Path) -> dict:
    """Load a manifest; recomputed aggregation must match the stored one."""
    manifest = json.loads(Path(path).read_text())
    rows = [ResultRow(**r) for r in manifest["results"]]
    recomputed = aggregate_rows(rows)
    if recomputed != manifest["aggregates"]:
        raise ValueError(f"{path}: stored aggregates do not match recomputation")
    return manifest

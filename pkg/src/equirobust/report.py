"""
Report stream and rendering.

A run directory holds `report.jsonl`: a metadata record first, then one JSON
object per line (result rows and diagnostic records), appended as results
arrive. `render` turns the stream into summary and plot-data CSV files.
"""

from __future__ import annotations

import csv
import hashlib
import json
import logging
import math
import platform
import threading
from collections import defaultdict
from datetime import datetime, timezone
from pathlib import Path
from typing import Iterable, Optional

import numpy as np
import psutil
from pydantic import BaseModel

from . import __version__
from .schemas import REPORT_SCHEMA, ReportRow

logger = logging.getLogger(__name__)

REPORT_FILE = "report.jsonl"
SUMMARY_FILE = "summary.csv"
VOLATILE_KEYS = frozenset({"timestamp", "started_at", "finished_at", "elapsed_s", "rss_mb", "host",
                           "out_dir", "checkpoint"})
GROUP_KEYS = ("model", "metric", "attack", "epsilon", "corruption", "severity")


class ReportError(RuntimeError):
    """A run directory has no readable report stream."""


def now() -> str:
    return datetime.now(timezone.utc).strftime("%Y-%m-%dT%H:%M:%S.%fZ")


def _jsonable(value):
    if isinstance(value, BaseModel):
        return value.model_dump(mode="json")
    if isinstance(value, dict):
        return {str(k): _jsonable(v) for k, v in value.items()}
    if isinstance(value, (list, tuple)):
        return [_jsonable(v) for v in value]
    if isinstance(value, (np.floating, float)):
        v = float(value)
        return v if math.isfinite(v) else str(v)
    if isinstance(value, np.integer):
        return int(value)
    if isinstance(value, np.ndarray):
        return _jsonable(value.tolist())
    return value


def append_record(path: str | Path, record_type: str, **payload) -> dict:
    """Append one {type, timestamp, ...} line to a JSONL file and return it."""
    entry = {"type": record_type, "timestamp": now(), **_jsonable(payload)}
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with path.open("a", encoding="utf-8") as fh:
        fh.write(json.dumps(entry, sort_keys=True) + "\n")
    return entry


def run_metadata(config: dict, command: str, seeds: Iterable[int], **extra) -> dict:
    """Metadata record: config snapshot, code version, seeds and host facts."""
    return {
        "schema": REPORT_SCHEMA,
        "command": command,
        "code_version": __version__,
        "config": _jsonable(config),
        "seeds": list(seeds),
        "started_at": now(),
        "host": {"python": platform.python_version(), "numpy": np.__version__,
                 "cpus": psutil.cpu_count(logical=False) or psutil.cpu_count(),
                 "rss_mb": round(psutil.Process().memory_info().rss / 2 ** 20, 1)},
        "interpolation": "bilinear resize for scale branches (bicubic not used)",
        "corruption_protocol": "corrupt first, then attack",
        **_jsonable(extra),
    }


class ReportWriter:
    """Append-only writer for one run's report stream; safe across worker threads."""

    def __init__(self, run_dir: str | Path, metadata: Optional[dict] = None):
        self.run_dir = Path(run_dir)
        self.path = self.run_dir / REPORT_FILE
        self._lock = threading.Lock()
        self.rows_written = 0
        if metadata is not None:
            self.record("metadata", **metadata)

    def record(self, record_type: str, **payload) -> dict:
        with self._lock:
            return append_record(self.path, record_type, **payload)

    def row(self, row: ReportRow | dict) -> dict:
        data = row.model_dump(mode="json") if isinstance(row, ReportRow) else ReportRow(**row).model_dump(mode="json")
        data.pop("type", None)
        with self._lock:
            self.rows_written += 1
            return append_record(self.path, "row", **data)

    def rows(self, rows: Iterable[ReportRow | dict]) -> None:
        for r in rows:
            self.row(r)

    def mark_partial(self, reason: str) -> None:
        self.record("status", state="partial", reason=reason)

    def mark_complete(self) -> None:
        self.record("status", state="complete", finished_at=now())


def read_records(path: str | Path) -> list[dict]:
    path = Path(path)
    if path.is_dir():
        path = path / REPORT_FILE
    if not path.exists():
        raise ReportError(f"no report stream at {path}")
    records = [json.loads(line) for line in path.read_text(encoding="utf-8").splitlines() if line.strip()]
    if not records:
        raise ReportError(f"{path} is empty")
    return records


def read_rows(path: str | Path) -> list[dict]:
    return [r for r in read_records(path) if r.get("type") == "row"]


def _strip_volatile(value):
    if isinstance(value, dict):
        return {k: _strip_volatile(v) for k, v in value.items() if k not in VOLATILE_KEYS}
    if isinstance(value, list):
        return [_strip_volatile(v) for v in value]
    return value


def report_digest(path: str | Path) -> str:
    """SHA-256 of the report stream with timestamps and host facts removed."""
    h = hashlib.sha256()
    for record in read_records(path):
        h.update(json.dumps(_strip_volatile(record), sort_keys=True).encode("utf-8"))
        h.update(b"\n")
    return h.hexdigest()


def summarize(rows: Iterable[dict]) -> list[dict]:
    """Mean and sample std across seeds per (model, metric, attack, ε, corruption, severity).

    A group seen with a single seed has std None rather than 0.
    """
    groups: dict[tuple, list[float]] = defaultdict(list)
    seeds: dict[tuple, set] = defaultdict(set)
    for r in rows:
        if r.get("value") is None:
            continue
        key = tuple(r.get(k) for k in GROUP_KEYS)
        groups[key].append(float(r["value"]))
        seeds[key].add(r.get("seed"))
    out = []
    for key in sorted(groups, key=lambda k: tuple("" if v is None else str(v) for v in k)):
        values = np.asarray(groups[key])
        std = float(values.std(ddof=1)) if len(values) > 1 else None
        out.append({**dict(zip(GROUP_KEYS, key)), "mean": float(values.mean()), "std": std,
                    "n": int(len(values)), "seeds": len(seeds[key])})
    return out


def _write_csv(path: Path, header: list[str], rows: Iterable[list]) -> Path:
    path.parent.mkdir(parents=True, exist_ok=True)
    with path.open("w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(header)
        for row in rows:
            writer.writerow(["" if v is None else v for v in row])
    return path


def render(run_dir: str | Path) -> list[Path]:
    """Write summary.csv plus per-attack accuracy-vs-ε and corruption tables.

    Output depends only on the rows, so re-rendering is idempotent.
    """
    run_dir = Path(run_dir)
    if not run_dir.is_dir():
        raise ReportError(f"{run_dir} is not a run directory")
    rows = read_rows(run_dir)
    if not rows:
        raise ReportError(f"{run_dir}: report has no result rows")
    summary = summarize(rows)
    written = [_write_csv(run_dir / SUMMARY_FILE, [*GROUP_KEYS, "mean", "std", "n", "seeds"],
                          ([s[k] for k in (*GROUP_KEYS, "mean", "std", "n", "seeds")] for s in summary))]

    models = sorted({s["model"] for s in summary})
    attacks = sorted({s["attack"] for s in summary if s["metric"] == "adversarial_accuracy" and s["attack"]})
    for attack in attacks:
        cells = {(s["model"], s["epsilon"]): s for s in summary
                 if s["metric"] == "adversarial_accuracy" and s["attack"] == attack and s["corruption"] is None}
        eps_grid = sorted({e for _, e in cells})
        header = ["epsilon"] + [f"{m}_{stat}" for m in models for stat in ("mean", "std")]
        lines = [[e] + [v for m in models for v in ((cells[(m, e)]["mean"], cells[(m, e)]["std"])
                                                    if (m, e) in cells else (None, None))] for e in eps_grid]
        written.append(_write_csv(run_dir / "plots" / f"{attack}_accuracy.csv", header, lines))

    corrupted = [s for s in summary if s["corruption"] is not None]
    if corrupted:
        eps_grid = sorted({s["epsilon"] for s in corrupted if s["epsilon"] is not None})
        table = defaultdict(dict)
        for s in corrupted:
            table[(s["model"], s["corruption"], s["severity"])][s["epsilon"]] = s["mean"]
        header = ["model", "corruption", "severity"] + [f"eps_{e}" for e in eps_grid]
        lines = [[*key] + [table[key].get(e) for e in eps_grid] for key in sorted(table)]
        written.append(_write_csv(run_dir / "plots" / "corruption_table.csv", header, lines))

    logger.info("rendered %d files into %s", len(written), run_dir)
    return written

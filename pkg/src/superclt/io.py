"""Deterministic writers for CSV/JSON outputs and the run manifest.

Numbers are written with repr(), so identical floats give identical bytes. A result
file is never replaced by different content; manifests are run logs (they carry
timestamps) and are rewritten on every run.
"""
from __future__ import annotations

import csv
import io as _io
import json
import math
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Iterable

import numpy as np

from . import __version__
from .schema import SCHEMA_VERSION


class OutputConflict(RuntimeError):
    """An output file exists with different content."""


def to_jsonable(obj):
    if isinstance(obj, dict):
        return {str(k): to_jsonable(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [to_jsonable(v) for v in obj]
    if isinstance(obj, np.ndarray):
        return [to_jsonable(v) for v in obj.tolist()]
    if isinstance(obj, (np.bool_, bool)):
        return bool(obj)
    if isinstance(obj, (np.integer,)):
        return int(obj)
    if isinstance(obj, (np.floating, float)):
        x = float(obj)
        if math.isnan(x):
            return "nan"
        if math.isinf(x):
            return "inf" if x > 0 else "-inf"
        return x
    return obj


def json_text(doc: dict) -> str:
    body = dict(doc)
    body.setdefault("schema_version", SCHEMA_VERSION)
    return json.dumps(to_jsonable(body), sort_keys=True, indent=2, ensure_ascii=False) + "\n"


def csv_text(header: list[str], rows: Iterable[Iterable[Any]]) -> str:
    buf = _io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(header)
    for row in rows:
        w.writerow([_cell(v) for v in row])
    return buf.getvalue()


def _cell(v):
    if isinstance(v, (float, np.floating)):
        return repr(float(v))
    if isinstance(v, (np.integer,)):
        return int(v)
    if isinstance(v, (np.bool_,)):
        return bool(v)
    if v is None:
        return ""
    return v


def write_result(path: Path, text: str) -> Path:
    """Write ``text`` unless a different file is already there."""
    path = Path(path)
    data = text.encode("utf-8")
    if path.exists():
        if path.read_bytes() == data:
            return path
        raise OutputConflict(f"{path} exists with different content; refusing to overwrite")
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_bytes(data)
    tmp.replace(path)
    return path


def output_stem(subcommand: str, scenario_hash: str, seed: int | None) -> str:
    return f"{subcommand}_{scenario_hash[:12]}_{'noseed' if seed is None else seed}"


@dataclass
class RunManifest:
    subcommand: str
    scenario_hash: str
    flags: dict
    master_seed: int | None
    scheme_version: str | None = None
    started: str = field(default_factory=lambda: _now())
    finished: str | None = None
    outputs: list = field(default_factory=list)
    exit_code: int | None = None

    def to_dict(self) -> dict:
        return {
            "schema_version": SCHEMA_VERSION,
            "subcommand": self.subcommand,
            "scenario_hash": self.scenario_hash,
            "flags": self.flags,
            "master_seed": self.master_seed,
            "artifact_version": __version__,
            "scheme_version": self.scheme_version,
            "started": self.started,
            "finished": self.finished,
            "outputs": sorted(self.outputs),
            "exit_code": self.exit_code,
        }

    def write(self, out_dir: Path, stem: str) -> Path:
        self.finished = _now()
        path = Path(out_dir) / f"{stem}.manifest.json"
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_text(json_text(self.to_dict()), encoding="utf-8")
        return path


def _now() -> str:
    return time.strftime("%Y-%m-%dT%H:%M:%S%z")

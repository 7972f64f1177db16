"""Disk cache for reference-solver outputs.

Solutions are keyed by a hash of the parameter set, grid sizes and
tolerances; each entry is a CSV of solution columns plus a JSON sidecar
recording the inputs and scheme metadata, so cached files are
self-describing and the PINN test paths never re-run an oracle needlessly.
"""

from __future__ import annotations

import dataclasses
import hashlib
import json
from pathlib import Path

import numpy as np

DEFAULT_CACHE_DIR = Path("oracle_cache")


def _canonical(obj):
    if dataclasses.is_dataclass(obj) and not isinstance(obj, type):
        return {k: _canonical(v) for k, v in dataclasses.asdict(obj).items()}
    if isinstance(obj, dict):
        return {str(k): _canonical(v) for k, v in sorted(obj.items())}
    if isinstance(obj, (list, tuple)):
        return [_canonical(v) for v in obj]
    if isinstance(obj, (np.floating, float)):
        return repr(float(obj))
    if isinstance(obj, (np.integer, int)):
        return int(obj)
    return obj


def cache_key(kind: str, spec: dict) -> str:
    payload = json.dumps({"kind": kind, "spec": _canonical(spec)}, sort_keys=True)
    return hashlib.sha256(payload.encode()).hexdigest()[:24]


class OracleCache:
    def __init__(self, directory: Path | str | None = None):
        self.dir = Path(directory) if directory is not None else DEFAULT_CACHE_DIR

    def _paths(self, kind: str, key: str) -> tuple[Path, Path]:
        base = self.dir / f"{kind}-{key}"
        return base.with_suffix(".csv"), base.with_suffix(".json")

    def load(self, kind: str, spec: dict) -> dict[str, np.ndarray] | None:
        """Return cached columns (plus the sidecar under '_meta'), or None."""
        key = cache_key(kind, spec)
        csv_path, meta_path = self._paths(kind, key)
        if not (csv_path.exists() and meta_path.exists()):
            return None
        with open(meta_path) as f:
            meta = json.load(f)
        data = np.genfromtxt(csv_path, delimiter=",", names=True)
        cols = {name: np.atleast_1d(data[name]) for name in data.dtype.names}
        cols["_meta"] = meta
        return cols

    def store(self, kind: str, spec: dict, columns: dict[str, np.ndarray], meta: dict) -> Path:
        key = cache_key(kind, spec)
        self.dir.mkdir(parents=True, exist_ok=True)
        csv_path, meta_path = self._paths(kind, key)
        names = list(columns)
        arr = np.column_stack([np.asarray(columns[n], dtype=float) for n in names])
        with open(csv_path, "w") as f:
            f.write(",".join(names) + "\n")
            for row in arr:
                f.write(",".join(repr(float(v)) for v in row) + "\n")
        sidecar = {"key": key, "kind": kind, "spec": _canonical(spec), **meta}
        with open(meta_path, "w") as f:
            json.dump(sidecar, f, indent=2, sort_keys=True)
        return csv_path

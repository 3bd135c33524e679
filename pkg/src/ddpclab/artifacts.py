"""File formats for experiment artifacts.

All numeric CSV output uses Python float repr (shortest round-trip), so a
re-run with the same config and seed reproduces files byte for byte. No file
carries timestamps for the same reason.
"""

from __future__ import annotations

import csv
import hashlib
import json
from pathlib import Path
from typing import Dict, Iterable, List, Mapping, Sequence

import numpy as np

from ddpclab.lti_sim import TrajectoryData


def fmt(value) -> str:
    return repr(float(value))


def sha256_file(path) -> str:
    digest = hashlib.sha256()
    with open(path, "rb") as fh:
        for block in iter(lambda: fh.read(1 << 20), b""):
            digest.update(block)
    return digest.hexdigest()


def write_trajectory_csv(path, data: TrajectoryData) -> None:
    """Schema: t,u_1..u_m,y_1..y_q plus a key=value sidecar `<path>.meta`."""
    path = Path(path)
    header = (
        ["t"]
        + [f"u_{i+1}" for i in range(data.m)]
        + [f"y_{i+1}" for i in range(data.q)]
    )
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(header)
        for t in range(data.length):
            writer.writerow(
                [t] + [fmt(v) for v in data.u[t]] + [fmt(v) for v in data.y[t]]
            )
    meta_lines = []
    for key, value in sorted(data.meta.items()):
        if isinstance(value, np.ndarray):
            value = ",".join(fmt(v) for v in value.ravel())
        meta_lines.append(f"{key}={value}")
    Path(str(path) + ".meta").write_text("\n".join(meta_lines) + "\n")


def read_trajectory_csv(path) -> TrajectoryData:
    path = Path(path)
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader)
        m = sum(1 for name in header if name.startswith("u_"))
        q = sum(1 for name in header if name.startswith("y_"))
        u_rows, y_rows = [], []
        for row in reader:
            u_rows.append([float(v) for v in row[1 : 1 + m]])
            y_rows.append([float(v) for v in row[1 + m : 1 + m + q]])
    meta: Dict[str, str] = {}
    meta_path = Path(str(path) + ".meta")
    if meta_path.exists():
        for line in meta_path.read_text().splitlines():
            if "=" in line:
                key, value = line.split("=", 1)
                meta[key] = value
    seed = int(meta.get("seed", 0))
    return TrajectoryData(np.array(u_rows), np.array(y_rows), seed, meta)


def write_matrix_csv(path, matrix: np.ndarray) -> None:
    matrix = np.atleast_2d(np.asarray(matrix, dtype=float))
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        for row in matrix:
            writer.writerow([fmt(v) for v in row])


def read_matrix_csv(path) -> np.ndarray:
    with open(path, newline="") as fh:
        rows = [[float(v) for v in row] for row in csv.reader(fh) if row]
    return np.array(rows)


def write_table_csv(path, header: Sequence[str], rows: Iterable[Sequence]) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(list(header))
        for row in rows:
            writer.writerow([v if isinstance(v, str) else fmt(v) for v in row])


def read_table_csv(path) -> List[Dict[str, str]]:
    with open(path, newline="") as fh:
        return list(csv.DictReader(fh))


def write_json(path, payload: Mapping) -> None:
    Path(path).write_text(json.dumps(payload, indent=2, sort_keys=True) + "\n")


def read_json(path) -> dict:
    return json.loads(Path(path).read_text())


def write_manifest(path, experiment: str, config: Mapping, seeds: Sequence[int], files: Mapping[str, Path]) -> Path:
    """Manifest lists every written artifact with its content hash."""
    path = Path(path)
    base = path.parent
    entries = {}
    for role, file_path in sorted(files.items()):
        file_path = Path(file_path)
        entries[role] = {
            "path": str(file_path.relative_to(base)),
            "sha256": sha256_file(file_path),
        }
    payload = {
        "experiment": experiment,
        "config": dict(config),
        "seeds": [int(s) for s in seeds],
        "files": entries,
    }
    write_json(path, payload)
    return path


def read_manifest(path) -> dict:
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"manifest not found: {path}")
    return read_json(path)

"""File emission: CSV tables, legacy VTK grids, JSON-lines logs and manifests."""

from __future__ import annotations

import csv
import hashlib
import json
import math
import os
from pathlib import Path

import numpy as np

# VTK cell types for linear and quadratic triangles
_VTK_CELL = {3: 5, 6: 22}


def _fmt(v):
    if isinstance(v, (bool, np.bool_)):
        return str(bool(v)).lower()
    if isinstance(v, (float, np.floating)):
        return repr(float(v))  # shortest round-trip decimal
    if isinstance(v, (int, np.integer)):
        return str(int(v))
    return str(v)


def write_csv(path, header, rows):
    path = Path(path)
    with open(path, "w", newline="", encoding="utf-8") as fh:
        wr = csv.writer(fh, lineterminator="\n")
        wr.writerow(header)
        for row in rows:
            wr.writerow([_fmt(v) for v in row])
    return path


def read_csv(path):
    with open(path, newline="", encoding="utf-8") as fh:
        rd = csv.reader(fh)
        header = next(rd)
        rows = [[float(v) if _is_number(v) else v for v in row] for row in rd]
    return header, rows


def _is_number(s):
    try:
        float(s)
    except ValueError:
        return False
    return True


def write_vtk(path, points, cells, point_data=None, title="biparallel"):
    """Legacy ASCII unstructured grid of triangles (linear or quadratic).

    ``points`` is (n, 2) or (n, 3); ``cells`` (nt, 3) or (nt, 6) in the
    vertex-then-edge-midpoint order; ``point_data`` maps names to (n,) scalars
    or (n, 3) vectors.
    """
    pts = np.asarray(points, float)
    if pts.shape[1] == 2:
        pts = np.column_stack([pts, np.zeros(len(pts))])
    cells = np.asarray(cells, int)
    nloc = cells.shape[1]
    lines = ["# vtk DataFile Version 3.0", title[:255], "ASCII", "DATASET UNSTRUCTURED_GRID"]
    lines.append(f"POINTS {len(pts)} double")
    lines += [" ".join(repr(float(c)) for c in p) for p in pts]
    lines.append(f"CELLS {len(cells)} {len(cells) * (nloc + 1)}")
    lines += [f"{nloc} " + " ".join(str(i) for i in c) for c in cells]
    lines.append(f"CELL_TYPES {len(cells)}")
    lines += [str(_VTK_CELL[nloc])] * len(cells)
    if point_data:
        lines.append(f"POINT_DATA {len(pts)}")
        for name, arr in point_data.items():
            a = np.asarray(arr, float)
            if a.ndim == 1:
                lines += [f"SCALARS {name} double 1", "LOOKUP_TABLE default"]
                lines += [repr(float(v)) for v in a]
            else:
                if a.shape[1] != 3:
                    raise ValueError(f"vector field {name} must have three components")
                lines.append(f"VECTORS {name} double")
                lines += [" ".join(repr(float(c)) for c in v) for v in a]
    Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8")
    return Path(path)


def _jsonable(v):
    if isinstance(v, dict):
        return {str(k): _jsonable(x) for k, x in v.items()}
    if isinstance(v, (list, tuple)):
        return [_jsonable(x) for x in v]
    if isinstance(v, np.ndarray):
        return _jsonable(v.tolist())
    if isinstance(v, (np.floating, float)):
        f = float(v)
        return f if math.isfinite(f) else str(f)
    if isinstance(v, (np.integer,)):
        return int(v)
    if isinstance(v, np.bool_):
        return bool(v)
    return v


def write_json(path, obj):
    Path(path).write_text(json.dumps(_jsonable(obj), indent=2, sort_keys=True) + "\n", encoding="utf-8")
    return Path(path)


def write_jsonl(path, records):
    with open(path, "w", encoding="utf-8") as fh:
        for rec in records:
            fh.write(json.dumps(_jsonable(rec), sort_keys=True) + "\n")
    return Path(path)


def sha256(path):
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 16), b""):
            h.update(chunk)
    return h.hexdigest()


class Manifest:
    """Registry of emitted files; written last so every entry carries its hash."""

    def __init__(self, directory):
        self.directory = Path(directory)
        self.directory.mkdir(parents=True, exist_ok=True)
        self.entries = []

    def path(self, name):
        return self.directory / name

    def add(self, path, kind):
        path = Path(path)
        self.entries.append({"file": os.path.relpath(path, self.directory), "kind": kind,
                             "bytes": path.stat().st_size, "sha256": sha256(path)})
        return path

    def write(self, **extra):
        body = dict(extra)
        body["files"] = self.entries
        return write_json(self.directory / "manifest.json", body)


def verify_manifest(directory):
    """Names of listed files whose hash no longer matches."""
    directory = Path(directory)
    man = json.loads((directory / "manifest.json").read_text(encoding="utf-8"))
    return [e["file"] for e in man["files"] if sha256(directory / e["file"]) != e["sha256"]]


def error_json(exc):
    body = {"error": type(exc).__name__, "message": str(exc)}
    for attr in ("field", "suggestion", "line", "column"):
        if getattr(exc, attr, None) is not None:
            body[attr] = getattr(exc, attr)
    return json.dumps(body, sort_keys=True)

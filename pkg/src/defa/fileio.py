"""Plain-text file formats: landmark, edge-point, match and error CSVs.

Landmark CSV::

    # bbox x y w h
    x,y,valid
    103.2,88.1,1
    ...

Edge-point CSV has ``x,y`` rows and match CSV ``xi,yi,xj,yj`` rows; a header
row is written and tolerated on read. All writers go through
:func:`atomic_write_text` so a crashed run never leaves a half-written file.
"""

from __future__ import annotations

import csv
import io
import json
from pathlib import Path

import numpy as np

from defa._atomic import atomic_write_bytes
from defa.correspondence import KeypointPair
from defa.errors import ValidationError
from defa.metrics import ErrorRecord


def atomic_write_text(path, text: str) -> None:
    atomic_write_bytes(path, text.encode("utf-8"))


def write_json(path, obj) -> None:
    atomic_write_text(path, json.dumps(obj, indent=2, sort_keys=True) + "\n")


def _fmt(v: float) -> str:
    return repr(float(v))


def _rows(path, n_cols: int) -> tuple[list[list[float]], list[str]]:
    """Numeric rows of a CSV plus its ``#`` comment lines; one non-numeric header row is skipped."""
    path = Path(path)
    comments, rows = [], []
    with open(path, newline="") as fh:
        for lineno, line in enumerate(fh, 1):
            s = line.strip()
            if not s:
                continue
            if s.startswith("#"):
                comments.append(s[1:].strip())
                continue
            cells = next(csv.reader([s]))
            try:
                vals = [float(c) for c in cells]
            except ValueError:
                if rows:
                    raise ValidationError(f"non-numeric row: {s!r}", f"{path.name}:{lineno}") from None
                continue
            if len(vals) != n_cols:
                raise ValidationError(f"expected {n_cols} columns, got {len(vals)}", f"{path.name}:{lineno}")
            if not np.isfinite(vals).all():
                raise ValidationError("non-finite value", f"{path.name}:{lineno}")
            rows.append(vals)
    return rows, comments


def read_landmarks(path) -> tuple[np.ndarray, np.ndarray, tuple[float, float, float, float] | None]:
    """Return ``(points (2, L), valid (L,), bbox or None)``."""
    rows, comments = _rows(path, 3)
    bbox = None
    for c in comments:
        parts = c.split()
        if parts and parts[0] == "bbox":
            if len(parts) != 5:
                raise ValidationError("bbox header needs 4 numbers", f"{Path(path).name}:bbox")
            bbox = tuple(float(v) for v in parts[1:])
    arr = np.array(rows, dtype=np.float64).reshape(-1, 3)
    return arr[:, :2].T.copy(), arr[:, 2] != 0, bbox


def write_landmarks(path, points: np.ndarray, valid=None, bbox=None) -> None:
    points = np.asarray(points, dtype=np.float64).reshape(2, -1)
    valid = np.ones(points.shape[1], bool) if valid is None else np.asarray(valid, bool)
    buf = io.StringIO()
    if bbox is not None:
        buf.write("# bbox " + " ".join(_fmt(v) for v in bbox) + "\n")
    buf.write("x,y,valid\n")
    for (x, y), v in zip(points.T, valid):
        buf.write(f"{_fmt(x)},{_fmt(y)},{int(v)}\n")
    atomic_write_text(path, buf.getvalue())


def read_points(path) -> np.ndarray:
    rows, _ = _rows(path, 2)
    return np.array(rows, dtype=np.float64).reshape(-1, 2).T.copy()


def write_points(path, points: np.ndarray, header: str = "x,y") -> None:
    points = np.asarray(points, dtype=np.float64).reshape(2, -1)
    lines = [header] + [f"{_fmt(x)},{_fmt(y)}" for x, y in points.T]
    atomic_write_text(path, "\n".join(lines) + "\n")


def read_matches(path) -> KeypointPair:
    rows, _ = _rows(path, 4)
    arr = np.array(rows, dtype=np.float64).reshape(-1, 4)
    return KeypointPair(arr[:, :2].T.copy(), arr[:, 2:].T.copy())


def write_matches(path, pair: KeypointPair) -> None:
    lines = ["xi,yi,xj,yj"]
    for (xi, yi), (xj, yj) in zip(pair.points_i.T, pair.points_j.T):
        lines.append(",".join(_fmt(v) for v in (xi, yi, xj, yj)))
    atomic_write_text(path, "\n".join(lines) + "\n")


def write_error_records(path, records: list[ErrorRecord]) -> None:
    lines = ["image_id,nme,metric_kind,n_points"]
    lines += [f"{r.image_id},{_fmt(r.nme)},{r.metric_kind},{r.n_points}" for r in records]
    atomic_write_text(path, "\n".join(lines) + "\n")


def read_error_records(path) -> list[ErrorRecord]:
    with open(path, newline="") as fh:
        reader = csv.DictReader(row for row in fh if not row.startswith("#"))
        missing = {"image_id", "nme"} - set(reader.fieldnames or ())
        if missing:
            raise ValidationError(f"missing columns {sorted(missing)}", Path(path).name)
        return [
            ErrorRecord(r["image_id"], float(r["nme"]), r.get("metric_kind", ""), int(r.get("n_points") or 0))
            for r in reader
        ]


def write_ced(path, curve: list[tuple[float, float]]) -> None:
    lines = ["threshold,fraction"] + [f"{_fmt(t)},{_fmt(f)}" for t, f in curve]
    atomic_write_text(path, "\n".join(lines) + "\n")

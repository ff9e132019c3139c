"""Point cloud files (PLY, whitespace XYZ), trace export and report writing."""

from __future__ import annotations

import json
import sys
from pathlib import Path

import numpy as np

XYZ_SUFFIXES = {".xyz", ".txt", ".pts", ".asc", ".csv"}

_PLY_TYPES = {
    "char": "i1", "int8": "i1", "uchar": "u1", "uint8": "u1",
    "short": "i2", "int16": "i2", "ushort": "u2", "uint16": "u2",
    "int": "i4", "int32": "i4", "uint": "u4", "uint32": "u4",
    "float": "f4", "float32": "f4", "double": "f8", "float64": "f8",
}

TRACE_SCHEMA = "shapegrasp.trace/1"
TRACE_FIELDS = ["iteration", "particle", "preshape", "phase", "loss", "in_collision", "collision_count", "theta"]


class CloudFormatError(ValueError):
    """Raised for unreadable or malformed point cloud files."""


def _check_finite(points: np.ndarray, path) -> np.ndarray:
    bad = np.flatnonzero(~np.all(np.isfinite(points), axis=1))
    if bad.size:
        raise CloudFormatError(f"{path}: non-finite coordinates in row {int(bad[0])}")
    return points


def _parse_ply_header(data: bytes, path):
    end = data.find(b"end_header")
    if not data.startswith(b"ply") or end < 0:
        raise CloudFormatError(f"{path}: missing PLY header")
    newline = data.find(b"\n", end)
    body_start = len(data) if newline < 0 else newline + 1
    lines = data[:end].decode("ascii", errors="replace").splitlines()[1:]
    fmt = None
    elements = []
    for line in lines:
        tok = line.split()
        if not tok or tok[0] in ("comment", "obj_info"):
            continue
        if tok[0] == "format":
            fmt = tok[1]
        elif tok[0] == "element":
            elements.append({"name": tok[1], "count": int(tok[2]), "props": []})
        elif tok[0] == "property":
            if not elements:
                raise CloudFormatError(f"{path}: property before element")
            if tok[1] == "list":
                elements[-1]["props"].append((tok[4], None))
            else:
                if tok[1] not in _PLY_TYPES:
                    raise CloudFormatError(f"{path}: unknown PLY property type {tok[1]!r}")
                elements[-1]["props"].append((tok[2], _PLY_TYPES[tok[1]]))
    if fmt not in ("ascii", "binary_little_endian", "binary_big_endian"):
        raise CloudFormatError(f"{path}: unsupported PLY format {fmt!r}")
    return fmt, elements, body_start


def _read_ply(path: Path) -> np.ndarray:
    data = path.read_bytes()
    fmt, elements, offset = _parse_ply_header(data, path)
    names = [e["name"] for e in elements]
    if "vertex" not in names:
        raise CloudFormatError(f"{path}: no vertex element")
    vi = names.index("vertex")
    for e in elements[: vi + 1]:
        if any(t is None for _, t in e["props"]):
            raise CloudFormatError(f"{path}: list properties before/in the vertex element are not supported")
    vertex = elements[vi]
    prop_names = [n for n, _ in vertex["props"]]
    if not {"x", "y", "z"} <= set(prop_names):
        raise CloudFormatError(f"{path}: vertex element lacks x/y/z")
    count = vertex["count"]
    if count == 0:
        raise CloudFormatError(f"{path}: cloud is empty")

    if fmt == "ascii":
        rows = data[offset:].decode("ascii", errors="replace").splitlines()
        skip = sum(e["count"] for e in elements[:vi])
        rows = [r for r in rows if r.strip()][skip: skip + count]
        if len(rows) < count:
            raise CloudFormatError(f"{path}: expected {count} vertices, found {len(rows)}")
        cols = [prop_names.index(c) for c in "xyz"]
        pts = np.empty((count, 3))
        for i, row in enumerate(rows):
            tok = row.split()
            if len(tok) < len(prop_names):
                raise CloudFormatError(f"{path}: vertex row {i} has {len(tok)} values, expected {len(prop_names)}")
            try:
                pts[i] = [float(tok[c]) for c in cols]
            except ValueError as exc:
                raise CloudFormatError(f"{path}: vertex row {i}: {exc}") from None
        return _check_finite(pts, path)

    endian = "<" if fmt == "binary_little_endian" else ">"
    for e in elements[:vi]:
        offset += e["count"] * np.dtype([(n, endian + t) for n, t in e["props"]]).itemsize
    dtype = np.dtype([(n, endian + t) for n, t in vertex["props"]])
    if len(data) < offset + count * dtype.itemsize:
        raise CloudFormatError(f"{path}: truncated binary vertex data")
    rec = np.frombuffer(data, dtype=dtype, count=count, offset=offset)
    pts = np.column_stack([rec[c].astype(np.float64) for c in "xyz"])
    return _check_finite(pts, path)


def _read_xyz(path: Path) -> np.ndarray:
    rows = []
    width = None
    for lineno, line in enumerate(path.read_text().splitlines(), start=1):
        stripped = line.split("#", 1)[0].replace(",", " ").strip()
        if not stripped:
            continue
        tok = stripped.split()
        if len(tok) < 3 or (width is not None and len(tok) != width):
            raise CloudFormatError(f"{path}:{lineno}: malformed row {line.strip()!r}")
        width = len(tok)
        try:
            rows.append([float(v) for v in tok[:3]])
        except ValueError:
            raise CloudFormatError(f"{path}:{lineno}: non-numeric value in {line.strip()!r}") from None
    if not rows:
        raise CloudFormatError(f"{path}: cloud is empty")
    return _check_finite(np.asarray(rows, dtype=float), path)


def load_cloud(path, scale: float = 1.0) -> np.ndarray:
    """Read an ASCII/binary PLY or whitespace XYZ file into an ``(n, 3)`` array.

    ``scale`` converts file units to meters (e.g. ``0.001`` for millimeters).
    """
    path = Path(path)
    if not path.is_file():
        raise FileNotFoundError(f"cloud file not found: {path}")
    suffix = path.suffix.lower()
    if suffix == ".ply":
        pts = _read_ply(path)
    elif suffix in XYZ_SUFFIXES:
        pts = _read_xyz(path)
    else:
        with path.open("rb") as fh:
            head = fh.read(4)
        if head.startswith(b"ply"):
            pts = _read_ply(path)
        else:
            raise CloudFormatError(f"{path}: unknown cloud format {suffix!r}")
    return pts * scale if scale != 1.0 else pts


def save_cloud(path, points, binary: bool = True) -> None:
    """Write PLY (double precision, binary or ASCII) or XYZ by suffix."""
    path = Path(path)
    pts = np.asarray(points, dtype=np.float64).reshape(-1, 3)
    if path.suffix.lower() in XYZ_SUFFIXES:
        np.savetxt(path, pts, fmt="%.17g")
        return
    fmt = "binary_little_endian" if binary else "ascii"
    header = (
        f"ply\nformat {fmt} 1.0\nelement vertex {pts.shape[0]}\n"
        "property double x\nproperty double y\nproperty double z\nend_header\n"
    ).encode("ascii")
    if binary:
        path.write_bytes(header + pts.astype("<f8").tobytes())
    else:
        body = "".join(f"{x:.17g} {y:.17g} {z:.17g}\n" for x, y, z in pts)
        path.write_bytes(header + body.encode("ascii"))


def load_poses(path) -> np.ndarray:
    """Poses file: one ``x y z qw qx qy qz`` row per line."""
    arr = np.loadtxt(path, ndmin=2, comments="#")
    if arr.shape[1] != 7:
        raise ValueError(f"{path}: pose rows need 7 values, got {arr.shape[1]}")
    return arr


def save_poses(path, poses) -> None:
    np.savetxt(path, np.asarray(poses).reshape(-1, 7), fmt="%.17g",
               header="x y z qw qx qy qz")


def export_trace(trace, path) -> int:
    """Write newline-delimited JSON: a header line, then one record per
    (iteration, particle). Returns the record count."""
    path = Path(path)
    with path.open("w") as fh:
        fh.write(json.dumps({"schema": TRACE_SCHEMA, "fields": TRACE_FIELDS}) + "\n")
        for rec in trace:
            fh.write(json.dumps({k: rec[k] for k in TRACE_FIELDS}) + "\n")
    return len(trace)


def read_trace(path) -> list[dict]:
    lines = Path(path).read_text().splitlines()
    if not lines or json.loads(lines[0]).get("schema") != TRACE_SCHEMA:
        raise ValueError(f"{path}: not a trace file")
    return [json.loads(line) for line in lines[1:] if line.strip()]


def write_json(obj, path=None) -> None:
    text = json.dumps(obj, indent=2, sort_keys=True) + "\n"
    if path is None:
        sys.stdout.write(text)
    else:
        Path(path).write_text(text)

"""XYZ / OFF / PLY readers and writers, plus atomic file output."""

from __future__ import annotations

import json
import os
import tempfile
from pathlib import Path
from typing import Optional

import numpy as np

from .errors import ParseError
from .geometry import LocalFrames, TriangleMesh, as_points


def atomic_write_bytes(path, data: bytes) -> None:
    """Write ``data`` to ``path`` so the file is either complete or absent."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.", suffix=".tmp")
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(data)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def atomic_write_text(path, text: str) -> None:
    atomic_write_bytes(path, text.encode("utf-8"))


def write_json(path, obj) -> None:
    atomic_write_text(path, json.dumps(obj, indent=2, sort_keys=True) + "\n")


def read_json(path):
    with open(path, encoding="utf-8") as fh:
        return json.load(fh)


def format_xyz(cloud) -> str:
    pts = as_points(cloud)
    return "".join(f"{x:.17g} {y:.17g} {z:.17g}\n" for x, y, z in pts.tolist())


def write_xyz(cloud, path) -> None:
    """ASCII ``x y z`` per line with 17 significant digits (lossless for float64)."""
    atomic_write_text(path, format_xyz(cloud))


def read_xyz(path) -> np.ndarray:
    rows = []
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, 1):
            fields = line.split()
            if not fields or fields[0].startswith("#"):
                continue
            if len(fields) < 3:
                raise ParseError(f"expected 3 coordinates, got {len(fields)}", lineno)
            try:
                rows.append([float(v) for v in fields[:3]])
            except ValueError as exc:
                raise ParseError(str(exc), lineno) from None
    return np.array(rows, dtype=np.float64).reshape(-1, 3)


def _content_lines(text: str):
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if line:
            yield lineno, line


def read_off(path) -> TriangleMesh:
    """Parse an OFF mesh; polygons with more than three vertices are fan-split."""
    with open(path, encoding="utf-8") as fh:
        lines = list(_content_lines(fh.read()))
    if not lines:
        raise ParseError("empty file", 1)
    lineno, first = lines[0]
    pos = 1
    if first.startswith("OFF"):
        rest = first[3:].strip()
        if rest:
            # some writers put the counts on the header line ("OFF8 6 0")
            lines[0] = (lineno, rest)
            pos = 0
    else:
        raise ParseError("missing OFF header", lineno)
    if pos >= len(lines):
        raise ParseError("missing count line", lineno + 1)
    lineno, counts = lines[pos]
    try:
        nv, nf = (int(v) for v in counts.split()[:2])
        if len(counts.split()) < 2 or nv < 0 or nf < 0:
            raise ValueError
    except ValueError:
        raise ParseError(f"malformed count line {counts!r}", lineno) from None
    pos += 1
    if len(lines) < pos + nv + nf:
        raise ParseError("file ends before all vertices and faces were read", lines[-1][0])

    verts = np.empty((nv, 3))
    for i in range(nv):
        lineno, line = lines[pos + i]
        try:
            verts[i] = [float(v) for v in line.split()[:3]]
        except ValueError:
            raise ParseError(f"bad vertex {line!r}", lineno) from None
    pos += nv
    faces = []
    for i in range(nf):
        lineno, line = lines[pos + i]
        try:
            vals = [int(v) for v in line.split()]
            count, idx = vals[0], vals[1 : 1 + vals[0]]
        except (ValueError, IndexError):
            raise ParseError(f"bad face {line!r}", lineno) from None
        if count < 3 or len(idx) != count:
            raise ParseError(f"face needs at least 3 vertex indices: {line!r}", lineno)
        if min(idx) < 0 or max(idx) >= nv:
            raise ParseError("face references a missing vertex", lineno)
        for j in range(1, count - 1):
            faces.append((idx[0], idx[j], idx[j + 1]))
    return TriangleMesh(verts, np.array(faces, dtype=np.intp).reshape(-1, 3))


def write_ply(cloud, path, frames: Optional[LocalFrames] = None) -> None:
    """ASCII PLY for viewing; includes per-vertex normals when frames are given."""
    pts = as_points(cloud)
    header = ["ply", "format ascii 1.0", f"element vertex {len(pts)}"]
    header += ["property double x", "property double y", "property double z"]
    if frames is not None:
        header += ["property double nx", "property double ny", "property double nz"]
        data = np.hstack([pts, frames.normals])
    else:
        data = pts
    header.append("end_header")
    body = "".join(" ".join(f"{v:.17g}" for v in row) + "\n" for row in data.tolist())
    atomic_write_text(path, "\n".join(header) + "\n" + body)

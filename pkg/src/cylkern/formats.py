"""ASCII OFF and XYZ/XYZN readers and writers.

OFF grammar (read): optional comment lines starting with '#'; a header
token "OFF", either alone on its line or fused with the counts
("OFF490 322 0", a variant present in real model corpora); then
"<nv> <nf> [ne]"; nv vertex lines of 3 floats; nf face lines of
"<m> i0 ... i(m-1)" with m >= 3. Polygons with m > 3 are fan-triangulated
around their first vertex.

XYZ grammar (read/write): one point per line, either "x y z" or
"x y z nx ny nz"; blank lines and lines starting with '#' are skipped; a
file must use one arity throughout. Normals are renormalized to unit
length on read. Writing uses 17 significant digits so that a read/write
round trip is exact for 64-bit floats.
"""

from __future__ import annotations

import numpy as np

from .errors import FormatError, MeshIndexError, TruncationError
from .pointcloud import PointCloud, TriangleMesh


def _decode(data) -> list[str]:
    if isinstance(data, bytes):
        data = data.decode("ascii", errors="strict")
    return data.splitlines()


def _content_lines(lines):
    """Yield (line_number, stripped_text) skipping blanks and comments."""
    for i, raw in enumerate(lines, start=1):
        s = raw.strip()
        if not s or s.startswith("#"):
            continue
        yield i, s


def parse_off(data) -> TriangleMesh:
    """Parse an ASCII OFF byte stream (or string) into a TriangleMesh."""
    stream = _content_lines(_decode(data))
    try:
        lineno, header = next(stream)
    except StopIteration:
        raise FormatError("empty OFF file") from None
    if not header.startswith("OFF"):
        raise FormatError(f"line {lineno}: missing OFF header")
    rest = header[3:].strip()
    if rest:
        count_tokens = rest.split()
    else:
        try:
            lineno, counts = next(stream)
        except StopIteration:
            raise TruncationError("OFF header without counts") from None
        count_tokens = counts.split()
    if len(count_tokens) < 2:
        raise FormatError(f"line {lineno}: expected vertex and face counts")
    try:
        nv, nf = int(count_tokens[0]), int(count_tokens[1])
    except ValueError as e:
        raise FormatError(f"line {lineno}: bad counts: {e}") from None

    verts = np.empty((nv, 3))
    for i in range(nv):
        try:
            lineno, text = next(stream)
        except StopIteration:
            raise TruncationError(
                f"expected {nv} vertices, file ends after {i}") from None
        parts = text.split()
        if len(parts) < 3:
            raise FormatError(f"line {lineno}: vertex needs 3 coordinates")
        try:
            verts[i] = [float(parts[0]), float(parts[1]), float(parts[2])]
        except ValueError as e:
            raise FormatError(f"line {lineno}: bad vertex: {e}") from None

    tris: list[tuple[int, int, int]] = []
    for i in range(nf):
        try:
            lineno, text = next(stream)
        except StopIteration:
            raise TruncationError(
                f"expected {nf} faces, file ends after {i}") from None
        parts = text.split()
        try:
            m = int(parts[0])
            idx = [int(p) for p in parts[1:1 + m]]
        except (ValueError, IndexError) as e:
            raise FormatError(f"line {lineno}: bad face: {e}") from None
        if len(idx) != m or m < 3:
            raise FormatError(f"line {lineno}: face with {m} vertices")
        for j in idx:
            if not 0 <= j < nv:
                raise MeshIndexError(
                    f"line {lineno}: vertex index {j} out of range [0, {nv})")
        for a in range(1, m - 1):
            tris.append((idx[0], idx[a], idx[a + 1]))
    faces = np.array(tris, dtype=np.int64).reshape(len(tris), 3)
    return TriangleMesh(verts, faces)


def parse_xyz(data) -> PointCloud:
    """Parse ASCII XYZ / XYZN lines into a PointCloud."""
    pts: list[list[float]] = []
    nrm: list[list[float]] = []
    arity = None
    for lineno, text in _content_lines(_decode(data)):
        parts = text.split()
        if len(parts) not in (3, 6):
            raise FormatError(f"line {lineno}: expected 3 or 6 fields, got {len(parts)}")
        if arity is None:
            arity = len(parts)
        elif len(parts) != arity:
            raise FormatError(
                f"line {lineno}: mixed {arity}- and {len(parts)}-field rows")
        try:
            vals = [float(p) for p in parts]
        except ValueError as e:
            raise FormatError(f"line {lineno}: non-numeric token: {e}") from None
        pts.append(vals[:3])
        if arity == 6:
            nrm.append(vals[3:])
    if not pts:
        raise FormatError("no points in XYZ input")
    points = np.array(pts)
    normals = None
    if arity == 6:
        normals = np.array(nrm)
        lens = np.linalg.norm(normals, axis=1, keepdims=True)
        if np.any(lens == 0.0):
            raise FormatError("zero-length normal cannot be normalized")
        normals = normals / lens
    return PointCloud(points, normals)


def write_xyz(cloud: PointCloud) -> str:
    """Serialize a cloud to XYZ/XYZN text, exactly round-trippable."""
    rows = []
    has_normals = cloud.normals is not None
    for i in range(len(cloud)):
        vals = list(cloud.points[i])
        if has_normals:
            vals += list(cloud.normals[i])
        rows.append(" ".join(f"{v:.17g}" for v in vals))
    return "\n".join(rows) + "\n"


def write_off(mesh: TriangleMesh) -> str:
    """Serialize a mesh to ASCII OFF (plain, unfused header)."""
    out = ["OFF", f"{len(mesh.vertices)} {len(mesh.faces)} 0"]
    for v in mesh.vertices:
        out.append(" ".join(f"{c:.17g}" for c in v))
    for f in mesh.faces:
        out.append("3 " + " ".join(str(int(i)) for i in f))
    return "\n".join(out) + "\n"

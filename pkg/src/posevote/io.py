"""PLY and OBJ readers, ASCII PLY writer."""

from __future__ import annotations

import logging
from pathlib import Path

import numpy as np

from posevote.cloud import PointCloud, TriangleMesh

log = logging.getLogger(__name__)


class ModelParseError(ValueError):
    """Malformed model file. ``offset`` is a byte offset (binary) or 1-based line number (ASCII)."""

    def __init__(self, message: str, *, line: int | None = None, offset: int | None = None):
        where = f" (line {line})" if line is not None else f" (byte offset {offset})" if offset is not None else ""
        super().__init__(message + where)
        self.line = line
        self.offset = offset


_PLY_TYPES = {
    "char": "i1", "int8": "i1",
    "uchar": "u1", "uint8": "u1",
    "short": "i2", "int16": "i2",
    "ushort": "u2", "uint16": "u2",
    "int": "i4", "int32": "i4",
    "uint": "u4", "uint32": "u4",
    "float": "f4", "float32": "f4",
    "double": "f8", "float64": "f8",
}


class _Element:
    def __init__(self, name: str, count: int):
        self.name = name
        self.count = count
        # (name, dtype) for scalars, (name, count_dtype, item_dtype) for lists
        self.props: list[tuple] = []


def _parse_header(data: bytes) -> tuple[str, list[_Element], int]:
    if not data.startswith(b"ply"):
        raise ModelParseError("missing 'ply' magic", line=1)
    end = data.find(b"end_header")
    if end < 0:
        raise ModelParseError("header has no end_header", offset=len(data))
    nl = data.find(b"\n", end)
    body_start = len(data) if nl < 0 else nl + 1
    fmt = None
    elements: list[_Element] = []
    for lineno, raw in enumerate(data[:end].decode("ascii", "replace").splitlines(), start=1):
        tok = raw.split()
        if not tok or tok[0] in ("ply", "comment", "obj_info"):
            continue
        if tok[0] == "format":
            fmt = tok[1]
        elif tok[0] == "element":
            try:
                elements.append(_Element(tok[1], int(tok[2])))
            except (IndexError, ValueError):
                raise ModelParseError(f"bad element declaration {raw!r}", line=lineno) from None
        elif tok[0] == "property":
            if not elements:
                raise ModelParseError("property before any element", line=lineno)
            try:
                if tok[1] == "list":
                    elements[-1].props.append((tok[4], _PLY_TYPES[tok[2]], _PLY_TYPES[tok[3]]))
                else:
                    elements[-1].props.append((tok[2], _PLY_TYPES[tok[1]]))
            except (IndexError, KeyError):
                raise ModelParseError(f"bad property declaration {raw!r}", line=lineno) from None
    if fmt not in ("ascii", "binary_little_endian"):
        raise ModelParseError(f"unsupported PLY format {fmt!r}", line=2)
    return fmt, elements, body_start


def _assemble(vertex: dict[str, np.ndarray], faces: list[np.ndarray] | None, n_vertex: int):
    for axis in "xyz":
        if axis not in vertex:
            raise ModelParseError(f"vertex element lacks property {axis!r}")
    pts = np.stack([vertex["x"], vertex["y"], vertex["z"]], axis=1).astype(float)
    skipped = [k for k in vertex if k not in ("x", "y", "z", "nx", "ny", "nz")]
    if skipped:
        log.info("PLY: skipped %d vertex properties: %s", len(skipped), ", ".join(skipped))
    if faces:
        tris = []
        for poly in faces:
            if np.any(poly < 0) or np.any(poly >= n_vertex):
                raise IndexError(f"face references vertex {int(poly.max())} but only {n_vertex} exist")
            # fan triangulation for polygons
            for j in range(1, len(poly) - 1):
                tri = (poly[0], poly[j], poly[j + 1])
                if len(set(tri)) == 3:
                    tris.append(tri)
        return TriangleMesh(pts, np.asarray(tris, dtype=np.int64).reshape(-1, 3))
    normals = None
    if all(k in vertex for k in ("nx", "ny", "nz")):
        normals = np.stack([vertex["nx"], vertex["ny"], vertex["nz"]], axis=1).astype(float)
        lengths = np.linalg.norm(normals, axis=1)
        if np.all(lengths > 0):
            normals = normals / lengths[:, None]
        else:
            normals = None
    return PointCloud(pts, normals)


def _read_ply_ascii(data: bytes, elements: list[_Element], body_start: int):
    header_lines = data[:body_start].count(b"\n")
    lines = data[body_start:].decode("ascii", "replace").splitlines()
    pos = 0
    vertex: dict[str, np.ndarray] = {}
    faces: list[np.ndarray] = []
    n_vertex = 0
    for el in elements:
        if pos + el.count > len(lines):
            raise ModelParseError(
                f"file ends inside element {el.name!r}", line=header_lines + len(lines) + 1
            )
        rows = lines[pos : pos + el.count]
        if el.name == "vertex":
            n_vertex = el.count
            if any(len(p) == 3 for p in el.props):
                raise ModelParseError("list properties on vertices are not supported", line=header_lines + pos + 1)
            try:
                arr = np.array([r.split() for r in rows], dtype=float).reshape(el.count, len(el.props))
            except ValueError:
                for i, r in enumerate(rows):
                    line = header_lines + pos + i + 1
                    if len(r.split()) != len(el.props):
                        raise ModelParseError("wrong vertex field count", line=line) from None
                    try:
                        [float(x) for x in r.split()]
                    except ValueError:
                        raise ModelParseError("non-numeric vertex data", line=line) from None
                raise
            for j, p in enumerate(el.props):
                vertex[p[0]] = arr[:, j]
        elif el.name == "face":
            for i, r in enumerate(rows):
                tok = r.split()
                try:
                    cnt = int(tok[0])
                    idx = np.array(tok[1 : 1 + cnt], dtype=np.int64)
                except (IndexError, ValueError):
                    raise ModelParseError("malformed face record", line=header_lines + pos + i + 1) from None
                if len(idx) != cnt:
                    raise ModelParseError("face record shorter than its count", line=header_lines + pos + i + 1)
                faces.append(idx)
        pos += el.count
    return _assemble(vertex, faces, n_vertex)


def _read_ply_binary(data: bytes, elements: list[_Element], body_start: int):
    off = body_start
    vertex: dict[str, np.ndarray] = {}
    faces: list[np.ndarray] = []
    n_vertex = 0
    for el in elements:
        if all(len(p) == 2 for p in el.props):
            dt = np.dtype([(p[0], "<" + p[1]) for p in el.props])
            need = dt.itemsize * el.count
            if off + need > len(data):
                raise ModelParseError(
                    f"truncated binary data in element {el.name!r}: need {need} bytes, have {len(data) - off}",
                    offset=len(data),
                )
            arr = np.frombuffer(data, dtype=dt, count=el.count, offset=off)
            off += need
            if el.name == "vertex":
                n_vertex = el.count
                vertex = {name: arr[name] for name in dt.names}
            continue
        # elements with list properties are walked record by record
        for _ in range(el.count):
            rec_lists = []
            for p in el.props:
                if len(p) == 2:
                    sz = np.dtype(p[1]).itemsize
                    if off + sz > len(data):
                        raise ModelParseError(f"truncated {el.name!r} record", offset=off)
                    off += sz
                    continue
                csz = np.dtype(p[1]).itemsize
                if off + csz > len(data):
                    raise ModelParseError(f"truncated {el.name!r} list count", offset=off)
                cnt = int(np.frombuffer(data, dtype="<" + p[1], count=1, offset=off)[0])
                off += csz
                isz = np.dtype(p[2]).itemsize
                if off + cnt * isz > len(data):
                    raise ModelParseError(f"truncated {el.name!r} list body", offset=off)
                rec_lists.append((p[0], np.frombuffer(data, dtype="<" + p[2], count=cnt, offset=off).astype(np.int64)))
                off += cnt * isz
            if el.name == "face":
                for name, vals in rec_lists:
                    if name in ("vertex_indices", "vertex_index"):
                        faces.append(vals)
    return _assemble(vertex, faces, n_vertex)


def read_ply(path) -> TriangleMesh | PointCloud:
    data = Path(path).read_bytes()
    fmt, elements, body_start = _parse_header(data)
    if fmt == "ascii":
        return _read_ply_ascii(data, elements, body_start)
    return _read_ply_binary(data, elements, body_start)


def read_obj(path) -> TriangleMesh | PointCloud:
    verts: list[list[float]] = []
    faces: list[list[int]] = []
    with open(path, "r", encoding="utf-8", errors="replace") as fh:
        for lineno, line in enumerate(fh, start=1):
            tok = line.split()
            if not tok:
                continue
            if tok[0] == "v":
                try:
                    verts.append([float(tok[1]), float(tok[2]), float(tok[3])])
                except (IndexError, ValueError):
                    raise ModelParseError(f"bad vertex record {line.strip()!r}", line=lineno) from None
            elif tok[0] == "f":
                try:
                    idx = [int(t.split("/")[0]) for t in tok[1:]]
                except ValueError:
                    raise ModelParseError(f"bad face record {line.strip()!r}", line=lineno) from None
                if len(idx) < 3:
                    raise ModelParseError("face with fewer than 3 vertices", line=lineno)
                n = len(verts)
                # OBJ is 1-based; negative indices count back from the latest vertex
                idx = [i - 1 if i > 0 else n + i for i in idx]
                for i in idx:
                    if not 0 <= i < n:
                        raise IndexError(f"line {lineno}: face index out of range for {n} vertices")
                for j in range(1, len(idx) - 1):
                    tri = [idx[0], idx[j], idx[j + 1]]
                    if len(set(tri)) == 3:
                        faces.append(tri)
    if faces:
        return TriangleMesh(np.array(verts), np.array(faces))
    return PointCloud(np.array(verts).reshape(-1, 3))


def load_model(path, format: str | None = None) -> TriangleMesh | PointCloud:
    """Load a PLY or OBJ file; the format defaults to the file suffix."""
    fmt = (format or Path(path).suffix.lstrip(".")).lower()
    if fmt == "ply":
        return read_ply(path)
    if fmt == "obj":
        return read_obj(path)
    raise ValueError(f"unsupported model format {fmt!r}")


def write_ply(path, model: PointCloud | TriangleMesh) -> None:
    """ASCII PLY dump of a cloud (with normals if present) or a mesh."""
    if isinstance(model, TriangleMesh):
        pts, normals, faces = model.vertices, None, model.faces
    else:
        pts, normals, faces = model.points, model.normals, None
    lines = ["ply", "format ascii 1.0", f"element vertex {len(pts)}"]
    lines += [f"property double {a}" for a in "xyz"]
    if normals is not None:
        lines += [f"property double n{a}" for a in "xyz"]
    if faces is not None:
        lines += [f"element face {len(faces)}", "property list uchar int vertex_indices"]
    lines.append("end_header")
    cols = pts if normals is None else np.hstack([pts, normals])
    body = [" ".join(repr(float(x)) for x in row) for row in cols]
    if faces is not None:
        body += ["3 " + " ".join(str(int(i)) for i in f) for f in faces]
    Path(path).write_text("\n".join(lines + body) + "\n", encoding="ascii")

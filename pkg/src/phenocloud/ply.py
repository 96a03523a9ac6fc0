"""Reading and writing vertex-only PLY files (ASCII and binary little-endian)."""

from __future__ import annotations

import os
from dataclasses import dataclass, field

import numpy as np

from .cloud import PointCloud
from .errors import IoError, ParseError, UnsupportedFormat

_TYPES = {
    "char": "i1", "int8": "i1",
    "uchar": "u1", "uint8": "u1",
    "short": "i2", "int16": "i2",
    "ushort": "u2", "uint16": "u2",
    "int": "i4", "int32": "i4",
    "uint": "u4", "uint32": "u4",
    "float": "f4", "float32": "f4",
    "double": "f8", "float64": "f8",
}


@dataclass
class _Element:
    name: str
    count: int
    properties: list = field(default_factory=list)  # (name, dtype) or (name, ("list", count_t, item_t))


def _parse_header(data: bytes):
    if not data.startswith(b"ply"):
        raise ParseError("missing 'ply' magic", 0)
    end = data.find(b"end_header")
    if end < 0:
        raise ParseError("missing end_header", len(data))
    nl = data.find(b"\n", end)
    if nl < 0:
        raise ParseError("end_header not terminated by newline", end)
    body_start = nl + 1

    fmt = None
    elements: list[_Element] = []
    offset = 0
    for raw_line in data[:body_start].split(b"\n"):
        line_offset = offset
        offset += len(raw_line) + 1
        line = raw_line.decode("ascii", errors="replace").strip()
        if not line or line == "ply":
            continue
        tokens = line.split()
        key = tokens[0]
        if key in ("comment", "obj_info"):
            continue
        if key == "end_header":
            break
        if key == "format":
            if len(tokens) != 3:
                raise ParseError(f"bad format line {line!r}", line_offset)
            fmt = tokens[1]
            if fmt == "binary_big_endian":
                raise UnsupportedFormat("binary_big_endian PLY is not supported")
            if fmt not in ("ascii", "binary_little_endian"):
                raise ParseError(f"unknown PLY format {fmt!r}", line_offset)
        elif key == "element":
            if len(tokens) != 3:
                raise ParseError(f"bad element line {line!r}", line_offset)
            try:
                count = int(tokens[2])
            except ValueError:
                raise ParseError(f"bad element count {tokens[2]!r}", line_offset) from None
            if count < 0:
                raise ParseError("negative element count", line_offset)
            elements.append(_Element(tokens[1], count))
        elif key == "property":
            if not elements:
                raise ParseError("property before any element", line_offset)
            if len(tokens) >= 2 and tokens[1] == "list":
                if len(tokens) != 5 or tokens[2] not in _TYPES or tokens[3] not in _TYPES:
                    raise ParseError(f"bad list property {line!r}", line_offset)
                elements[-1].properties.append((tokens[4], ("list", _TYPES[tokens[2]], _TYPES[tokens[3]])))
            else:
                if len(tokens) != 3 or tokens[1] not in _TYPES:
                    raise ParseError(f"bad property line {line!r}", line_offset)
                elements[-1].properties.append((tokens[2], _TYPES[tokens[1]]))
        else:
            raise ParseError(f"unexpected header keyword {key!r}", line_offset)
    if fmt is None:
        raise ParseError("missing format line", 0)
    return fmt, elements, body_start


def load_ply(path) -> PointCloud:
    """Load the vertex element of a PLY file.

    Recognised vertex properties are x, y, z, red, green, blue, nx, ny, nz and
    label; any other scalar property is kept in ``cloud.extra``. Point order is
    file order.
    """
    try:
        with open(path, "rb") as fh:
            data = fh.read()
    except OSError as exc:
        raise IoError(str(exc)) from exc
    fmt, elements, body_start = _parse_header(data)

    vertex = None
    pos = body_start
    ascii_lines = None
    if fmt == "ascii":
        ascii_lines = data[body_start:].split(b"\n")
        line_no = 0
    for el in elements:
        if el.name == "vertex":
            vertex = el
            break
        # skip elements that precede the vertex block
        if fmt == "ascii":
            line_no += el.count
        else:
            if any(isinstance(t, tuple) for _, t in el.properties):
                raise ParseError(f"cannot skip list element {el.name!r} before vertex", pos)
            dt = np.dtype([(n, "<" + t) for n, t in el.properties])
            pos += dt.itemsize * el.count
    if vertex is None:
        raise ParseError("no vertex element", body_start)
    names = [n for n, _ in vertex.properties]
    for req in ("x", "y", "z"):
        if req not in names:
            raise ParseError(f"vertex element lacks property {req!r}", body_start)
    if any(isinstance(t, tuple) for _, t in vertex.properties):
        raise ParseError("list properties in vertex element are not supported", body_start)

    dtype = np.dtype([(n, "<" + t) for n, t in vertex.properties])
    n = vertex.count
    if fmt == "ascii":
        rows = [ln.split() for ln in ascii_lines[line_no:line_no + n]]
        if len(rows) < n or any(len(r) < len(names) for r in rows):
            raise ParseError("truncated ASCII vertex data", body_start)
        arr = np.zeros(n, dtype=dtype)
        if n:
            table = np.array([r[: len(names)] for r in rows], dtype=object)
            for j, (name, t) in enumerate(vertex.properties):
                kind = np.dtype(t).kind
                col = table[:, j].astype(str)
                try:
                    arr[name] = col.astype(np.float64) if kind == "f" else col.astype(np.int64)
                except ValueError:
                    raise ParseError(f"bad numeric value in property {name!r}", body_start) from None
    else:
        need = dtype.itemsize * n
        if pos + need > len(data):
            raise ParseError("truncated binary vertex data", len(data))
        arr = np.frombuffer(data, dtype=dtype, count=n, offset=pos)

    positions = np.stack([arr["x"], arr["y"], arr["z"]], axis=1).astype(np.float64)
    colors = None
    if all(c in names for c in ("red", "green", "blue")):
        colors = np.stack([arr["red"], arr["green"], arr["blue"]], axis=1).astype(np.uint8)
    normals = None
    if all(c in names for c in ("nx", "ny", "nz")):
        normals = np.stack([arr["nx"], arr["ny"], arr["nz"]], axis=1).astype(np.float64)
    labels = arr["label"].astype(np.int32) if "label" in names else None
    known = {"x", "y", "z", "red", "green", "blue", "nx", "ny", "nz", "label"}
    extra = {name: np.array(arr[name]) for name in names if name not in known}
    return PointCloud(positions, colors=colors, normals=normals, labels=labels, extra=extra)


def write_ply(cloud: PointCloud, path, binary: bool = True) -> None:
    """Write ``cloud`` as a PLY vertex list.

    Positions and normals are stored as float32, colors as uchar, labels and
    integer extras as int32, float extras as float32.
    """
    n = len(cloud)
    fields = [("x", "f4"), ("y", "f4"), ("z", "f4")]
    columns = [cloud.positions[:, 0], cloud.positions[:, 1], cloud.positions[:, 2]]
    if cloud.normals is not None:
        fields += [("nx", "f4"), ("ny", "f4"), ("nz", "f4")]
        columns += [cloud.normals[:, i] for i in range(3)]
    if cloud.colors is not None:
        fields += [("red", "u1"), ("green", "u1"), ("blue", "u1")]
        columns += [cloud.colors[:, i] for i in range(3)]
    if cloud.labels is not None:
        fields.append(("label", "i4"))
        columns.append(cloud.labels)
    for name, values in sorted(cloud.extra.items()):
        kind = np.asarray(values).dtype.kind
        fields.append((name, "i4" if kind in "iub" else "f4"))
        columns.append(values)
    ply_names = {"f4": "float", "u1": "uchar", "i4": "int"}
    header = ["ply", f"format {'binary_little_endian' if binary else 'ascii'} 1.0",
              "comment written by phenocloud", f"element vertex {n}"]
    header += [f"property {ply_names[t]} {name}" for name, t in fields]
    header.append("end_header")
    head = ("\n".join(header) + "\n").encode("ascii")

    arr = np.zeros(n, dtype=[(name, "<" + t) for name, t in fields])
    for (name, _), col in zip(fields, columns):
        arr[name] = col
    try:
        directory = os.path.dirname(os.fspath(path))
        if directory and not os.path.isdir(directory):
            raise FileNotFoundError(f"directory does not exist: {directory}")
        with open(path, "wb") as fh:
            fh.write(head)
            if binary:
                fh.write(arr.tobytes())
            else:
                lines = []
                for row in arr:
                    parts = []
                    for (name, t) in fields:
                        v = row[name]
                        parts.append(repr(float(v)) if t == "f4" else str(int(v)))
                    lines.append(" ".join(parts))
                if lines:
                    fh.write(("\n".join(lines) + "\n").encode("ascii"))
    except OSError as exc:
        raise IoError(str(exc)) from exc


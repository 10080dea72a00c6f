"""Point cloud and mesh files: XYZ, PLY (ascii / binary little-endian) and OBJ."""

from __future__ import annotations

import io as _io
import warnings
from pathlib import Path

import numpy as np

from .surfacing import Mesh

PLY_TYPES = {
    "char": "i1", "int8": "i1", "uchar": "u1", "uint8": "u1",
    "short": "i2", "int16": "i2", "ushort": "u2", "uint16": "u2",
    "int": "i4", "int32": "i4", "uint": "u4", "uint32": "u4",
    "float": "f4", "float32": "f4", "double": "f8", "float64": "f8",
}


class DataError(ValueError):
    """Unreadable, malformed or empty input data."""


class ParseError(DataError):
    def __init__(self, path, message, line=None, offset=None):
        where = f" line {line}" if line is not None else f" byte {offset}" if offset is not None else ""
        super().__init__(f"{path}:{where}: {message}" if where else f"{path}: {message}")
        self.line = line
        self.offset = offset


def _fmt(path) -> str:
    ext = Path(path).suffix.lower().lstrip(".")
    if ext not in ("xyz", "ply", "obj"):
        raise DataError(f"{path}: unsupported extension {ext!r}")
    return ext


# ---------------------------------------------------------------------------
# XYZ

def _read_xyz(path) -> np.ndarray:
    try:
        with warnings.catch_warnings():
            warnings.simplefilter("ignore", UserWarning)  # empty input is reported below
            pts = np.loadtxt(path, usecols=(0, 1, 2), comments="#", ndmin=2, dtype=np.float64)
    except ValueError:
        _locate_xyz_error(path)
        raise
    if len(pts) == 0:
        raise DataError(f"{path}: empty point cloud")
    return pts


def _locate_xyz_error(path):
    with open(path) as fh:
        for lineno, line in enumerate(fh, 1):
            body = line.split("#", 1)[0].split()
            if not body:
                continue
            if len(body) < 3:
                raise ParseError(path, f"expected at least 3 columns, got {len(body)}", line=lineno)
            try:
                [float(v) for v in body[:3]]
            except ValueError:
                raise ParseError(path, f"non-numeric coordinate in {line.strip()!r}", line=lineno) from None
    raise ParseError(path, "could not parse file")


def _write_xyz(cloud, path):
    # %-formatting ignores the process locale; 17 significant digits round-trip float64
    with open(path, "w", newline="\n") as fh:
        np.savetxt(fh, cloud, fmt="%.17g", delimiter=" ")


# ---------------------------------------------------------------------------
# PLY

def _parse_ply_header(path, fh):
    first = fh.readline()
    if first.strip() != b"ply":
        raise ParseError(path, "missing 'ply' magic", line=1)
    fmt = None
    elements = []
    lineno = 1
    while True:
        raw = fh.readline()
        lineno += 1
        if not raw:
            raise ParseError(path, "header ends before end_header", line=lineno)
        tok = raw.decode("ascii", errors="replace").split()
        if not tok or tok[0] in ("comment", "obj_info"):
            continue
        if tok[0] == "format":
            if len(tok) < 2 or tok[1] not in ("ascii", "binary_little_endian", "binary_big_endian"):
                raise ParseError(path, f"unknown format {' '.join(tok[1:])!r}", line=lineno)
            fmt = tok[1]
        elif tok[0] == "element":
            if len(tok) != 3 or not tok[2].isdigit():
                raise ParseError(path, "malformed element line", line=lineno)
            elements.append({"name": tok[1], "count": int(tok[2]), "props": []})
        elif tok[0] == "property":
            if not elements:
                raise ParseError(path, "property before any element", line=lineno)
            if len(tok) == 5 and tok[1] == "list":
                if tok[2] not in PLY_TYPES or tok[3] not in PLY_TYPES:
                    raise ParseError(path, f"unknown list type in {' '.join(tok)!r}", line=lineno)
                elements[-1]["props"].append((tok[4], "list", PLY_TYPES[tok[2]], PLY_TYPES[tok[3]]))
            elif len(tok) == 3 and tok[1] in PLY_TYPES:
                elements[-1]["props"].append((tok[2], PLY_TYPES[tok[1]]))
            else:
                raise ParseError(path, f"malformed property {' '.join(tok[1:])!r}", line=lineno)
        elif tok[0] == "end_header":
            break
        else:
            raise ParseError(path, f"unexpected header keyword {tok[0]!r}", line=lineno)
    if fmt is None:
        raise ParseError(path, "header has no format line")
    if fmt == "binary_big_endian":
        raise DataError(f"{path}: binary big-endian PLY is not supported")
    return fmt, elements, lineno


def _read_ply_elements(path, want=("vertex", "face")) -> dict:
    with open(path, "rb") as fh:
        fmt, elements, header_lines = _parse_ply_header(path, fh)
        start = fh.tell()
        data = fh.read()
    out = {}
    if fmt == "ascii":
        _read_ply_ascii(path, data, elements, header_lines, want, out)
    else:
        _read_ply_binary(path, data, start, elements, want, out)
    return out


def _read_ply_binary(path, data, start, elements, want, out):
    pos = 0
    for el in elements:
        n = el["count"]
        if all(len(p) == 2 for p in el["props"]):
            dt = np.dtype([(p[0], "<" + p[1]) for p in el["props"]])
            need = dt.itemsize * n
            if pos + need > len(data):
                raise ParseError(path, f"truncated {el['name']} data", offset=start + len(data))
            if el["name"] in want:
                out[el["name"]] = np.frombuffer(data, dtype=dt, count=n, offset=pos)
            pos += need
            continue
        props = el["props"]
        if len(props) == 1 and props[0][1] == "list":
            # fast path: every list has exactly three entries
            fixed = np.dtype([("n", "<" + props[0][2]), ("v", "<" + props[0][3], (3,))])
            if pos + fixed.itemsize * n <= len(data):
                rec = np.frombuffer(data, dtype=fixed, count=n, offset=pos)
                if np.all(rec["n"] == 3):
                    if el["name"] in want:
                        out[el["name"]] = rec["v"].astype(np.int64)
                    pos += fixed.itemsize * n
                    continue
        rows = []
        for _ in range(n):
            row = {}
            for p in el["props"]:
                if len(p) == 2:
                    sz = np.dtype(p[1]).itemsize
                    if pos + sz > len(data):
                        raise ParseError(path, "truncated element data", offset=start + pos)
                    row[p[0]] = np.frombuffer(data, "<" + p[1], 1, pos)[0]
                    pos += sz
                else:
                    csz = np.dtype(p[2]).itemsize
                    if pos + csz > len(data):
                        raise ParseError(path, "truncated list count", offset=start + pos)
                    k = int(np.frombuffer(data, "<" + p[2], 1, pos)[0])
                    pos += csz
                    isz = np.dtype(p[3]).itemsize
                    if pos + k * isz > len(data):
                        raise ParseError(path, "truncated list data", offset=start + pos)
                    row[p[0]] = np.frombuffer(data, "<" + p[3], k, pos)
                    pos += k * isz
            rows.append(row)
        if el["name"] in want:
            out[el["name"]] = rows


def _read_ply_ascii(path, data, elements, header_lines, want, out):
    lines = data.decode("ascii", errors="replace").splitlines()
    li = 0
    for el in elements:
        simple = all(len(p) == 2 for p in el["props"])
        if el["name"] in want and simple:
            block = lines[li:li + el["count"]]
            if len(block) < el["count"]:
                raise ParseError(path, f"expected {el['count']} {el['name']} lines, got {len(block)}",
                                 line=header_lines + li + len(block) + 1)
            dt = np.dtype([(p[0], p[1]) for p in el["props"]])
            try:
                arr = np.loadtxt(_io.StringIO("\n".join(block)), ndmin=2, dtype=np.float64)
                if arr.shape[1] != len(dt.names):
                    raise ValueError
            except ValueError:
                for k, line in enumerate(block):
                    tok = line.split()
                    try:
                        vals = [float(t) for t in tok]
                    except ValueError:
                        vals = []
                    if len(vals) != len(dt.names):
                        raise ParseError(path, f"malformed {el['name']} record {line.strip()!r}",
                                         line=header_lines + li + k + 1) from None
                raise
            rec = np.empty(el["count"], dtype=dt)
            for c, name in enumerate(dt.names):
                rec[name] = arr[:, c]
            out[el["name"]] = rec
        elif el["name"] in want:
            rows = []
            for k in range(el["count"]):
                if li + k >= len(lines):
                    raise ParseError(path, "file ends inside element data", line=header_lines + li + k + 1)
                tok = lines[li + k].split()
                row, t = {}, 0
                try:
                    for p in el["props"]:
                        if len(p) == 2:
                            row[p[0]] = float(tok[t])
                            t += 1
                        else:
                            cnt = int(tok[t])
                            row[p[0]] = np.array([int(v) for v in tok[t + 1:t + 1 + cnt]])
                            t += 1 + cnt
                except (ValueError, IndexError):
                    raise ParseError(path, f"malformed {el['name']} record", line=header_lines + li + k + 1) from None
                rows.append(row)
            out[el["name"]] = rows
        li += el["count"]


def _vertices_from(path, elements) -> np.ndarray:
    if "vertex" not in elements:
        raise ParseError(path, "no vertex element")
    v = elements["vertex"]
    names = v.dtype.names if hasattr(v, "dtype") else tuple(v[0]) if v else ()
    if not {"x", "y", "z"} <= set(names or ()):
        raise ParseError(path, "vertex element lacks x, y, z properties")
    if hasattr(v, "dtype"):
        pts = np.stack([np.asarray(v[c], dtype=np.float64) for c in "xyz"], axis=1)
    else:
        pts = np.array([[r["x"], r["y"], r["z"]] for r in v], dtype=np.float64).reshape(-1, 3)
    return pts


def _write_ply_binary(path, vertices, faces=None, dtype="f8"):
    vtype = {"f8": "double", "f4": "float"}[np.dtype(dtype).str[1:]]
    header = ["ply", "format binary_little_endian 1.0", f"element vertex {len(vertices)}",
              f"property {vtype} x", f"property {vtype} y", f"property {vtype} z"]
    if faces is not None:
        header += [f"element face {len(faces)}", "property list uchar int vertex_indices"]
    header.append("end_header")
    with open(path, "wb") as fh:
        fh.write(("\n".join(header) + "\n").encode("ascii"))
        fh.write(np.ascontiguousarray(vertices, dtype="<" + np.dtype(dtype).str[1:]).tobytes())
        if faces is not None and len(faces):
            rec = np.empty(len(faces), dtype=[("n", "u1"), ("v", "<i4", (3,))])
            rec["n"] = 3
            rec["v"] = faces
            fh.write(rec.tobytes())


def _write_ply_ascii(path, vertices):
    with open(path, "w", newline="\n") as fh:
        fh.write(f"ply\nformat ascii 1.0\nelement vertex {len(vertices)}\n"
                 "property double x\nproperty double y\nproperty double z\nend_header\n")
        np.savetxt(fh, vertices, fmt="%.17g", delimiter=" ")


# ---------------------------------------------------------------------------
# public API

def read_point_cloud(path) -> np.ndarray:
    path = Path(path)
    if not path.is_file():
        raise DataError(f"{path}: no such file")
    fmt = _fmt(path)
    if fmt == "xyz":
        return _read_xyz(path)
    if fmt == "ply":
        pts = _vertices_from(path, _read_ply_elements(path, want=("vertex",)))
        if len(pts) == 0:
            raise DataError(f"{path}: empty point cloud")
        return pts
    raise DataError(f"{path}: OBJ is a mesh format; use read_mesh")


def write_point_cloud(cloud, path, format: str | None = None) -> None:
    """``format``: ``xyz``, ``ply`` (binary little-endian, float64) or ``ply-ascii``."""
    cloud = np.asarray(cloud, dtype=np.float64)
    if cloud.ndim != 2 or cloud.shape[1] != 3:
        raise DataError(f"expected an (n, 3) point array, got {cloud.shape}")
    format = format or _fmt(path)
    if format == "xyz":
        _write_xyz(cloud, path)
    elif format == "ply":
        _write_ply_binary(path, cloud)
    elif format == "ply-ascii":
        _write_ply_ascii(path, cloud)
    else:
        raise DataError(f"unsupported point cloud format {format!r}")


def write_mesh(mesh: Mesh, path, format: str | None = None) -> None:
    format = format or _fmt(path)
    if format == "obj":
        with open(path, "w", newline="\n") as fh:
            np.savetxt(fh, mesh.vertices, fmt="v %.17g %.17g %.17g")
            np.savetxt(fh, mesh.triangles + 1, fmt="f %d %d %d")
    elif format == "ply":
        _write_ply_binary(path, mesh.vertices, mesh.triangles)
    else:
        raise DataError(f"unsupported mesh format {format!r}")


def read_mesh(path) -> Mesh:
    path = Path(path)
    if not path.is_file():
        raise DataError(f"{path}: no such file")
    fmt = _fmt(path)
    if fmt == "ply":
        el = _read_ply_elements(path)
        verts = _vertices_from(path, el)
        faces = el.get("face", [])
        if isinstance(faces, np.ndarray) and faces.dtype.names is None:
            tris = faces.reshape(-1, 3)
        elif isinstance(faces, list):
            key = next(iter(faces[0])) if faces else None
            tris = np.array([r[key] for r in faces], dtype=np.int64).reshape(-1, 3) if faces else np.zeros((0, 3), np.int64)
        else:
            tris = np.asarray(faces.tolist(), dtype=np.int64).reshape(-1, 3)
        return Mesh(verts, tris)
    if fmt == "obj":
        verts, tris = [], []
        with open(path) as fh:
            for lineno, line in enumerate(fh, 1):
                tok = line.split()
                if not tok:
                    continue
                try:
                    if tok[0] == "v":
                        verts.append([float(t) for t in tok[1:4]])
                    elif tok[0] == "f":
                        idx = [int(t.split("/")[0]) for t in tok[1:]]
                        tris += [[idx[0] - 1, idx[k] - 1, idx[k + 1] - 1] for k in range(1, len(idx) - 1)]
                except ValueError:
                    raise ParseError(path, f"malformed record {line.strip()!r}", line=lineno) from None
        return Mesh(np.array(verts, dtype=np.float64).reshape(-1, 3), np.array(tris, dtype=np.int64).reshape(-1, 3))
    raise DataError(f"{path}: XYZ holds no faces")

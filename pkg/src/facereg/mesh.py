"""Triangle meshes, point clouds, and the OBJ/PLY formats they travel in."""
from __future__ import annotations

import os
from dataclasses import dataclass, field
from typing import Mapping

import numpy as np


class MeshParseError(ValueError):
    """Malformed mesh file. ``line`` (text) or ``offset`` (binary) locates it."""

    def __init__(self, message: str, path=None, line: int | None = None,
                 offset: int | None = None):
        where = []
        if path is not None:
            where.append(str(path))
        if line is not None:
            where.append(f"line {line}")
        if offset is not None:
            where.append(f"byte {offset}")
        super().__init__(f"{': '.join(where)}: {message}" if where else message)
        self.path = path
        self.line = line
        self.offset = offset


class UnsupportedTopologyError(MeshParseError):
    """Face with other than three vertices."""


@dataclass(frozen=True, eq=False)
class TriMesh:
    """Indexed triangle mesh in double precision.

    Degenerate (zero-area) faces are allowed and kept so vertex indices stay
    stable; they simply carry zero weight wherever areas are used.
    """

    vertices: np.ndarray
    faces: np.ndarray
    landmarks: Mapping[str, int] = field(default_factory=dict)

    def __post_init__(self):
        v = np.ascontiguousarray(self.vertices, dtype=np.float64)
        f = np.ascontiguousarray(self.faces, dtype=np.int64)
        if v.ndim != 2 or v.shape[1] != 3:
            raise ValueError(f"vertices must be (n, 3), got {v.shape}")
        if f.size == 0:
            f = f.reshape(0, 3)
        if f.ndim != 2 or f.shape[1] != 3:
            raise ValueError(f"faces must be (m, 3), got {f.shape}")
        if f.size and (f.min() < 0 or f.max() >= len(v)):
            raise ValueError("face index out of range")
        if f.size and np.any((f[:, 0] == f[:, 1]) | (f[:, 1] == f[:, 2]) | (f[:, 0] == f[:, 2])):
            raise ValueError("face with repeated vertex index")
        for label, idx in self.landmarks.items():
            if not 0 <= int(idx) < len(v):
                raise ValueError(f"landmark {label!r} index {idx} out of range")
        v.setflags(write=False)
        f.setflags(write=False)
        object.__setattr__(self, "vertices", v)
        object.__setattr__(self, "faces", f)
        object.__setattr__(self, "landmarks", dict(self.landmarks))

    @property
    def n_vertices(self) -> int:
        return len(self.vertices)

    @property
    def n_faces(self) -> int:
        return len(self.faces)

    def with_vertices(self, vertices: np.ndarray) -> "TriMesh":
        return TriMesh(vertices, self.faces, self.landmarks)

    def face_cross(self) -> np.ndarray:
        v = self.vertices
        f = self.faces
        return np.cross(v[f[:, 1]] - v[f[:, 0]], v[f[:, 2]] - v[f[:, 0]])

    def face_areas(self) -> np.ndarray:
        return 0.5 * np.linalg.norm(self.face_cross(), axis=1)

    def face_normals(self) -> np.ndarray:
        """Unit face normals; zero rows for degenerate faces."""
        cr = self.face_cross()
        norm = np.linalg.norm(cr, axis=1, keepdims=True)
        out = np.zeros_like(cr)
        ok = norm[:, 0] > 0
        out[ok] = cr[ok] / norm[ok]
        return out

    def bbox_diagonal(self) -> float:
        return float(np.linalg.norm(self.vertices.max(0) - self.vertices.min(0)))


@dataclass(frozen=True, eq=False)
class PointCloud:
    points: np.ndarray
    normals: np.ndarray | None = None
    seed: int | None = None
    source_faces: np.ndarray | None = None

    def __post_init__(self):
        p = np.ascontiguousarray(self.points, dtype=np.float64)
        if p.ndim != 2 or p.shape[1] != 3:
            raise ValueError(f"points must be (n, 3), got {p.shape}")
        object.__setattr__(self, "points", p)
        if self.normals is not None:
            n = np.ascontiguousarray(self.normals, dtype=np.float64)
            if n.shape != p.shape:
                raise ValueError("normals must match points")
            if n.size and np.abs(np.linalg.norm(n, axis=1) - 1.0).max() > 1e-6:
                raise ValueError("normals must have unit length")
            object.__setattr__(self, "normals", n)

    def __len__(self) -> int:
        return len(self.points)


@dataclass(frozen=True, eq=False)
class EdgeSet:
    """Unique undirected edges (i < j) with their rest lengths."""

    pairs: np.ndarray
    lengths: np.ndarray

    def __len__(self) -> int:
        return len(self.pairs)


# --------------------------------------------------------------------------- geometry


def vertex_normals(mesh: TriMesh) -> np.ndarray:
    """Area-weighted vertex normals.

    Vertices touched only by zero-area faces get the zero vector, which is
    the invalid flag (see :func:`valid_normal_mask`).
    """
    cr = mesh.face_cross()  # length = 2 * area, so this is the area weighting
    acc = np.zeros((mesh.n_vertices, 3))
    for k in range(3):
        np.add.at(acc, mesh.faces[:, k], cr)
    norm = np.linalg.norm(acc, axis=1, keepdims=True)
    out = np.zeros_like(acc)
    ok = norm[:, 0] > 0
    out[ok] = acc[ok] / norm[ok]
    return out


def valid_normal_mask(normals: np.ndarray) -> np.ndarray:
    return np.any(normals != 0.0, axis=1)


def edge_set(mesh: TriMesh, reference: TriMesh | None = None) -> EdgeSet:
    """Undirected edges of ``mesh``; lengths measured on ``reference`` if given."""
    f = mesh.faces
    e = np.concatenate([f[:, [0, 1]], f[:, [1, 2]], f[:, [2, 0]]])
    e.sort(axis=1)
    pairs = np.unique(e, axis=0) if len(e) else np.zeros((0, 2), dtype=np.int64)
    src = (reference or mesh).vertices
    lengths = np.linalg.norm(src[pairs[:, 0]] - src[pairs[:, 1]], axis=1)
    return EdgeSet(pairs, lengths)


def subset_edges(edges: EdgeSet, vertices) -> EdgeSet:
    """Edges whose two endpoints both lie in ``vertices``."""
    mask = np.zeros(int(edges.pairs.max(initial=-1)) + 1, dtype=bool)
    vertices = np.asarray(vertices, dtype=np.int64)
    vertices = vertices[vertices < len(mask)]
    mask[vertices] = True
    keep = mask[edges.pairs[:, 0]] & mask[edges.pairs[:, 1]]
    return EdgeSet(edges.pairs[keep], edges.lengths[keep])


# --------------------------------------------------------------------------- io

_PLY_TYPES = {
    "char": "i1", "int8": "i1", "uchar": "u1", "uint8": "u1",
    "short": "i2", "int16": "i2", "ushort": "u2", "uint16": "u2",
    "int": "i4", "int32": "i4", "uint": "u4", "uint32": "u4",
    "float": "f4", "float32": "f4", "double": "f8", "float64": "f8",
}


def _detect_format(path) -> str:
    ext = os.path.splitext(str(path))[1].lower()
    if ext == ".obj":
        return "obj"
    if ext == ".ply":
        with open(path, "rb") as fh:
            head = fh.read(512)
        if b"format binary_little_endian" in head:
            return "ply-binary-little-endian"
        return "ply-ascii"
    raise MeshParseError(f"unknown mesh extension {ext!r}", path)


def parse_mesh(path, format: str | None = None) -> TriMesh:
    """Read an OBJ or PLY triangle mesh. Texture and material records are skipped."""
    fmt = format or _detect_format(path)
    if fmt == "obj":
        return _parse_obj(path)
    if fmt in ("ply-ascii", "ply-binary-little-endian", "ply"):
        return _parse_ply(path)
    raise ValueError(f"unsupported mesh format {fmt!r}")


def _parse_obj(path) -> TriMesh:
    verts: list[tuple[float, float, float]] = []
    faces: list[tuple[int, int, int]] = []
    with open(path, "r", encoding="utf-8", errors="replace") as fh:
        for lineno, raw in enumerate(fh, start=1):
            line = raw.split("#", 1)[0].strip()
            if not line:
                continue
            parts = line.split()
            tag = parts[0]
            if tag == "v":
                if len(parts) < 4:
                    raise MeshParseError("vertex needs 3 coordinates", path, line=lineno)
                try:
                    verts.append((float(parts[1]), float(parts[2]), float(parts[3])))
                except ValueError as exc:
                    raise MeshParseError(f"bad vertex coordinate: {exc}", path, line=lineno) from None
            elif tag == "f":
                if len(parts) != 4:
                    raise UnsupportedTopologyError(
                        f"face with {len(parts) - 1} vertices; only triangles are supported",
                        path, line=lineno)
                idx = []
                for tok in parts[1:]:
                    try:
                        k = int(tok.split("/", 1)[0])
                    except ValueError:
                        raise MeshParseError(f"bad face index {tok!r}", path, line=lineno) from None
                    if k < 0:
                        k = len(verts) + k + 1
                    if k < 1 or k > len(verts):
                        raise MeshParseError(f"face index {tok} out of range", path, line=lineno)
                    idx.append(k - 1)
                if len(set(idx)) != 3:
                    raise MeshParseError("face repeats a vertex", path, line=lineno)
                faces.append(tuple(idx))
            # vt, vn, usemtl, mtllib, o, g, s and friends are ignored
    return TriMesh(np.array(verts, dtype=np.float64).reshape(-1, 3),
                   np.array(faces, dtype=np.int64).reshape(-1, 3))


def _read_ply_header(fh, path):
    first = fh.readline()
    if first.strip() != b"ply":
        raise MeshParseError("missing 'ply' magic", path, line=1)
    fmt = None
    elements: list[dict] = []
    lineno = 1
    while True:
        raw = fh.readline()
        lineno += 1
        if not raw:
            raise MeshParseError("unterminated header", path, line=lineno)
        parts = raw.decode("ascii", errors="replace").split()
        if not parts:
            continue
        if parts[0] == "format":
            fmt = parts[1]
        elif parts[0] == "element":
            elements.append({"name": parts[1], "count": int(parts[2]), "props": []})
        elif parts[0] == "property":
            if not elements:
                raise MeshParseError("property before element", path, line=lineno)
            if parts[1] == "list":
                if parts[2] not in _PLY_TYPES or parts[3] not in _PLY_TYPES:
                    raise MeshParseError(f"unknown list types {parts[2:4]}", path, line=lineno)
                elements[-1]["props"].append(("list", parts[4], parts[2], parts[3]))
            else:
                if parts[1] not in _PLY_TYPES:
                    raise MeshParseError(f"unknown property type {parts[1]!r}", path, line=lineno)
                elements[-1]["props"].append(("scalar", parts[2], parts[1], None))
        elif parts[0] == "end_header":
            break
    if fmt not in ("ascii", "binary_little_endian"):
        raise MeshParseError(f"unsupported ply format {fmt!r}", path, line=2)
    return fmt, elements, lineno


def _parse_ply(path) -> TriMesh:
    with open(path, "rb") as fh:
        fmt, elements, header_lines = _read_ply_header(fh, path)
        if fmt == "ascii":
            body = fh.read().decode("ascii", errors="replace").splitlines()
            return _ply_ascii_body(body, elements, header_lines, path)
        offset = fh.tell()
        data = fh.read()
    return _ply_binary_body(data, offset, elements, path)


def _ply_assemble(columns, faces, path):
    try:
        v = np.stack([columns["x"], columns["y"], columns["z"]], axis=1).astype(np.float64)
    except KeyError as exc:
        raise MeshParseError(f"vertex element lacks property {exc}", path) from None
    return TriMesh(v, np.array(faces, dtype=np.int64).reshape(-1, 3))


def _ply_ascii_body(lines, elements, header_lines, path):
    pos = 0
    columns: dict[str, np.ndarray] = {}
    faces: list = []
    for el in elements:
        for row in range(el["count"]):
            lineno = header_lines + pos + 1
            if pos >= len(lines):
                raise MeshParseError("unexpected end of file", path, line=lineno)
            toks = lines[pos].split()
            pos += 1
            k = 0
            for kind, name, t1, t2 in el["props"]:
                try:
                    if kind == "scalar":
                        val = float(toks[k])
                        k += 1
                        if el["name"] == "vertex":
                            columns.setdefault(name, np.empty(el["count"]))[row] = val
                    else:
                        cnt = int(toks[k])
                        items = [int(t) for t in toks[k + 1:k + 1 + cnt]]
                        if len(items) != cnt:
                            raise IndexError
                        k += 1 + cnt
                        if el["name"] == "face" and name in ("vertex_indices", "vertex_index"):
                            if cnt != 3:
                                raise UnsupportedTopologyError(
                                    f"face with {cnt} vertices; only triangles are supported",
                                    path, line=lineno)
                            faces.append(items)
                except (IndexError, ValueError):
                    raise MeshParseError(f"malformed {el['name']} record", path, line=lineno) from None
    return _ply_assemble(columns, faces, path)


def _ply_binary_body(data: bytes, offset: int, elements, path):
    pos = 0
    columns: dict[str, np.ndarray] = {}
    faces = None
    for el in elements:
        props = el["props"]
        if all(kind == "scalar" for kind, *_ in props):
            dt = np.dtype([(name, "<" + _PLY_TYPES[t]) for _, name, t, _ in props])
            nbytes = dt.itemsize * el["count"]
            if pos + nbytes > len(data):
                raise MeshParseError(f"truncated {el['name']} block", path, offset=offset + pos)
            arr = np.frombuffer(data, dtype=dt, count=el["count"], offset=pos)
            pos += nbytes
            if el["name"] == "vertex":
                for _, name, _, _ in props:
                    columns[name] = arr[name].astype(np.float64)
            continue
        rows = []
        for _ in range(el["count"]):
            items = None
            for kind, name, t1, t2 in props:
                if kind == "scalar":
                    size = np.dtype(_PLY_TYPES[t1]).itemsize
                    if pos + size > len(data):
                        raise MeshParseError("truncated record", path, offset=offset + pos)
                    pos += size
                    continue
                csize = np.dtype(_PLY_TYPES[t1]).itemsize
                if pos + csize > len(data):
                    raise MeshParseError("truncated list count", path, offset=offset + pos)
                cnt = int(np.frombuffer(data, "<" + _PLY_TYPES[t1], 1, pos)[0])
                start = pos
                pos += csize
                isize = np.dtype(_PLY_TYPES[t2]).itemsize
                if pos + cnt * isize > len(data):
                    raise MeshParseError("truncated list", path, offset=offset + pos)
                vals = np.frombuffer(data, "<" + _PLY_TYPES[t2], cnt, pos)
                pos += cnt * isize
                if el["name"] == "face" and name in ("vertex_indices", "vertex_index"):
                    if cnt != 3:
                        raise UnsupportedTopologyError(
                            f"face with {cnt} vertices; only triangles are supported",
                            path, offset=offset + start)
                    items = vals.astype(np.int64)
            if items is not None:
                rows.append(items)
        if el["name"] == "face":
            faces = rows
    return _ply_assemble(columns, faces or [], path)


def write_mesh(path, mesh: TriMesh, format: str | None = None,
               vertex_scalars: Mapping[str, np.ndarray] | None = None) -> None:
    """Write OBJ or PLY. Coordinates round-trip exactly through every format.

    ``vertex_scalars`` adds named per-vertex float properties (PLY only).
    """
    fmt = format
    if fmt is None:
        ext = os.path.splitext(str(path))[1].lower()
        fmt = "obj" if ext == ".obj" else "ply-binary-little-endian"
    if fmt == "obj":
        if vertex_scalars:
            raise ValueError("per-vertex scalars need a PLY target")
        with open(path, "w", encoding="utf-8") as fh:
            fh.writelines(f"v {x!r} {y!r} {z!r}\n" for x, y, z in mesh.vertices.tolist())
            fh.writelines(f"f {a + 1} {b + 1} {c + 1}\n" for a, b, c in mesh.faces.tolist())
        return
    write_ply(path, mesh.vertices, mesh.faces, vertex_scalars,
              binary=(fmt != "ply-ascii"))


def write_ply(path, vertices, faces=None, vertex_scalars=None, binary=True) -> None:
    vertices = np.asarray(vertices, dtype=np.float64)
    faces = np.zeros((0, 3), dtype=np.int64) if faces is None else np.asarray(faces)
    scalars = {k: np.asarray(v, dtype=np.float64) for k, v in (vertex_scalars or {}).items()}
    for name, arr in scalars.items():
        if arr.shape != (len(vertices),):
            raise ValueError(f"scalar {name!r} must have one value per vertex")
    header = ["ply", f"format {'binary_little_endian' if binary else 'ascii'} 1.0",
              f"element vertex {len(vertices)}",
              "property double x", "property double y", "property double z"]
    header += [f"property double {name}" for name in scalars]
    if len(faces):
        header += [f"element face {len(faces)}", "property list uchar int vertex_indices"]
    header.append("end_header")
    with open(path, "wb") as fh:
        fh.write(("\n".join(header) + "\n").encode("ascii"))
        cols = [vertices[:, 0], vertices[:, 1], vertices[:, 2], *scalars.values()]
        if binary:
            dt = np.dtype([(f"c{i}", "<f8") for i in range(len(cols))])
            rec = np.empty(len(vertices), dtype=dt)
            for i, c in enumerate(cols):
                rec[f"c{i}"] = c
            fh.write(rec.tobytes())
            if len(faces):
                fdt = np.dtype([("n", "u1"), ("i", "<i4", 3)])
                frec = np.empty(len(faces), dtype=fdt)
                frec["n"] = 3
                frec["i"] = faces
                fh.write(frec.tobytes())
        else:
            table = np.stack(cols, axis=1).tolist()
            fh.write("".join(" ".join(repr(x) for x in row) + "\n" for row in table).encode("ascii"))
            fh.write("".join(f"3 {a} {b} {c}\n" for a, b, c in faces.tolist()).encode("ascii"))


def read_ply_scalars(path) -> dict[str, np.ndarray]:
    """All vertex properties of a PLY file (including x, y, z) by name."""
    with open(path, "rb") as fh:
        fmt, elements, header_lines = _read_ply_header(fh, path)
        vertex = next(el for el in elements if el["name"] == "vertex")
        names = [name for _, name, _, _ in vertex["props"]]
        if fmt == "ascii":
            rows = fh.read().decode("ascii").splitlines()[: vertex["count"]]
            table = np.array([[float(t) for t in r.split()[: len(names)]] for r in rows])
            return {n: table[:, i] for i, n in enumerate(names)}
        dt = np.dtype([(name, "<" + _PLY_TYPES[t]) for _, name, t, _ in vertex["props"]])
        arr = np.frombuffer(fh.read(dt.itemsize * vertex["count"]), dtype=dt)
        return {n: arr[n].astype(np.float64) for n in names}


def read_point_cloud(path) -> PointCloud:
    """Point cloud from a PLY (optionally with nx, ny, nz) or a whitespace xyz table."""
    ext = os.path.splitext(str(path))[1].lower()
    if ext == ".ply":
        cols = read_ply_scalars(path)
        pts = np.stack([cols["x"], cols["y"], cols["z"]], axis=1)
        normals = None
        if all(k in cols for k in ("nx", "ny", "nz")):
            normals = np.stack([cols["nx"], cols["ny"], cols["nz"]], axis=1)
            normals /= np.linalg.norm(normals, axis=1, keepdims=True)
        return PointCloud(pts, normals)
    table = np.loadtxt(path, ndmin=2)
    normals = None
    if table.shape[1] >= 6:
        normals = table[:, 3:6] / np.linalg.norm(table[:, 3:6], axis=1, keepdims=True)
    return PointCloud(table[:, :3], normals)


# --------------------------------------------------------------------------- index files


def read_landmarks(path) -> dict[str, int]:
    """Landmark file: one ``label vertex_index`` pair per line."""
    out: dict[str, int] = {}
    with open(path, encoding="utf-8") as fh:
        for lineno, raw in enumerate(fh, start=1):
            line = raw.split("#", 1)[0].strip()
            if not line:
                continue
            parts = line.split()
            if len(parts) != 2:
                raise MeshParseError("expected 'label vertex_index'", path, line=lineno)
            try:
                out[parts[0]] = int(parts[1])
            except ValueError:
                raise MeshParseError(f"bad vertex index {parts[1]!r}", path, line=lineno) from None
    return out


def write_landmarks(path, landmarks: Mapping[str, int]) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        fh.writelines(f"{label} {int(idx)}\n" for label, idx in landmarks.items())


def read_point_landmarks(path, mesh: TriMesh | None = None) -> dict[str, np.ndarray]:
    """Annotated raw-scan landmarks: ``label x y z`` or ``label vertex_index`` (needs mesh)."""
    out: dict[str, np.ndarray] = {}
    with open(path, encoding="utf-8") as fh:
        for lineno, raw in enumerate(fh, start=1):
            line = raw.split("#", 1)[0].strip()
            if not line:
                continue
            parts = line.split()
            if len(parts) == 4:
                out[parts[0]] = np.array([float(x) for x in parts[1:]])
            elif len(parts) == 2 and mesh is not None:
                out[parts[0]] = mesh.vertices[int(parts[1])].copy()
            else:
                raise MeshParseError("expected 'label x y z' or 'label vertex_index'", path, line=lineno)
    return out


def read_index_set(path) -> np.ndarray:
    """Whitespace-separated vertex indices (one or more per line)."""
    with open(path, encoding="utf-8") as fh:
        toks = [t for raw in fh for t in raw.split("#", 1)[0].split()]
    return np.array(sorted({int(t) for t in toks}), dtype=np.int64)


def write_index_set(path, indices) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        fh.writelines(f"{int(i)}\n" for i in np.asarray(indices).ravel())


"""Triangle meshes: the container type, load-time cleaning and file I/O."""

from __future__ import annotations

import os
from dataclasses import dataclass
from functools import cached_property

import numpy as np
from scipy import sparse
from scipy.spatial import cKDTree

from ..errors import EmptyMesh, ParseError

MERGE_TOL = 1e-9
AREA_TOL = 1e-12


def _readonly(a):
    a.setflags(write=False)
    return a


@dataclass(frozen=True, eq=False)
class Mesh:
    """Indexed triangle surface.

    ``vertices`` is ``(V, 3)`` float64 and ``triangles`` is ``(T, 3)`` int64.
    Both arrays are made read-only; derived data (areas, the edge graph) is
    computed lazily and cached on the instance.
    """

    vertices: np.ndarray
    triangles: np.ndarray

    def __post_init__(self):
        v = np.array(self.vertices, dtype=np.float64).reshape(-1, 3)
        t = np.array(self.triangles, dtype=np.int64).reshape(-1, 3)
        if not np.all(np.isfinite(v)):
            raise ValueError("mesh vertices must be finite")
        if t.size and (t.min() < 0 or t.max() >= len(v)):
            raise ValueError("triangle index out of range")
        object.__setattr__(self, "vertices", _readonly(v))
        object.__setattr__(self, "triangles", _readonly(t))

    @property
    def n_vertices(self) -> int:
        return len(self.vertices)

    @property
    def n_triangles(self) -> int:
        return len(self.triangles)

    @cached_property
    def corners(self) -> np.ndarray:
        """``(T, 3, 3)`` triangle corner coordinates."""
        return _readonly(self.vertices[self.triangles])

    @cached_property
    def triangle_areas(self) -> np.ndarray:
        return _readonly(triangle_areas(self.vertices, self.triangles))

    @property
    def area(self) -> float:
        return float(self.triangle_areas.sum())

    @cached_property
    def edges(self) -> np.ndarray:
        """Unique undirected edges as ``(E, 2)`` with ``i < j``."""
        t = self.triangles
        e = np.concatenate([t[:, [0, 1]], t[:, [1, 2]], t[:, [2, 0]]])
        e.sort(axis=1)
        return _readonly(np.unique(e, axis=0))

    @cached_property
    def adjacency(self) -> sparse.csr_matrix:
        """Symmetric sparse vertex graph weighted by Euclidean edge length."""
        e = self.edges
        w = np.linalg.norm(self.vertices[e[:, 0]] - self.vertices[e[:, 1]], axis=1)
        n = self.n_vertices
        rows = np.concatenate([e[:, 0], e[:, 1]])
        cols = np.concatenate([e[:, 1], e[:, 0]])
        return sparse.csr_matrix((np.concatenate([w, w]), (rows, cols)), shape=(n, n))

    def bbox_diagonal(self) -> float:
        if self.n_vertices == 0:
            return 0.0
        return float(np.linalg.norm(self.vertices.max(0) - self.vertices.min(0)))

    def transformed(self, rotation=None, translation=None, scale=1.0) -> "Mesh":
        """Return ``scale * R v + t`` applied to every vertex."""
        v = self.vertices * scale
        if rotation is not None:
            v = v @ np.asarray(rotation).T
        if translation is not None:
            v = v + np.asarray(translation)
        return Mesh(v, self.triangles)

    def submesh(self, triangle_mask) -> "Mesh":
        """Mesh made of the selected triangles, unreferenced vertices dropped."""
        tris = self.triangles[np.asarray(triangle_mask)]
        used, inverse = np.unique(tris, return_inverse=True)
        return Mesh(self.vertices[used], inverse.reshape(-1, 3))


def triangle_areas(vertices, triangles) -> np.ndarray:
    c = vertices[triangles]
    return 0.5 * np.linalg.norm(np.cross(c[:, 1] - c[:, 0], c[:, 2] - c[:, 0]), axis=1)


def clean_mesh(vertices, triangles, merge_tol=MERGE_TOL, area_tol=AREA_TOL) -> Mesh:
    """Merge near-duplicate vertices, drop degenerate and unreferenced data.

    Raises ``EmptyMesh`` when no triangle survives.
    """
    v = np.asarray(vertices, dtype=np.float64).reshape(-1, 3)
    t = np.asarray(triangles, dtype=np.int64).reshape(-1, 3)

    if len(v):
        parent = np.arange(len(v))
        pairs = cKDTree(v).query_pairs(merge_tol, output_type="ndarray")

        def find(i):
            while parent[i] != i:
                parent[i] = parent[parent[i]]
                i = parent[i]
            return i

        for a, b in pairs:
            ra, rb = find(a), find(b)
            if ra != rb:
                parent[max(ra, rb)] = min(ra, rb)
        rep = np.array([find(i) for i in range(len(v))], dtype=np.int64)
        t = rep[t]

    distinct = (t[:, 0] != t[:, 1]) & (t[:, 1] != t[:, 2]) & (t[:, 0] != t[:, 2])
    t = t[distinct]
    if len(t):
        t = t[triangle_areas(v, t) > area_tol]
    if len(t) == 0:
        raise EmptyMesh("mesh has no triangles after cleaning")
    used, inverse = np.unique(t, return_inverse=True)
    return Mesh(v[used], inverse.reshape(-1, 3))


def _fan(poly):
    return [(poly[0], poly[i], poly[i + 1]) for i in range(1, len(poly) - 1)]


# --------------------------------------------------------------------------- OFF


def _parse_off(path, text):
    lines = []
    for lineno, raw in enumerate(text.splitlines(), start=1):
        s = raw.split("#", 1)[0].strip()
        if s:
            lines.append((lineno, s.split()))
    if not lines:
        raise ParseError("empty file", path=path)

    lineno, head = lines[0]
    if not head[0].upper().endswith("OFF"):
        raise ParseError("missing OFF header", path=path, line=lineno)
    rest = head[1:]
    cursor = 1
    if not rest:
        if len(lines) < 2:
            raise ParseError("missing element counts", path=path, line=lineno)
        lineno, rest = lines[1]
        cursor = 2
    try:
        nv, nf = int(rest[0]), int(rest[1])
    except (ValueError, IndexError):
        raise ParseError("bad element counts", path=path, line=lineno) from None
    if len(lines) < cursor + nv + nf:
        raise ParseError("file truncated", path=path, line=lines[-1][0])

    verts = np.empty((nv, 3))
    for i in range(nv):
        lineno, tok = lines[cursor + i]
        try:
            verts[i] = [float(x) for x in tok[:3]]
        except ValueError:
            raise ParseError("bad vertex coordinate", path=path, line=lineno) from None
        if len(tok) < 3:
            raise ParseError("vertex needs 3 coordinates", path=path, line=lineno)
    cursor += nv

    tris = []
    for i in range(nf):
        lineno, tok = lines[cursor + i]
        try:
            k = int(tok[0])
            poly = [int(x) for x in tok[1 : 1 + k]]
        except ValueError:
            raise ParseError("bad face record", path=path, line=lineno) from None
        if len(poly) != k or k < 3:
            raise ParseError("bad face record", path=path, line=lineno)
        if min(poly) < 0 or max(poly) >= nv:
            raise ParseError(
                f"face index out of range (vertex count {nv})", path=path, line=lineno
            )
        tris.extend(_fan(poly))
    return verts, np.array(tris, dtype=np.int64).reshape(-1, 3)


# --------------------------------------------------------------------------- PLY

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


def _ply_type(name, path, lineno):
    try:
        return _PLY_TYPES[name]
    except KeyError:
        raise ParseError(f"unknown PLY type {name!r}", path=path, line=lineno) from None


def _parse_ply_header(path, data):
    end = data.find(b"end_header")
    if not data.startswith(b"ply") or end < 0:
        raise ParseError("missing PLY header", path=path, offset=0)
    nl = data.find(b"\n", end)
    body_start = len(data) if nl < 0 else nl + 1
    header = data[:end].decode("ascii", errors="replace").splitlines()

    fmt = None
    elements = []
    for lineno, line in enumerate(header, start=1):
        tok = line.split()
        if not tok or tok[0] in ("ply", "comment", "obj_info"):
            continue
        if tok[0] == "format":
            fmt = tok[1]
        elif tok[0] == "element":
            elements.append({"name": tok[1], "count": int(tok[2]), "props": []})
        elif tok[0] == "property":
            if not elements:
                raise ParseError("property before element", path=path, line=lineno)
            if tok[1] == "list":
                elements[-1]["props"].append(
                    (tok[4], _ply_type(tok[2], path, lineno), _ply_type(tok[3], path, lineno))
                )
            else:
                elements[-1]["props"].append((tok[2], _ply_type(tok[1], path, lineno), None))
        else:
            raise ParseError(f"unexpected header keyword {tok[0]!r}", path=path, line=lineno)
    if fmt not in ("ascii", "binary_little_endian"):
        raise ParseError(f"unsupported PLY format {fmt!r}", path=path)
    return fmt, elements, body_start


def _read_binary_element(path, data, pos, el):
    props = el["props"]
    n = el["count"]
    if all(p[2] is None for p in props):
        dt = np.dtype([(p[0], "<" + p[1]) for p in props])
        size = dt.itemsize * n
        if pos + size > len(data):
            raise ParseError("binary body truncated", path=path, offset=pos)
        arr = np.frombuffer(data, dtype=dt, count=n, offset=pos)
        return {p[0]: arr[p[0]] for p in props}, pos + size

    out = {p[0]: [] for p in props}
    for _ in range(n):
        for name, t, item in props:
            if item is None:
                dt = np.dtype("<" + t)
                if pos + dt.itemsize > len(data):
                    raise ParseError("binary body truncated", path=path, offset=pos)
                out[name].append(np.frombuffer(data, dt, 1, pos)[0])
                pos += dt.itemsize
            else:
                ct, it = np.dtype("<" + t), np.dtype("<" + item)
                if pos + ct.itemsize > len(data):
                    raise ParseError("binary body truncated", path=path, offset=pos)
                k = int(np.frombuffer(data, ct, 1, pos)[0])
                pos += ct.itemsize
                if pos + k * it.itemsize > len(data):
                    raise ParseError("binary body truncated", path=path, offset=pos)
                out[name].append(np.frombuffer(data, it, k, pos).astype(np.int64))
                pos += k * it.itemsize
    return out, pos


def _read_ascii_elements(path, data, body_start, elements):
    lines = data[body_start:].decode("ascii", errors="replace").splitlines()
    header_lines = data[:body_start].count(b"\n")
    cursor = 0
    result = {}
    for el in elements:
        out = {p[0]: [] for p in el["props"]}
        for _ in range(el["count"]):
            while cursor < len(lines) and not lines[cursor].strip():
                cursor += 1
            if cursor >= len(lines):
                raise ParseError("ASCII body truncated", path=path, line=header_lines + cursor + 1)
            lineno = header_lines + cursor + 1
            tok = lines[cursor].split()
            cursor += 1
            j = 0
            try:
                for name, t, item in el["props"]:
                    if item is None:
                        out[name].append(float(tok[j]))
                        j += 1
                    else:
                        k = int(tok[j])
                        out[name].append(np.array([int(x) for x in tok[j + 1 : j + 1 + k]]))
                        if len(out[name][-1]) != k:
                            raise IndexError
                        j += 1 + k
            except (ValueError, IndexError):
                raise ParseError(f"bad {el['name']} record", path=path, line=lineno) from None
        result[el["name"]] = out
    return result


def _parse_ply(path, data):
    fmt, elements, body_start = _parse_ply_header(path, data)
    if fmt == "ascii":
        parsed = _read_ascii_elements(path, data, body_start, elements)
    else:
        parsed, pos = {}, body_start
        for el in elements:
            parsed[el["name"]], pos = _read_binary_element(path, data, pos, el)

    vert = parsed.get("vertex")
    if vert is None or not all(k in vert for k in "xyz"):
        raise ParseError("PLY has no vertex x/y/z", path=path)
    verts = np.column_stack([np.asarray(vert[k], dtype=np.float64) for k in "xyz"])
    faces = parsed.get("face", {})
    key = next((k for k in ("vertex_indices", "vertex_index") if k in faces), None)
    tris = []
    if key is not None:
        for i, poly in enumerate(faces[key]):
            poly = [int(x) for x in poly]
            if len(poly) < 3:
                raise ParseError(f"face {i} has fewer than 3 vertices", path=path)
            if min(poly) < 0 or max(poly) >= len(verts):
                raise ParseError(
                    f"face {i} index out of range (vertex count {len(verts)})", path=path
                )
            tris.extend(_fan(poly))
    return verts, np.array(tris, dtype=np.int64).reshape(-1, 3)


def _read_raw(path):
    ext = os.path.splitext(str(path))[1].lower()
    with open(path, "rb") as fh:
        data = fh.read()
    if ext == ".off" or data.lstrip().upper().startswith(b"OFF"):
        return _parse_off(path, data.decode("ascii", errors="replace"))
    if ext == ".ply" or data.startswith(b"ply"):
        return _parse_ply(path, data)
    raise ParseError("unrecognised mesh format (expected OFF or PLY)", path=path)


def load_mesh(path) -> Mesh:
    """Read an OFF or PLY mesh and clean it (see :func:`clean_mesh`)."""
    verts, tris = _read_raw(path)
    return clean_mesh(verts, tris)


def load_points(path) -> np.ndarray:
    """Read a point cloud from XYZ, PLY or OFF (vertices only)."""
    ext = os.path.splitext(str(path))[1].lower()
    if ext in (".ply", ".off"):
        verts, _ = _read_raw(path)
        pts = verts
    else:
        try:
            pts = np.loadtxt(path, dtype=np.float64, ndmin=2)[:, :3]
        except ValueError as exc:
            raise ParseError(str(exc), path=path) from None
    if pts.shape[1] != 3 or not np.all(np.isfinite(pts)):
        raise ParseError("point coordinates must be finite 3-vectors", path=path)
    return pts


def save_points_xyz(path, points):
    np.savetxt(path, np.asarray(points, dtype=np.float64).reshape(-1, 3), fmt="%.9g")


def save_points_ply(path, points):
    pts = np.asarray(points, dtype=np.float64).reshape(-1, 3)
    with open(path, "w", newline="\n") as fh:
        fh.write(
            "ply\nformat ascii 1.0\n"
            f"element vertex {len(pts)}\n"
            "property float x\nproperty float y\nproperty float z\nend_header\n"
        )
        for p in pts:
            fh.write(f"{p[0]:.9g} {p[1]:.9g} {p[2]:.9g}\n")


def save_points(path, points):
    if str(path).lower().endswith(".ply"):
        save_points_ply(path, points)
    else:
        save_points_xyz(path, points)


def save_mesh_off(path, mesh: Mesh):
    with open(path, "w", newline="\n") as fh:
        fh.write(f"OFF\n{mesh.n_vertices} {mesh.n_triangles} 0\n")
        for v in mesh.vertices:
            fh.write(f"{v[0]:.17g} {v[1]:.17g} {v[2]:.17g}\n")
        for t in mesh.triangles:
            fh.write(f"3 {t[0]} {t[1]} {t[2]}\n")


def icosphere(subdivisions=3, radius=1.0) -> Mesh:
    """Unit icosahedron refined by midpoint subdivision and projected to a sphere."""
    phi = (1 + 5**0.5) / 2
    v = np.array(
        [
            [-1, phi, 0], [1, phi, 0], [-1, -phi, 0], [1, -phi, 0],
            [0, -1, phi], [0, 1, phi], [0, -1, -phi], [0, 1, -phi],
            [phi, 0, -1], [phi, 0, 1], [-phi, 0, -1], [-phi, 0, 1],
        ],
        dtype=np.float64,
    )
    f = np.array(
        [
            [0, 11, 5], [0, 5, 1], [0, 1, 7], [0, 7, 10], [0, 10, 11],
            [1, 5, 9], [5, 11, 4], [11, 10, 2], [10, 7, 6], [7, 1, 8],
            [3, 9, 4], [3, 4, 2], [3, 2, 6], [3, 6, 8], [3, 8, 9],
            [4, 9, 5], [2, 4, 11], [6, 2, 10], [8, 6, 7], [9, 8, 1],
        ],
        dtype=np.int64,
    )
    v /= np.linalg.norm(v, axis=1, keepdims=True)
    for _ in range(subdivisions):
        cache = {}
        verts = list(v)

        def mid(a, b):
            key = (a, b) if a < b else (b, a)
            if key not in cache:
                m = verts[a] + verts[b]
                verts.append(m / np.linalg.norm(m))
                cache[key] = len(verts) - 1
            return cache[key]

        nf = []
        for a, b, c in f:
            ab, bc, ca = mid(a, b), mid(b, c), mid(c, a)
            nf += [[a, ab, ca], [b, bc, ab], [c, ca, bc], [ab, bc, ca]]
        v, f = np.array(verts), np.array(nf, dtype=np.int64)
    return Mesh(v * radius, f)

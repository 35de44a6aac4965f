"""Triangle-mesh data model, OFF / ASCII-PLY ingestion, and elementary geometry.

Meshes are immutable once constructed. Only two text formats are parsed
natively (OFF and ASCII PLY); binary PLY is rejected so that file round
trips stay bit-exact and testable. Vertex order is preserved exactly as
written in the file.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import MeshError

__all__ = [
    "TriMesh",
    "MeshMetrics",
    "load_mesh",
    "save_mesh",
    "compute_metrics",
    "normalize_to_unit_area",
]


class TriMesh:
    """Vertices (N, 3) and faces (F, 3) with basic validity guarantees.

    Invariants enforced at construction: every face index in range, no face
    with a repeated index, at least 3 vertices and 1 face. Arrays are
    write-protected; derived objects may safely share them.
    """

    def __init__(self, vertices, faces):
        vertices = np.ascontiguousarray(vertices, dtype=np.float64)
        faces = np.ascontiguousarray(faces, dtype=np.int64)
        if vertices.ndim != 2 or vertices.shape[1] != 3:
            raise MeshError(f"vertices must be (N, 3), got {vertices.shape}")
        if faces.ndim != 2 or faces.shape[1] != 3:
            raise MeshError(f"faces must be (F, 3), got {faces.shape}")
        if vertices.shape[0] < 3:
            raise MeshError(f"mesh needs >= 3 vertices, got {vertices.shape[0]}")
        if faces.shape[0] < 1:
            raise MeshError("mesh needs >= 1 face")
        if faces.size and (faces.min() < 0 or faces.max() >= vertices.shape[0]):
            bad = int(np.flatnonzero((faces < 0) | (faces >= vertices.shape[0]))[0] // 3)
            raise MeshError(f"face {bad} references a vertex outside [0, {vertices.shape[0]})")
        degen = (faces[:, 0] == faces[:, 1]) | (faces[:, 1] == faces[:, 2]) | (faces[:, 0] == faces[:, 2])
        if degen.any():
            raise MeshError(f"face {int(np.flatnonzero(degen)[0])} repeats a vertex index")
        vertices.flags.writeable = False
        faces.flags.writeable = False
        self.vertices = vertices
        self.faces = faces

    @property
    def n_vertices(self) -> int:
        return self.vertices.shape[0]

    @property
    def n_faces(self) -> int:
        return self.faces.shape[0]

    def __repr__(self):
        return f"TriMesh(n_vertices={self.n_vertices}, n_faces={self.n_faces})"


@dataclass(frozen=True)
class MeshMetrics:
    face_areas: np.ndarray      # (F,)
    total_area: float
    vertex_normals: np.ndarray  # (N, 3), unit where defined, zero rows for isolated vertices
    is_closed: bool             # True iff every edge borders exactly two faces


def _tokens(path):
    """Yield (line_number, token_list) for non-blank, non-comment lines."""
    with open(path, "r") as fh:
        for lineno, line in enumerate(fh, start=1):
            stripped = line.split("#", 1)[0].strip()
            if stripped:
                yield lineno, stripped.split()


def _parse_off(path):
    stream = _tokens(path)
    try:
        lineno, words = next(stream)
    except StopIteration:
        raise MeshError("empty file", path=path, line=1) from None
    if words[0].upper() != "OFF":
        raise MeshError(f"expected OFF header, got {words[0]!r}", path=path, line=lineno)
    # counts either appended to the header line or on the next line
    if len(words) == 4:
        counts = words[1:]
    else:
        try:
            lineno, counts = next(stream)
        except StopIteration:
            raise MeshError("missing counts line", path=path, line=lineno) from None
    try:
        nv, nf = int(counts[0]), int(counts[1])
    except (ValueError, IndexError):
        raise MeshError(f"malformed counts line {counts!r}", path=path, line=lineno) from None

    vertices = np.empty((nv, 3), dtype=np.float64)
    for i in range(nv):
        try:
            lineno, words = next(stream)
        except StopIteration:
            raise MeshError(f"expected {nv} vertices, file ended after {i}", path=path, line=lineno) from None
        try:
            vertices[i] = [float(words[0]), float(words[1]), float(words[2])]
        except (ValueError, IndexError):
            raise MeshError(f"malformed vertex line {' '.join(words)!r}", path=path, line=lineno) from None

    faces = np.empty((nf, 3), dtype=np.int64)
    for i in range(nf):
        try:
            lineno, words = next(stream)
        except StopIteration:
            raise MeshError(f"expected {nf} faces, file ended after {i}", path=path, line=lineno) from None
        try:
            count = int(words[0])
        except ValueError:
            raise MeshError(f"malformed face line {' '.join(words)!r}", path=path, line=lineno) from None
        if count != 3:
            raise MeshError(f"only triangle faces supported, got {count}-gon", path=path, line=lineno)
        try:
            faces[i] = [int(words[1]), int(words[2]), int(words[3])]
        except (ValueError, IndexError):
            raise MeshError(f"malformed face line {' '.join(words)!r}", path=path, line=lineno) from None
        if faces[i, 0] < 0 or faces[i, 1] < 0 or faces[i, 2] < 0 or faces[i].max() >= nv:
            raise MeshError(f"face index out of range in {' '.join(words)!r}", path=path, line=lineno)
        if len(set(faces[i])) != 3:
            raise MeshError(f"degenerate face (repeated index) in {' '.join(words)!r}", path=path, line=lineno)
    return vertices, faces


def _parse_ply(path):
    with open(path, "r", errors="replace") as fh:
        lines = fh.readlines()

    def err(msg, lineno):
        raise MeshError(msg, path=path, line=lineno)

    if not lines or lines[0].strip() != "ply":
        err("expected 'ply' magic on line 1", 1)

    # header: collect per-element property layouts so unknown properties can be skipped
    nv = nf = None
    elements = []  # (name, count, [property names]) in declaration order
    props = None
    body_start = None
    for idx, raw in enumerate(lines[1:], start=2):
        words = raw.strip().split()
        if not words:
            continue
        kw = words[0]
        if kw == "comment":
            continue
        if kw == "format":
            if len(words) < 2 or words[1] != "ascii":
                err(f"only ASCII PLY is supported, got format {' '.join(words[1:])!r}", idx)
        elif kw == "element":
            props = []
            elements.append((words[1], int(words[2]), props))
            if words[1] == "vertex":
                nv = int(words[2])
            elif words[1] == "face":
                nf = int(words[2])
        elif kw == "property":
            if props is None:
                err("property before any element", idx)
            if words[1] == "list":
                props.append(("list", words[4]))
            else:
                props.append((words[1], words[2]))
        elif kw == "end_header":
            body_start = idx
            break
        else:
            err(f"unknown header keyword {kw!r}", idx)
    if body_start is None:
        err("missing end_header", len(lines))
    if nv is None:
        err("missing 'element vertex'", body_start)
    if nf is None:
        err("missing 'element face'", body_start)

    vertices = np.empty((nv, 3), dtype=np.float64)
    faces = np.empty((nf, 3), dtype=np.int64)
    lineno = body_start  # last consumed header line (1-based)
    cursor = body_start  # index into `lines` of the next body line
    for name, count, elem_props in elements:
        if name == "vertex":
            coord_cols = {}
            for col, (_ptype, pname) in enumerate(elem_props):
                if pname in ("x", "y", "z"):
                    coord_cols[pname] = col
            if sorted(coord_cols) != ["x", "y", "z"]:
                err("vertex element must declare x, y, z properties", body_start)
        for i in range(count):
            while cursor < len(lines) and not lines[cursor].strip():
                cursor += 1
            if cursor >= len(lines):
                err(f"file ended inside element {name!r} ({i} of {count} read)", len(lines))
            lineno = cursor + 1
            words = lines[cursor].split()
            cursor += 1
            if name == "vertex":
                try:
                    vertices[i] = [float(words[coord_cols[c]]) for c in ("x", "y", "z")]
                except (ValueError, IndexError):
                    err(f"malformed vertex line {lines[cursor - 1].strip()!r}", lineno)
            elif name == "face":
                try:
                    cnt = int(words[0])
                except (ValueError, IndexError):
                    err(f"malformed face line {lines[cursor - 1].strip()!r}", lineno)
                if cnt != 3:
                    err(f"only triangle faces supported, got {cnt}-gon", lineno)
                try:
                    faces[i] = [int(words[1]), int(words[2]), int(words[3])]
                except (ValueError, IndexError):
                    err(f"malformed face line {lines[cursor - 1].strip()!r}", lineno)
                if faces[i].min() < 0 or faces[i].max() >= nv:
                    err("face index out of range", lineno)
                if len(set(faces[i])) != 3:
                    err("degenerate face (repeated index)", lineno)
            # other elements (e.g. edge) are skipped line by line
    return vertices, faces


def _sniff_binary_ply(path):
    with open(path, "rb") as fh:
        head = fh.read(256)
    return b"binary_little_endian" in head or b"binary_big_endian" in head


def load_mesh(path, format: str | None = None) -> TriMesh:
    """Load a triangle mesh from an OFF or ASCII-PLY file.

    ``format`` is ``"off"`` or ``"ply"``; inferred from the extension when
    omitted. Raises :class:`MeshError` with the offending line number on
    parse or validation failure.
    """
    path = str(path)
    if format is None:
        lower = path.lower()
        if lower.endswith(".off"):
            format = "off"
        elif lower.endswith(".ply"):
            format = "ply"
        else:
            raise MeshError("cannot infer format from extension; pass format='off' or 'ply'", path=path)
    format = format.lower()
    if format == "off":
        vertices, faces = _parse_off(path)
    elif format == "ply":
        if _sniff_binary_ply(path):
            raise MeshError("binary PLY is not supported; convert to ASCII PLY or OFF", path=path)
        vertices, faces = _parse_ply(path)
    else:
        raise MeshError(f"unknown format {format!r} (supported: off, ply)", path=path)
    try:
        return TriMesh(vertices, faces)
    except MeshError as exc:
        raise MeshError(f"{exc}", path=path) from None


def save_mesh(mesh: TriMesh, path, format: str | None = None) -> None:
    """Write a mesh as OFF or ASCII PLY at full float64 precision (%.17g).

    A save/load round trip reproduces vertices bit-exactly.
    """
    path = str(path)
    if format is None:
        format = "off" if path.lower().endswith(".off") else "ply" if path.lower().endswith(".ply") else None
        if format is None:
            raise MeshError("cannot infer format from extension; pass format='off' or 'ply'", path=path)
    with open(path, "w") as fh:
        if format == "off":
            fh.write("OFF\n")
            fh.write(f"{mesh.n_vertices} {mesh.n_faces} 0\n")
            for v in mesh.vertices:
                fh.write(f"{v[0]:.17g} {v[1]:.17g} {v[2]:.17g}\n")
            for f in mesh.faces:
                fh.write(f"3 {f[0]} {f[1]} {f[2]}\n")
        elif format == "ply":
            fh.write("ply\nformat ascii 1.0\n")
            fh.write(f"element vertex {mesh.n_vertices}\n")
            fh.write("property double x\nproperty double y\nproperty double z\n")
            fh.write(f"element face {mesh.n_faces}\n")
            fh.write("property list uchar int vertex_indices\nend_header\n")
            for v in mesh.vertices:
                fh.write(f"{v[0]:.17g} {v[1]:.17g} {v[2]:.17g}\n")
            for f in mesh.faces:
                fh.write(f"3 {f[0]} {f[1]} {f[2]}\n")
        else:
            raise MeshError(f"unknown format {format!r} (supported: off, ply)", path=path)


def face_cross_products(mesh: TriMesh) -> np.ndarray:
    """(v1 - v0) x (v2 - v0) per face; the norm is twice the face area."""
    v = mesh.vertices
    f = mesh.faces
    return np.cross(v[f[:, 1]] - v[f[:, 0]], v[f[:, 2]] - v[f[:, 0]])


def compute_metrics(mesh: TriMesh) -> MeshMetrics:
    """Per-face areas, total area, vertex normals, and boundary detection.

    Zero-area faces are permitted here; they are clamped later in the
    Laplacian. Vertex normals are area-weighted averages of incident face
    normals, unit length where the accumulated normal is nonzero.
    """
    raw = face_cross_products(mesh)
    face_areas = 0.5 * np.linalg.norm(raw, axis=1)
    total_area = float(face_areas.sum())

    vertex_normals = np.zeros((mesh.n_vertices, 3))
    for k in range(3):
        np.add.at(vertex_normals, mesh.faces[:, k], raw)
    norms = np.linalg.norm(vertex_normals, axis=1, keepdims=True)
    nonzero = norms[:, 0] > 0
    vertex_normals[nonzero] /= norms[nonzero]
    vertex_normals[~nonzero] = 0.0

    edges = np.sort(mesh.faces[:, [0, 1, 1, 2, 2, 0]].reshape(-1, 2), axis=1)
    _, counts = np.unique(edges, axis=0, return_counts=True)
    is_closed = bool(np.all(counts == 2))
    return MeshMetrics(face_areas=face_areas, total_area=total_area,
                       vertex_normals=vertex_normals, is_closed=is_closed)


def normalize_to_unit_area(mesh: TriMesh) -> TriMesh:
    """Uniformly rescale so total surface area is 1 (area scales with scale^2)."""
    total = compute_metrics(mesh).total_area
    if total <= 0.0:
        raise MeshError("cannot normalize a mesh with zero total area")
    return TriMesh(mesh.vertices / np.sqrt(total), mesh.faces)

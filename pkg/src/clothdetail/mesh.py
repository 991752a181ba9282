"""Triangle meshes with per-corner UVs, OBJ I/O, and frame differentials."""

from __future__ import annotations

import re
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import ConsistencyError, DataError, SequenceError, TopologyError


@dataclass
class GarmentMesh:
    """Triangle mesh with a UV chart per corner.

    vertices: (V, 3) float64 positions in meters.
    faces: (F, 3) int32 vertex indices.
    uv: (F, 3, 2) float64 per-corner coordinates in [0, 1]^2.
    body: optional closed mesh of the underlying character.
    """

    vertices: np.ndarray
    faces: np.ndarray
    uv: np.ndarray
    body: "GarmentMesh | None" = field(default=None, repr=False)

    @property
    def num_vertices(self) -> int:
        return len(self.vertices)

    @property
    def num_faces(self) -> int:
        return len(self.faces)

    def validate(self) -> None:
        v, f, uv = self.vertices, self.faces, self.uv
        if v.ndim != 2 or v.shape[1] != 3:
            raise DataError(f"vertices must be (V, 3), got {v.shape}")
        if f.ndim != 2 or f.shape[1] != 3:
            raise DataError(f"faces must be (F, 3), got {f.shape}")
        if uv.shape != (len(f), 3, 2):
            raise DataError(f"uv must be (F, 3, 2), got {uv.shape}")
        if len(f) and (f.min() < 0 or f.max() >= len(v)):
            raise DataError("face index out of range")
        if len(f) and (uv.min() < -1e-6 or uv.max() > 1 + 1e-6):
            raise DataError("uv coordinates must lie in the unit square")


def load_obj(path: Path | str) -> GarmentMesh:
    """Read a Wavefront OBJ with `vt` records and `f v/vt[/vn]` faces."""
    path = Path(path)
    if not path.exists():
        raise SequenceError(f"missing mesh file {path}")
    verts: list[list[float]] = []
    uvs: list[list[float]] = []
    faces: list[list[int]] = []
    face_uvs: list[list[int]] = []
    for lineno, line in enumerate(path.read_text().splitlines(), 1):
        parts = line.split()
        if not parts or parts[0].startswith("#"):
            continue
        tag = parts[0]
        if tag == "v":
            verts.append([float(x) for x in parts[1:4]])
        elif tag == "vt":
            uvs.append([float(x) for x in parts[1:3]])
        elif tag == "f":
            if len(parts) != 4:
                raise DataError(f"{path}:{lineno}: only triangle faces are supported")
            vi, ti = [], []
            for token in parts[1:]:
                fields = token.split("/")
                if len(fields) < 2 or not fields[1]:
                    raise DataError(f"{path}:{lineno}: face corner {token!r} has no UV index")
                vi.append(int(fields[0]) - 1)
                ti.append(int(fields[1]) - 1)
            faces.append(vi)
            face_uvs.append(ti)
    vertices = np.asarray(verts, dtype=np.float64).reshape(-1, 3)
    uv_table = np.asarray(uvs, dtype=np.float64).reshape(-1, 2)
    face_arr = np.asarray(faces, dtype=np.int32).reshape(-1, 3)
    uv_idx = np.asarray(face_uvs, dtype=np.int64).reshape(-1, 3)
    if len(uv_idx) and (uv_idx.min() < 0 or uv_idx.max() >= len(uv_table)):
        raise DataError(f"{path}: UV index out of range")
    uv = uv_table[uv_idx] if len(uv_idx) else np.zeros((0, 3, 2))
    mesh = GarmentMesh(vertices=vertices, faces=face_arr, uv=uv)
    mesh.validate()
    return mesh


def save_obj(mesh: GarmentMesh, path: Path | str) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    lines = []
    for v in mesh.vertices:
        lines.append(f"v {v[0]:.9g} {v[1]:.9g} {v[2]:.9g}")
    for corner_uvs in mesh.uv.reshape(-1, 2):
        lines.append(f"vt {corner_uvs[0]:.9g} {corner_uvs[1]:.9g}")
    for i, face in enumerate(mesh.faces):
        t = 3 * i
        lines.append(f"f {face[0]+1}/{t+1} {face[1]+1}/{t+2} {face[2]+1}/{t+3}")
    path.write_text("\n".join(lines) + "\n")


_INDEX_RE = re.compile(r"(\d+)")


def _frame_key(path: Path) -> int:
    matches = _INDEX_RE.findall(path.stem)
    if not matches:
        raise SequenceError(f"cannot extract a frame index from {path.name}")
    return int(matches[-1])


def load_mesh_sequence(directory: Path | str) -> list[GarmentMesh]:
    """Load all per-frame OBJ files, ordered by the index in the filename.

    All frames must share connectivity and UV layout; only vertex positions
    may move.
    """
    directory = Path(directory)
    files = sorted(directory.glob("*.obj"), key=_frame_key)
    if not files:
        raise SequenceError(f"no .obj frames in {directory}")
    meshes = [load_obj(f) for f in files]
    ref = meshes[0]
    for f, mesh in zip(files[1:], meshes[1:]):
        if mesh.num_vertices != ref.num_vertices or not np.array_equal(mesh.faces, ref.faces):
            raise ConsistencyError(f"{f.name}: connectivity differs from {files[0].name}")
        if mesh.uv.shape != ref.uv.shape or np.abs(mesh.uv - ref.uv).max() > 1e-6:
            raise ConsistencyError(f"{f.name}: UV layout differs from {files[0].name}")
    return meshes


# ---------------------------------------------------------------------------
# differential quantities

def face_normals(mesh: GarmentMesh) -> tuple[np.ndarray, np.ndarray]:
    """Unit face normals and twice-areas; degenerate faces get a zero normal."""
    tri = mesh.vertices[mesh.faces]
    cross = np.cross(tri[:, 1] - tri[:, 0], tri[:, 2] - tri[:, 0])
    double_area = np.linalg.norm(cross, axis=1)
    normals = np.zeros_like(cross)
    ok = double_area > 1e-18
    normals[ok] = cross[ok] / double_area[ok, None]
    return normals, double_area


def vertex_normals(mesh: GarmentMesh) -> np.ndarray:
    """Area-weighted vertex normals."""
    fnorm, double_area = face_normals(mesh)
    weighted = fnorm * double_area[:, None]
    out = np.zeros_like(mesh.vertices)
    for k in range(3):
        np.add.at(out, mesh.faces[:, k], weighted)
    lengths = np.linalg.norm(out, axis=1, keepdims=True)
    return out / np.maximum(lengths, 1e-18)


def face_tangents(mesh: GarmentMesh) -> tuple[np.ndarray, np.ndarray]:
    """Per-face tangent (dP/du) and bitangent (dP/dv) from the UV gradient."""
    tri = mesh.vertices[mesh.faces]
    e1 = tri[:, 1] - tri[:, 0]
    e2 = tri[:, 2] - tri[:, 0]
    duv1 = mesh.uv[:, 1] - mesh.uv[:, 0]
    duv2 = mesh.uv[:, 2] - mesh.uv[:, 0]
    det = duv1[:, 0] * duv2[:, 1] - duv1[:, 1] * duv2[:, 0]
    safe = np.where(np.abs(det) > 1e-18, det, 1.0)
    t = (duv2[:, 1, None] * e1 - duv1[:, 1, None] * e2) / safe[:, None]
    b = (-duv2[:, 0, None] * e1 + duv1[:, 0, None] * e2) / safe[:, None]
    bad = np.abs(det) <= 1e-18
    t[bad] = 0.0
    b[bad] = 0.0
    return t, b


def vertex_tangent_frames(mesh: GarmentMesh) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Orthonormal per-vertex (tangent, bitangent, normal) frames.

    Tangents are accumulated from faces, projected against the vertex
    normal, and the bitangent is rebuilt as n x t with the handedness of the
    accumulated UV bitangent.
    """
    n = vertex_normals(mesh)
    ft, fb = face_tangents(mesh)
    _, double_area = face_normals(mesh)
    t_acc = np.zeros_like(mesh.vertices)
    b_acc = np.zeros_like(mesh.vertices)
    for k in range(3):
        np.add.at(t_acc, mesh.faces[:, k], ft * double_area[:, None])
        np.add.at(b_acc, mesh.faces[:, k], fb * double_area[:, None])
    t = t_acc - (t_acc * n).sum(axis=1, keepdims=True) * n
    t_len = np.linalg.norm(t, axis=1, keepdims=True)
    # Fall back to an arbitrary perpendicular where UVs give no direction.
    fallback = np.cross(n, np.where(np.abs(n[:, :1]) < 0.9, [1.0, 0.0, 0.0], [0.0, 1.0, 0.0]))
    t = np.where(t_len > 1e-12, t / np.maximum(t_len, 1e-18), fallback / np.linalg.norm(fallback, axis=1, keepdims=True))
    b = np.cross(n, t)
    sign = np.where((b * b_acc).sum(axis=1, keepdims=True) < 0, -1.0, 1.0)
    return t, b * sign, n


def corner_uv_to_vertex_uv(mesh: GarmentMesh, tol: float = 1e-4) -> np.ndarray:
    """Collapse per-corner UVs to per-vertex UVs.

    Raises when a vertex carries corners from different charts (UV seams are
    out of scope for surface recovery).
    """
    uv = np.zeros((mesh.num_vertices, 2), dtype=np.float64)
    counts = np.zeros(mesh.num_vertices, dtype=np.int64)
    for k in range(3):
        np.add.at(uv, mesh.faces[:, k], mesh.uv[:, k])
        np.add.at(counts, mesh.faces[:, k], 1)
    used = counts > 0
    uv[used] /= counts[used, None]
    spread = np.zeros(mesh.num_vertices)
    for k in range(3):
        d = np.linalg.norm(mesh.uv[:, k] - uv[mesh.faces[:, k]], axis=1)
        np.maximum.at(spread, mesh.faces[:, k], d)
    if spread.max(initial=0.0) > tol:
        worst = int(np.argmax(spread))
        raise DataError(
            f"vertex {worst} sits on a UV seam (corner spread {spread[worst]:.2e}); "
            "per-vertex UVs are ambiguous"
        )
    return uv


def unique_edges(faces: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Undirected unique edges and the number of faces sharing each."""
    raw = np.concatenate([faces[:, [0, 1]], faces[:, [1, 2]], faces[:, [2, 0]]])
    raw = np.sort(raw, axis=1)
    edges, counts = np.unique(raw, axis=0, return_counts=True)
    return edges, counts


def vertex_adjacency(faces: np.ndarray, num_vertices: int) -> tuple[np.ndarray, np.ndarray]:
    """One-ring neighborhoods in CSR form (indptr, indices)."""
    edges, _ = unique_edges(faces)
    directed = np.concatenate([edges, edges[:, ::-1]])
    order = np.lexsort((directed[:, 1], directed[:, 0]))
    directed = directed[order]
    counts = np.bincount(directed[:, 0], minlength=num_vertices)
    indptr = np.zeros(num_vertices + 1, dtype=np.int64)
    np.cumsum(counts, out=indptr[1:])
    return indptr, directed[:, 1].astype(np.int64)


def require_closed(mesh: GarmentMesh, what: str = "body mesh") -> None:
    """Every edge of a watertight mesh is shared by exactly two faces."""
    if mesh.num_faces == 0:
        raise TopologyError(f"{what} has no faces")
    _, counts = unique_edges(mesh.faces)
    if np.any(counts != 2):
        bad = int(np.sum(counts != 2))
        raise TopologyError(f"{what} is not closed: {bad} boundary/non-manifold edges")

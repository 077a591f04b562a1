"""Triangle meshes: OBJ ingestion, cleanup and normal smoothing topology."""
from __future__ import annotations

import warnings
from collections import deque
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import scipy.sparse as sp


class MeshError(ValueError):
    pass


@dataclass
class TriangleMesh:
    """Vertices in meters, triangles as index triples, one material id per triangle."""

    vertices: np.ndarray
    triangles: np.ndarray
    material_ids: np.ndarray | None = None
    material_names: list = field(default_factory=lambda: ["default"])
    dropped_degenerate: int = 0

    def __post_init__(self):
        self.vertices = np.asarray(self.vertices, dtype=float).reshape(-1, 3)
        self.triangles = np.asarray(self.triangles, dtype=np.int64).reshape(-1, 3)
        if self.material_ids is None:
            self.material_ids = np.zeros(len(self.triangles), dtype=np.int64)
        self.material_ids = np.asarray(self.material_ids, dtype=np.int64)
        if len(self.triangles) and (self.triangles.min() < 0 or self.triangles.max() >= len(self.vertices)):
            raise MeshError("triangle index out of range")

    @property
    def n_vertices(self) -> int:
        return len(self.vertices)

    @property
    def n_triangles(self) -> int:
        return len(self.triangles)

    def face_normals(self) -> np.ndarray:
        v = self.vertices[self.triangles]
        n = np.cross(v[:, 1] - v[:, 0], v[:, 2] - v[:, 0])
        return n / np.linalg.norm(n, axis=1, keepdims=True)

    def areas(self) -> np.ndarray:
        v = self.vertices[self.triangles]
        return 0.5 * np.linalg.norm(np.cross(v[:, 1] - v[:, 0], v[:, 2] - v[:, 0]), axis=1)

    def centroid(self) -> np.ndarray:
        return self.vertices.mean(axis=0)

    def bounds(self):
        return self.vertices.min(axis=0), self.vertices.max(axis=0)

    def is_closed(self) -> bool:
        edges = np.sort(self.triangles[:, [0, 1, 1, 2, 2, 0]].reshape(-1, 2), axis=1)
        _, counts = np.unique(edges, axis=0, return_counts=True)
        return bool(np.all(counts == 2))

    def signed_volume(self) -> float:
        v = self.vertices[self.triangles]
        return float(np.einsum("ij,ij->i", v[:, 0], np.cross(v[:, 1], v[:, 2])).sum() / 6.0)

    def smoothing_matrix(self, crease_deg: float = 30.0):
        """Sparse (3T x T) map from face cross products to corner normals.

        Corner k of triangle t averages (area-weighted) the faces sharing its
        vertex whose normal lies within ``crease_deg`` of face t. Flat faces
        therefore keep their geometric normal; curved patches are smoothed.
        """
        nf = self.face_normals()
        cos_crease = np.cos(np.deg2rad(crease_deg))
        incident: list[list[int]] = [[] for _ in range(self.n_vertices)]
        for t, tri in enumerate(self.triangles):
            for i in tri:
                incident[i].append(t)
        rows, cols = [], []
        for t, tri in enumerate(self.triangles):
            for k, i in enumerate(tri):
                faces = np.asarray(incident[i])
                keep = faces[nf[faces] @ nf[t] >= cos_crease - 1e-12]
                rows.extend([3 * t + k] * len(keep))
                cols.extend(keep.tolist())
        data = np.ones(len(rows))
        return sp.csr_matrix((data, (rows, cols)), shape=(3 * self.n_triangles, self.n_triangles))


def _orient_consistently(tris: np.ndarray) -> np.ndarray:
    """Flip triangles so neighbours traverse shared edges in opposite directions."""
    tris = tris.copy()
    edge_faces: dict = {}
    for t, (a, b, c) in enumerate(tris):
        for e in ((a, b), (b, c), (c, a)):
            edge_faces.setdefault(frozenset(e), []).append(t)
    seen = np.zeros(len(tris), dtype=bool)
    for seed in range(len(tris)):
        if seen[seed]:
            continue
        seen[seed] = True
        queue = deque([seed])
        while queue:
            t = queue.popleft()
            a, b, c = tris[t]
            for u, v in ((a, b), (b, c), (c, a)):
                for nb in edge_faces[frozenset((u, v))]:
                    if nb == t or seen[nb]:
                        continue
                    x, y, z = tris[nb]
                    same_dir = (u, v) in ((x, y), (y, z), (z, x))
                    if same_dir:
                        tris[nb] = (x, z, y)
                    seen[nb] = True
                    queue.append(nb)
    return tris


def repair(mesh: TriangleMesh) -> TriangleMesh:
    """Consistent winding; closed meshes additionally get outward normals."""
    tris = _orient_consistently(mesh.triangles)
    out = TriangleMesh(mesh.vertices, tris, mesh.material_ids, list(mesh.material_names),
                       mesh.dropped_degenerate)
    if out.is_closed() and out.signed_volume() < 0:
        out.triangles = out.triangles[:, [0, 2, 1]]
    return out


def load_obj(path, repair_winding: bool = True) -> TriangleMesh:
    """Read an ASCII OBJ (``v``/``f``/``usemtl`` records; ``vn``/``vt`` ignored).

    Polygons are fan-triangulated. Zero-area triangles are dropped and
    counted in ``dropped_degenerate`` (a warning is emitted).
    """
    path = Path(path)
    try:
        text = path.read_text()
    except (OSError, UnicodeDecodeError) as exc:
        raise MeshError(f"cannot read OBJ file {path}: {exc}") from exc
    verts, faces, mats = [], [], []
    names = ["default"]
    current = 0
    for lineno, line in enumerate(text.splitlines(), 1):
        parts = line.split()
        if not parts or parts[0].startswith("#"):
            continue
        tag = parts[0]
        if tag == "v":
            try:
                verts.append([float(x) for x in parts[1:4]])
            except ValueError as exc:
                raise MeshError(f"{path}:{lineno}: bad vertex record") from exc
        elif tag == "f":
            idx = []
            for token in parts[1:]:
                i = int(token.split("/")[0])
                i = i - 1 if i > 0 else len(verts) + i
                idx.append(i)
            if len(idx) < 3:
                raise MeshError(f"{path}:{lineno}: face with fewer than 3 vertices")
            for k in range(1, len(idx) - 1):
                faces.append((idx[0], idx[k], idx[k + 1]))
                mats.append(current)
        elif tag == "usemtl":
            name = parts[1] if len(parts) > 1 else "default"
            if name not in names:
                names.append(name)
            current = names.index(name)
    verts = np.asarray(verts, dtype=float).reshape(-1, 3)
    faces = np.asarray(faces, dtype=np.int64).reshape(-1, 3)
    if len(faces) and (faces.min() < 0 or faces.max() >= len(verts)):
        raise MeshError(f"{path}: face index out of range")
    mesh = clean(TriangleMesh(verts, faces, np.asarray(mats, dtype=np.int64), names))
    if mesh.n_triangles == 0:
        raise MeshError(f"{path}: no triangles left after cleanup")
    return repair(mesh) if repair_winding else mesh


def clean(mesh: TriangleMesh) -> TriangleMesh:
    v = mesh.vertices[mesh.triangles]
    cross = np.linalg.norm(np.cross(v[:, 1] - v[:, 0], v[:, 2] - v[:, 0]), axis=1)
    extent = float(np.ptp(mesh.vertices, axis=0).max()) if mesh.n_vertices else 0.0
    keep = cross > 1e-12 * max(extent, 1e-30) ** 2
    dropped = int((~keep).sum())
    if dropped:
        warnings.warn(f"dropped {dropped} degenerate triangle(s)", stacklevel=3)
    return TriangleMesh(mesh.vertices, mesh.triangles[keep], mesh.material_ids[keep],
                        list(mesh.material_names), mesh.dropped_degenerate + dropped)


def save_obj(mesh: TriangleMesh, path, vertices=None):
    vertices = mesh.vertices if vertices is None else np.asarray(vertices)
    lines = ["# written by rfd"]
    lines += [f"v {x:.9g} {y:.9g} {z:.9g}" for x, y, z in vertices]
    current = None
    for tri, m in zip(mesh.triangles, mesh.material_ids):
        if len(mesh.material_names) > 1 and m != current:
            lines.append(f"usemtl {mesh.material_names[m]}")
            current = m
        lines.append("f {} {} {}".format(*(tri + 1)))
    Path(path).write_text("\n".join(lines) + "\n")

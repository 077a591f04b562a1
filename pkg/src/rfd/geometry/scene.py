"""World geometry assembled from posed meshes, with differentiable hit recomputation.

The discrete part of a ray query (which triangle is hit) is answered by the
BVH on plain floats. The continuous part (distance, barycentrics, point,
shading normal) is then re-evaluated on the tape with Möller–Trumbore, so
gradients flow into vertex positions while split decisions stay inert.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import scipy.sparse as sp

from .. import adgraph as ad
from ..adgraph import Var
from .bvh import BVH, build_bvh
from .kernels import closest_hit, occluded
from .mesh import TriangleMesh


@dataclass
class Hit:
    tri: np.ndarray  # -1 on miss
    t: Var
    u: Var
    v: Var
    point: Var
    normal: Var  # interpolated, unit length
    face_normal: np.ndarray  # geometric, numeric

    @property
    def mask(self) -> np.ndarray:
        return self.tri >= 0


class SceneGeometry:
    """Union of posed meshes sharing one BVH.

    ``objects`` is a sequence of ``(mesh, world_vertices, material_index)``
    where ``material_index`` maps the mesh's local material ids to global
    ones (an int applies to every triangle).
    """

    def __init__(self, objects, crease_deg: float = 30.0, backend: str | None = None):
        self.backend = backend
        verts, tris, mats, owner, smooth = [], [], [], [], []
        off = 0
        for k, (mesh, world, material) in enumerate(objects):
            world = world if isinstance(world, Var) else Var(world)
            verts.append(world)
            tris.append(mesh.triangles + off)
            if np.isscalar(material):
                mats.append(np.full(mesh.n_triangles, int(material), dtype=np.int64))
            else:
                mats.append(np.asarray(material, dtype=np.int64)[mesh.material_ids])
            owner.append(np.full(mesh.n_triangles, k, dtype=np.int64))
            smooth.append(mesh.smoothing_matrix(crease_deg))
            off += mesh.n_vertices
        self.n_objects = len(verts)
        if self.n_objects == 0:
            self.vertices = Var(np.zeros((0, 3)))
            self.triangles = np.zeros((0, 3), dtype=np.int64)
            self.material = np.zeros(0, dtype=np.int64)
            self.owner = np.zeros(0, dtype=np.int64)
            self.bvh = None
            return
        self.vertices = verts[0] if len(verts) == 1 else ad.concatenate(verts, axis=0)
        self.triangles = np.concatenate(tris)
        self.material = np.concatenate(mats)
        self.owner = np.concatenate(owner)
        self._smooth = sp.block_diag(smooth, format="csr")
        tv = self.vertices.value[self.triangles]
        self.bvh: BVH | None = build_bvh(tv)
        self._face_cross: Var | None = None
        self._corner: Var | None = None

    @property
    def n_triangles(self) -> int:
        return len(self.triangles)

    @property
    def empty(self) -> bool:
        return self.n_triangles == 0

    def tri_vertices(self) -> np.ndarray:
        return self.vertices.value[self.triangles]

    def face_normals(self) -> np.ndarray:
        tv = self.tri_vertices()
        n = np.cross(tv[:, 1] - tv[:, 0], tv[:, 2] - tv[:, 0])
        return n / np.linalg.norm(n, axis=1, keepdims=True)

    def areas(self) -> np.ndarray:
        tv = self.tri_vertices()
        return 0.5 * np.linalg.norm(np.cross(tv[:, 1] - tv[:, 0], tv[:, 2] - tv[:, 0]), axis=1)

    def bounding_sphere(self):
        v = self.vertices.value
        lo, hi = v.min(axis=0), v.max(axis=0)
        c = 0.5 * (lo + hi)
        return c, float(np.linalg.norm(v - c, axis=1).max())

    # -- tape-side quantities -------------------------------------------------

    def corners(self, tri) -> tuple[Var, Var, Var]:
        """Differentiable triangle corners for the given triangle ids."""
        idx = self.triangles[np.asarray(tri)]
        v = self.vertices
        return v[idx[:, 0]], v[idx[:, 1]], v[idx[:, 2]]

    def _corner_normals(self) -> Var:
        if self._corner is None:
            a, b, c = self.corners(np.arange(self.n_triangles))
            cross = ad.cross(b - a, c - a)  # area-weighted face normals
            self._corner = ad.normalize(ad.linmap(cross, self._smooth))  # (3T, 3)
        return self._corner

    def shading_normal(self, tri, u: Var, v: Var) -> Var:
        tri = np.asarray(tri)
        cn = self._corner_normals()
        n0, n1, n2 = cn[3 * tri], cn[3 * tri + 1], cn[3 * tri + 2]
        w = 1.0 - u - v
        col = lambda x: ad.reshape(x, x.shape + (1,))  # noqa: E731
        return ad.normalize(col(w) * n0 + col(u) * n1 + col(v) * n2)

    def centroids(self, tri=None) -> Var:
        tri = np.arange(self.n_triangles) if tri is None else np.asarray(tri)
        a, b, c = self.corners(tri)
        return (a + b + c) / 3.0

    def area_vectors(self, tri=None) -> Var:
        """Half the edge cross product: area times outward unit normal."""
        tri = np.arange(self.n_triangles) if tri is None else np.asarray(tri)
        a, b, c = self.corners(tri)
        return 0.5 * ad.cross(b - a, c - a)

    # -- queries --------------------------------------------------------------

    def closest(self, origins, dirs, skip=None, tmax=None):
        o = ad._val(origins).reshape(-1, 3)
        if self.empty:
            n = len(o)
            return np.full(n, -1, np.int64), np.full(n, np.inf), np.zeros(n), np.zeros(n)
        return closest_hit(o, ad._val(dirs).reshape(-1, 3), self.bvh, tmax=tmax, skip=skip,
                           backend=self.backend)

    def blocked(self, origins, targets, skip=None) -> np.ndarray:
        if self.empty:
            return np.zeros(len(np.asarray(ad._val(origins)).reshape(-1, 3)), dtype=bool)
        return occluded(ad._val(origins), ad._val(targets), self.bvh, skip=skip, backend=self.backend)

    def hit_geometry(self, tri, origins, dirs) -> Hit:
        """Re-evaluate the hit of ray ``i`` against triangle ``tri[i]`` on the tape.

        ``tri`` must be valid ids (misses filtered by the caller).
        """
        tri = np.asarray(tri, dtype=np.int64)
        o = origins if isinstance(origins, Var) else Var(origins)
        d = dirs if isinstance(dirs, Var) else Var(dirs)
        t, u, v = moller_trumbore(o, d, *self.corners(tri))
        point = o + ad.reshape(t, t.shape + (1,)) * d
        normal = self.shading_normal(tri, u, v)
        return Hit(tri, t, u, v, point, normal, self.face_normals()[tri])

    def intersect(self, origins, dirs, skip=None) -> Hit:
        """Nearest hit for each ray; misses keep ``tri == -1`` and zero geometry."""
        o = origins if isinstance(origins, Var) else Var(np.reshape(origins, (-1, 3)))
        d = dirs if isinstance(dirs, Var) else Var(np.reshape(dirs, (-1, 3)))
        tri, _, _, _ = self.closest(o, d, skip=skip)
        hitm = tri >= 0
        n = len(tri)
        if not hitm.any():
            z = Var(np.zeros(n))
            return Hit(tri, Var(np.full(n, np.inf)), z, z, Var(np.zeros((n, 3))), Var(np.zeros((n, 3))),
                       np.zeros((n, 3)))
        safe = np.where(hitm, tri, int(tri[hitm][0]))
        h = self.hit_geometry(safe, o, d)
        mask1 = hitm.astype(float)
        mask3 = mask1[:, None]
        return Hit(tri, ad.where(hitm, h.t, np.inf), h.u * mask1, h.v * mask1, h.point * mask3,
                   h.normal * mask3, h.face_normal * mask3)


def moller_trumbore(o: Var, d: Var, a: Var, b: Var, c: Var):
    """Per-row ray/triangle solve returning ``(t, u, v)`` as tape values."""
    e1 = b - a
    e2 = c - a
    p = ad.cross(d, e2)
    det = ad.dot(e1, p)
    s = o - a
    q = ad.cross(s, e1)
    inv = 1.0 / det
    u = ad.dot(s, p) * inv
    v = ad.dot(d, q) * inv
    t = ad.dot(e2, q) * inv
    return t, u, v


def intersect(origin, direction, geometry: SceneGeometry) -> Hit:
    """Single-ray convenience wrapper around :meth:`SceneGeometry.intersect`."""
    o = origin if isinstance(origin, Var) else Var(np.reshape(origin, (1, 3)))
    d = direction if isinstance(direction, Var) else Var(np.reshape(direction, (1, 3)))
    if o.ndim == 1:
        o = ad.reshape(o, (1, 3))
    if d.ndim == 1:
        d = ad.reshape(d, (1, 3))
    return geometry.intersect(o, d)


def static_scene(meshes: list[TriangleMesh], materials=None, **kw) -> SceneGeometry:
    """Scene of unposed meshes (world coordinates as stored)."""
    materials = materials or [0] * len(meshes)
    return SceneGeometry([(m, Var(m.vertices), k) for m, k in zip(meshes, materials)], **kw)

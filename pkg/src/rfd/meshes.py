"""Procedural test meshes (all closed meshes wound outward)."""
from __future__ import annotations

import numpy as np

from .geometry.mesh import TriangleMesh, repair


def cube(size: float = 1.0, center=(0.0, 0.0, 0.0), divisions: int = 1) -> TriangleMesh:
    """Axis-aligned cube; ``divisions`` splits every face into an n x n grid of quads."""
    h = size / 2.0
    g = np.linspace(-h, h, divisions + 1)
    verts: dict[tuple, int] = {}
    tris = []

    def vid(p):
        key = tuple(np.round(p, 12))
        if key not in verts:
            verts[key] = len(verts)
        return verts[key]

    for axis in range(3):
        for sign in (-1.0, 1.0):
            a, b = [k for k in range(3) if k != axis]
            for i in range(divisions):
                for j in range(divisions):
                    quad = []
                    for di, dj in ((0, 0), (1, 0), (1, 1), (0, 1)):
                        p = np.zeros(3)
                        p[axis], p[a], p[b] = sign * h, g[i + di], g[j + dj]
                        quad.append(vid(p))
                    tris += [(quad[0], quad[1], quad[2]), (quad[0], quad[2], quad[3])]
    v = np.array(list(verts), float) + np.asarray(center, float)
    return repair(TriangleMesh(v, tris))


def wall(width: float = 1.0, height: float = 1.0, z: float = 0.0, center_xy=(0.0, 0.0),
         divisions: int = 1) -> TriangleMesh:
    """Rectangle in the plane ``z`` whose normal faces -z (toward a radar at the origin)."""
    xs = np.linspace(-width / 2, width / 2, divisions + 1) + center_xy[0]
    ys = np.linspace(-height / 2, height / 2, divisions + 1) + center_xy[1]
    v = np.array([[x, y, z] for y in ys for x in xs])
    n = divisions + 1
    tris = []
    for j in range(divisions):
        for i in range(divisions):
            a, b, c, d = j * n + i, j * n + i + 1, (j + 1) * n + i + 1, (j + 1) * n + i
            tris += [(a, c, b), (a, d, c)]
    return TriangleMesh(v, tris)


def cylinder(radius: float = 0.5, height: float = 1.0, segments: int = 12) -> TriangleMesh:
    """Capped prism around the y axis."""
    ang = 2 * np.pi * np.arange(segments) / segments
    ring = np.stack([radius * np.cos(ang), np.zeros(segments), radius * np.sin(ang)], axis=1)
    lo = ring + [0, -height / 2, 0]
    hi = ring + [0, height / 2, 0]
    v = np.vstack([lo, hi, [[0, -height / 2, 0], [0, height / 2, 0]]])
    cb, ct = 2 * segments, 2 * segments + 1
    tris = []
    for i in range(segments):
        j = (i + 1) % segments
        tris += [(i, j, segments + j), (i, segments + j, segments + i)]
        tris += [(cb, j, i), (ct, segments + i, segments + j)]
    return repair(TriangleMesh(v, tris))


def _frustum(lo_half, hi_half, y0, y1):
    (ax, az), (bx, bz) = lo_half, hi_half
    v = [[-ax, y0, -az], [ax, y0, -az], [ax, y0, az], [-ax, y0, az],
         [-bx, y1, -bz], [bx, y1, -bz], [bx, y1, bz], [-bx, y1, bz]]
    quads = [(0, 1, 2, 3), (4, 7, 6, 5), (0, 4, 5, 1), (1, 5, 6, 2), (2, 6, 7, 3), (3, 7, 4, 0)]
    return np.array(v, float), [t for a, b, c, d in quads for t in ((a, b, c), (a, c, d))]


def toy_car(length: float = 0.8) -> TriangleMesh:
    """Low-poly car: a body box with a narrower cabin frustum on top (x is the long axis)."""
    s = length / 0.8
    bv, bt = _frustum((0.4 * s, 0.18 * s), (0.4 * s, 0.18 * s), -0.1 * s, 0.06 * s)
    cv, ct = _frustum((0.24 * s, 0.16 * s), (0.14 * s, 0.13 * s), 0.06 * s, 0.18 * s)
    v = np.vstack([bv, cv])
    tris = list(bt) + [(a + 8, b + 8, c + 8) for a, b, c in ct]
    return repair(TriangleMesh(v, tris))


def plate(size: float = 0.05, z: float = 0.0) -> TriangleMesh:
    """Small square facing -z; a near-point scatterer for range-scaling checks."""
    return wall(size, size, z)


def random_triangles(n: int, seed: int = 0, spread: float = 1.0, size: float = 0.1,
                     center=(0.0, 0.0, 0.0)) -> TriangleMesh:
    rng = np.random.default_rng(seed)
    c = rng.uniform(-spread, spread, (n, 1, 3)) + np.asarray(center)
    v = (c + rng.normal(0.0, size, (n, 3, 3))).reshape(-1, 3)
    return TriangleMesh(v, np.arange(3 * n).reshape(n, 3))


BUILTIN = {"cube": cube, "cylinder": cylinder, "car": toy_car, "wall": wall, "plate": plate}


def builtin(name: str) -> TriangleMesh:
    if name not in BUILTIN:
        raise KeyError(f"unknown builtin mesh {name!r}; known: {sorted(BUILTIN)}")
    return BUILTIN[name]()

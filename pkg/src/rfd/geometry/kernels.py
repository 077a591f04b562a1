"""Ray/triangle query kernels.

Each query has a numba implementation (per-ray stack traversal) and a
pure-numpy implementation (breadth-first wavefront over ray/node pairs).
Both apply the same acceptance tests and tie-break (smaller t, then smaller
triangle id), so they return identical hits.
"""
from __future__ import annotations

import numpy as np

from .._accel import njit, resolve
from .bvh import BVH

BARY_EPS = 1e-9
PARALLEL_EPS = 1e-10  # |cos(ray, plane normal)| below this counts as parallel
T_MIN = 1e-9


def _inv_dir(d):
    with np.errstate(divide="ignore"):
        return 1.0 / d


# ------------------------------------------------------------------- numba


@njit(cache=True)
def _mt_scalar(ox, oy, oz, dx, dy, dz, tv, tri):
    ax, ay, az = tv[tri, 0, 0], tv[tri, 0, 1], tv[tri, 0, 2]
    e1x, e1y, e1z = tv[tri, 1, 0] - ax, tv[tri, 1, 1] - ay, tv[tri, 1, 2] - az
    e2x, e2y, e2z = tv[tri, 2, 0] - ax, tv[tri, 2, 1] - ay, tv[tri, 2, 2] - az
    px, py, pz = dy * e2z - dz * e2y, dz * e2x - dx * e2z, dx * e2y - dy * e2x
    det = e1x * px + e1y * py + e1z * pz
    nx, ny, nz = e1y * e2z - e1z * e2y, e1z * e2x - e1x * e2z, e1x * e2y - e1y * e2x
    nn = np.sqrt(nx * nx + ny * ny + nz * nz)
    if abs(det) <= PARALLEL_EPS * nn:
        return False, 0.0, 0.0, 0.0
    inv = 1.0 / det
    sx, sy, sz = ox - ax, oy - ay, oz - az
    u = (sx * px + sy * py + sz * pz) * inv
    qx, qy, qz = sy * e1z - sz * e1y, sz * e1x - sx * e1z, sx * e1y - sy * e1x
    v = (dx * qx + dy * qy + dz * qz) * inv
    if u < -BARY_EPS or v < -BARY_EPS or u + v > 1.0 + BARY_EPS:
        return False, 0.0, 0.0, 0.0
    t = (e2x * qx + e2y * qy + e2z * qz) * inv
    return True, t, u, v


@njit(cache=True)
def _slab(o, invd, bmin, bmax, node, r):
    tnear = -np.inf
    tfar = np.inf
    for k in range(3):
        a = (bmin[node, k] - o[r, k]) * invd[r, k]
        b = (bmax[node, k] - o[r, k]) * invd[r, k]
        if a != a or b != b:  # 0 * inf: origin on the slab plane, ray parallel
            continue
        lo, hi = (a, b) if a < b else (b, a)
        tnear = max(tnear, lo)
        tfar = min(tfar, hi)
    return tnear, tfar


@njit(cache=True)
def _closest_nb(o, d, invd, tmax, skip, tv, bmin, bmax, left, right, start, count, tri_index,
                out_tri, out_t, out_u, out_v):
    stack = np.empty(128, dtype=np.int64)
    for r in range(o.shape[0]):
        best_t = tmax[r]
        best = -1
        bu = 0.0
        bv = 0.0
        sp = 0
        stack[0] = 0
        sp = 1
        while sp > 0:
            sp -= 1
            node = stack[sp]
            tnear, tfar = _slab(o, invd, bmin, bmax, node, r)
            if tfar < max(tnear, T_MIN) or tnear > best_t:
                continue
            if count[node] > 0:
                for j in range(start[node], start[node] + count[node]):
                    tri = tri_index[j]
                    if tri == skip[r]:
                        continue
                    ok, t, u, v = _mt_scalar(o[r, 0], o[r, 1], o[r, 2], d[r, 0], d[r, 1], d[r, 2], tv, tri)
                    if not ok or t <= T_MIN or t >= tmax[r]:
                        continue
                    if t < best_t or (t == best_t and (best < 0 or tri < best)):
                        best_t, best, bu, bv = t, tri, u, v
            else:
                stack[sp] = left[node]
                stack[sp + 1] = right[node]
                sp += 2
        out_tri[r] = best
        out_t[r] = best_t if best >= 0 else np.inf
        out_u[r] = bu
        out_v[r] = bv


@njit(cache=True)
def _brute_nb(o, d, tmax, skip, tv, out_tri, out_t, out_u, out_v):
    for r in range(o.shape[0]):
        best_t = tmax[r]
        best = -1
        bu = 0.0
        bv = 0.0
        for tri in range(tv.shape[0]):
            if tri == skip[r]:
                continue
            ok, t, u, v = _mt_scalar(o[r, 0], o[r, 1], o[r, 2], d[r, 0], d[r, 1], d[r, 2], tv, tri)
            if not ok or t <= T_MIN or t >= tmax[r]:
                continue
            if t < best_t or (t == best_t and (best < 0 or tri < best)):
                best_t, best, bu, bv = t, tri, u, v
        out_tri[r] = best
        out_t[r] = best_t if best >= 0 else np.inf
        out_u[r] = bu
        out_v[r] = bv


# ------------------------------------------------------------------- numpy


def _mt_np(o, d, v0, v1, v2):
    e1 = v1 - v0
    e2 = v2 - v0
    p = np.cross(d, e2)
    det = np.einsum("ij,ij->i", e1, p)
    nn = np.linalg.norm(np.cross(e1, e2), axis=1)
    ok = np.abs(det) > PARALLEL_EPS * nn
    inv = np.where(ok, 1.0 / np.where(ok, det, 1.0), 0.0)
    s = o - v0
    u = np.einsum("ij,ij->i", s, p) * inv
    q = np.cross(s, e1)
    v = np.einsum("ij,ij->i", d, q) * inv
    t = np.einsum("ij,ij->i", e2, q) * inv
    ok &= (u >= -BARY_EPS) & (v >= -BARY_EPS) & (u + v <= 1.0 + BARY_EPS)
    return ok, t, u, v


def _better(t, tri, best_t, best):
    return (t < best_t) | ((t == best_t) & ((best < 0) | (tri < best)))


def _reduce_candidates(r, t, tri, u, v, best_t, best, bu, bv):
    if r.size == 0:
        return
    order = np.lexsort((tri, t, r))
    r, t, tri, u, v = r[order], t[order], tri[order], u[order], v[order]
    first = np.ones(r.size, dtype=bool)
    first[1:] = r[1:] != r[:-1]
    r, t, tri, u, v = r[first], t[first], tri[first], u[first], v[first]
    upd = _better(t, tri, best_t[r], best[r])
    r = r[upd]
    best_t[r], best[r], bu[r], bv[r] = t[upd], tri[upd], u[upd], v[upd]


def _closest_np(o, d, invd, tmax, skip, bvh: BVH):
    n = len(o)
    best_t = tmax.astype(float).copy()
    best = np.full(n, -1, dtype=np.int64)
    bu = np.zeros(n)
    bv = np.zeros(n)
    rays = np.arange(n)
    nodes = np.zeros(n, dtype=np.int64)
    tv = bvh.tri_vertices
    while rays.size:
        with np.errstate(invalid="ignore"):
            a = (bvh.bmin[nodes] - o[rays]) * invd[rays]
            b = (bvh.bmax[nodes] - o[rays]) * invd[rays]
        tnear = np.max(np.where(np.isnan(a), -np.inf, np.fmin(a, b)), axis=1)
        tfar = np.min(np.where(np.isnan(a), np.inf, np.fmax(a, b)), axis=1)
        hit = (tfar >= np.maximum(tnear, T_MIN)) & ~(tnear > best_t[rays])
        rays, nodes = rays[hit], nodes[hit]
        leaf = bvh.count[nodes] > 0
        lr, ln = rays[leaf], nodes[leaf]
        if lr.size:
            cnt = bvh.count[ln]
            rep = np.repeat(lr, cnt)
            offs = np.arange(cnt.sum()) - np.repeat(np.cumsum(cnt) - cnt, cnt)
            tri = bvh.tri_index[np.repeat(bvh.start[ln], cnt) + offs]
            ok, t, u, v = _mt_np(o[rep], d[rep], tv[tri, 0], tv[tri, 1], tv[tri, 2])
            ok &= (t > T_MIN) & (t < tmax[rep]) & (tri != skip[rep])
            _reduce_candidates(rep[ok], t[ok], tri[ok], u[ok], v[ok], best_t, best, bu, bv)
        inner = ~leaf
        rays = np.concatenate([rays[inner], rays[inner]])
        nodes = np.concatenate([bvh.left[nodes[inner]], bvh.right[nodes[inner]]])
    best_t[best < 0] = np.inf
    return best, best_t, bu, bv


def _brute_np(o, d, tmax, skip, tv, chunk=1 << 20):
    n, m = len(o), len(tv)
    best_t = tmax.astype(float).copy()
    best = np.full(n, -1, dtype=np.int64)
    bu = np.zeros(n)
    bv = np.zeros(n)
    step = max(1, chunk // max(m, 1))
    for s in range(0, n, step):
        r = np.repeat(np.arange(s, min(n, s + step)), m)
        tri = np.tile(np.arange(m), min(n, s + step) - s)
        ok, t, u, v = _mt_np(o[r], d[r], tv[tri, 0], tv[tri, 1], tv[tri, 2])
        ok &= (t > T_MIN) & (t < tmax[r]) & (tri != skip[r])
        _reduce_candidates(r[ok], t[ok], tri[ok], u[ok], v[ok], best_t, best, bu, bv)
    best_t[best < 0] = np.inf
    return best, best_t, bu, bv


# -------------------------------------------------------------------- API


def _prep(origins, dirs, tmax, skip):
    o = np.ascontiguousarray(np.asarray(origins, dtype=float).reshape(-1, 3))
    d = np.ascontiguousarray(np.asarray(dirs, dtype=float).reshape(-1, 3))
    n = len(o)
    tmax = np.full(n, np.inf) if tmax is None else np.broadcast_to(np.asarray(tmax, float), (n,)).copy()
    skip = np.full(n, -1, np.int64) if skip is None else np.broadcast_to(np.asarray(skip, np.int64), (n,)).copy()
    return o, d, tmax, skip


def closest_hit(origins, dirs, bvh: BVH, tmax=None, skip=None, backend=None):
    """Nearest hit per ray. Returns ``(tri, t, u, v)``; ``tri == -1`` is a miss.

    ``skip`` names one triangle per ray to ignore (the one a bounce leaves from).
    """
    o, d, tmax, skip = _prep(origins, dirs, tmax, skip)
    invd = _inv_dir(d)
    if resolve(backend) == "numba":
        n = len(o)
        tri = np.empty(n, np.int64)
        t, u, v = np.empty(n), np.empty(n), np.empty(n)
        _closest_nb(o, d, invd, tmax, skip, bvh.tri_vertices, bvh.bmin, bvh.bmax, bvh.left,
                    bvh.right, bvh.start, bvh.count, bvh.tri_index, tri, t, u, v)
        return tri, t, u, v
    return _closest_np(o, d, invd, tmax, skip, bvh)


def brute_force_hit(origins, dirs, tri_vertices, tmax=None, skip=None, backend=None):
    """All-triangle reference for :func:`closest_hit` (same tie-break)."""
    o, d, tmax, skip = _prep(origins, dirs, tmax, skip)
    tv = np.ascontiguousarray(np.asarray(tri_vertices, dtype=float).reshape(-1, 3, 3))
    if resolve(backend) == "numba":
        n = len(o)
        tri = np.empty(n, np.int64)
        t, u, v = np.empty(n), np.empty(n), np.empty(n)
        _brute_nb(o, d, tmax, skip, tv, tri, t, u, v)
        return tri, t, u, v
    return _brute_np(o, d, tmax, skip, tv)


def occluded(origins, targets, bvh: BVH, skip=None, backend=None, rel_margin=1e-7):
    """True where the open segment origin->target crosses any triangle."""
    o = np.asarray(origins, dtype=float).reshape(-1, 3)
    seg = np.asarray(targets, dtype=float).reshape(-1, 3) - o
    length = np.linalg.norm(seg, axis=1)
    d = seg / np.where(length > 0, length, 1.0)[:, None]
    tri, _, _, _ = closest_hit(o, d, bvh, tmax=length * (1.0 - rel_margin), skip=skip, backend=backend)
    return tri >= 0

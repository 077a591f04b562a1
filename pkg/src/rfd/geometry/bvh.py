"""Median-split bounding volume hierarchy over world-space triangles."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

MAX_LEAF = 4


@dataclass
class BVH:
    """Flat node arrays. ``count[i] > 0`` marks a leaf covering
    ``tri_index[start[i]:start[i] + count[i]]``; inner nodes use ``left``/``right``.
    """

    bmin: np.ndarray
    bmax: np.ndarray
    left: np.ndarray
    right: np.ndarray
    start: np.ndarray
    count: np.ndarray
    tri_index: np.ndarray
    tri_vertices: np.ndarray  # (T, 3, 3), original triangle order

    @property
    def n_nodes(self) -> int:
        return len(self.count)

    def depth(self) -> int:
        best, stack = 0, [(0, 1)]
        while stack:
            node, d = stack.pop()
            best = max(best, d)
            if self.count[node] == 0:
                stack.append((int(self.left[node]), d + 1))
                stack.append((int(self.right[node]), d + 1))
        return best

    def leaves(self):
        return [i for i in range(self.n_nodes) if self.count[i] > 0]


def build_bvh(tri_vertices) -> BVH:
    """Median split along the longest centroid axis; at most 4 triangles per leaf."""
    tv = np.ascontiguousarray(np.asarray(tri_vertices, dtype=float).reshape(-1, 3, 3))
    n = len(tv)
    if n == 0:
        raise ValueError("cannot build a BVH over an empty scene")
    lo_t = tv.min(axis=1)
    hi_t = tv.max(axis=1)
    cent = tv.mean(axis=1)
    order = np.arange(n)
    bmin, bmax, left, right, start, count = [], [], [], [], [], []

    def new_node():
        for lst in (bmin, bmax):
            lst.append(np.zeros(3))
        for lst in (left, right, start, count):
            lst.append(0)
        return len(count) - 1

    root = new_node()
    stack = [(root, 0, n)]
    while stack:
        node, s, e = stack.pop()
        idx = order[s:e]
        bmin[node] = lo_t[idx].min(axis=0)
        bmax[node] = hi_t[idx].max(axis=0)
        if e - s <= MAX_LEAF:
            start[node], count[node] = s, e - s
            continue
        c = cent[idx]
        axis = int(np.argmax(c.max(axis=0) - c.min(axis=0)))
        # stable sort keeps construction deterministic on tied centroids
        order[s:e] = idx[np.argsort(c[:, axis], kind="stable")]
        mid = (s + e) // 2
        l, r = new_node(), new_node()
        left[node], right[node] = l, r
        stack.append((r, mid, e))
        stack.append((l, s, mid))
    return BVH(np.array(bmin), np.array(bmax), np.array(left, dtype=np.int64),
               np.array(right, dtype=np.int64), np.array(start, dtype=np.int64),
               np.array(count, dtype=np.int64), order.astype(np.int64), tv)

"""Monte Carlo RF path tracing with differentiable path delays and amplitudes.

Paths start at every TX element along two ray families:

* ``stratified`` rays, uniform in solid angle inside the cone that bounds the
  scene (polar angle stratified, azimuth random), weighted ``beta * Omega / N``;
* ``centroid`` rays, one per triangle facing the TX, aimed at its centroid and
  weighted ``(1 - beta) * A cos / r^2`` (the solid angle the triangle subtends).

Every hit connects to each RX element (a one-bounce-later return) and may
continue along the specular direction. A path's amplitude is

    sqrt(P_t) F G sqrt(w) prod(rho_k cos_k) vis / (4 pi L),    tof = L / c

so the incoherent power sum over paths is an unbiased estimate of the
received power integral. Discrete choices (which triangle a ray hits) are
made on plain floats; distances, normals and reflectivities are recomputed
on the tape.
"""
from __future__ import annotations

from dataclasses import dataclass, field, replace

import numpy as np
from scipy.integrate import quad

from . import adgraph as ad
from .adgraph import DiffComplex, Var
from .antenna import AntennaArray, pattern_gain
from .geometry.scene import SceneGeometry
from .ifsignal import PathBatch
from .rfmaterial import RFMaterial, effective_reflectivity, fresnel_arrays

C0 = 299_792_458.0
_FOUR_PI = 4.0 * np.pi


class TraceFault(RuntimeError):
    pass


@dataclass(frozen=True)
class TraceConfig:
    rays_per_virtual_element: int = 256
    max_bounces: int = 2
    rng_seed: int = 0
    edge_smoothing_kappa: float = 1e4
    russian_roulette_threshold: float = 1e-8
    aux_directions: int = 8
    hard_forward: bool = True
    random_fraction: float = 0.5
    centroid_rays: bool = True
    tx_power: float = 1.0
    reparameterize: bool = True
    polarization: str = "field"
    backend: str | None = None

    def __post_init__(self):
        if self.rays_per_virtual_element < 1:
            raise ValueError("rays_per_virtual_element must be >= 1")
        if self.max_bounces < 1:
            raise ValueError("max_bounces must be >= 1")
        if not self.edge_smoothing_kappa > 0:
            raise ValueError("edge_smoothing_kappa must be > 0")
        if self.aux_directions < 1:
            raise ValueError("aux_directions must be >= 1")
        if not 0.0 <= self.random_fraction <= 1.0:
            raise ValueError("random_fraction must lie in [0, 1]")
        if not self.centroid_rays and self.random_fraction < 1.0:
            object.__setattr__(self, "random_fraction", 1.0)

    def to_dict(self) -> dict:
        return {k: getattr(self, k) for k in self.__dataclass_fields__}


@dataclass
class RadarScene:
    """Posed world geometry plus the material table its triangles index into."""

    geometry: SceneGeometry
    materials: list


@dataclass
class Cone:
    axis: np.ndarray  # (n_tx, 3)
    cos_half: np.ndarray  # (n_tx,)

    @property
    def solid_angle(self) -> np.ndarray:
        return 2.0 * np.pi * (1.0 - self.cos_half)


@dataclass
class PathSet:
    """Struct-of-arrays path records."""

    tof: Var
    amplitude: DiffComplex
    tx_id: np.ndarray
    rx_id: np.ndarray
    bounce_count: np.ndarray
    kind: np.ndarray  # 0 centroid, 1 stratified
    sample_weight: np.ndarray  # w in sqrt(w); solid angle share
    path_length: np.ndarray
    n_rx: int
    n_elements: int

    KINDS = ("centroid", "stratified")

    def __len__(self):
        return len(self.tx_id)

    @property
    def element(self) -> np.ndarray:
        return self.tx_id * self.n_rx + self.rx_id

    def batch(self) -> PathBatch:
        return PathBatch(self.tof, self.amplitude, self.element, self.n_elements)

    def select(self, mask) -> "PathSet":
        idx = np.flatnonzero(mask)
        return PathSet(self.tof[idx], self.amplitude[idx], self.tx_id[idx], self.rx_id[idx],
                       self.bounce_count[idx], self.kind[idx], self.sample_weight[idx],
                       self.path_length[idx], self.n_rx, self.n_elements)

    def kind_names(self) -> np.ndarray:
        return np.asarray(self.KINDS)[self.kind]

    def normalized_amplitude(self) -> np.ndarray:
        """``|amplitude| * 4 pi L / sqrt(w)``: the gain/reflectivity product."""
        return np.abs(self.amplitude.value) * _FOUR_PI * self.path_length / np.sqrt(self.sample_weight)


def _empty_paths(n_rx, n_el) -> PathSet:
    z = Var(np.zeros(0))
    e = np.zeros(0, np.int64)
    return PathSet(z, DiffComplex(z, z), e, e, e, e, np.zeros(0), np.zeros(0), n_rx, n_el)


def scene_cone(geometry: SceneGeometry, tx_world: np.ndarray) -> Cone:
    center, radius = geometry.bounding_sphere()
    radius = radius * (1.0 + 1e-6) + 1e-9
    vec = center - tx_world
    dist = np.linalg.norm(vec, axis=1)
    axis = vec / np.where(dist > 0, dist, 1.0)[:, None]
    axis[dist == 0] = [0.0, 0.0, 1.0]
    inside = dist <= radius
    sin_half = np.where(inside, 1.0, radius / np.where(inside, 1.0, dist))
    cos_half = np.where(inside, -1.0, np.sqrt(np.clip(1.0 - sin_half ** 2, 0.0, 1.0)))
    return Cone(axis, cos_half)


def _frame(axis: np.ndarray):
    a = np.asarray(axis, float)
    helper = np.where(np.abs(a[..., :1]) < 0.9, [[1.0, 0.0, 0.0]], [[0.0, 1.0, 0.0]])
    e1 = np.cross(a, helper)
    e1 /= np.linalg.norm(e1, axis=-1, keepdims=True)
    return e1, np.cross(a, e1)


def _rng(seed: int, *stream: int) -> np.random.Generator:
    """Counter-based generator keyed by (seed, stream) so replays are exact."""
    code = 0
    for k, s in enumerate(stream):
        code |= (int(s) & 0xFFFF) << (16 * k)
    return np.random.Generator(np.random.Philox(key=[int(seed) & 0xFFFFFFFFFFFFFFFF, code]))


def sample_cone(axis, cos_half: float, n: int, rng: np.random.Generator) -> np.ndarray:
    """``n`` unit vectors uniform in solid angle in a cone, stratified in polar angle."""
    u = (np.arange(n) + rng.random(n)) / n
    phi = 2.0 * np.pi * rng.random(n)
    cos_t = 1.0 - u * (1.0 - cos_half)
    sin_t = np.sqrt(np.clip(1.0 - cos_t ** 2, 0.0, None))
    e1, e2 = _frame(np.asarray(axis, float)[None, :])
    return (cos_t[:, None] * axis + (sin_t * np.cos(phi))[:, None] * e1
            + (sin_t * np.sin(phi))[:, None] * e2)


def sample_vmf(mu: np.ndarray, kappa: float, m: int, rng: np.random.Generator) -> np.ndarray:
    """(S, m, 3) von Mises-Fisher samples about each row of ``mu`` (stratified in the polar coordinate)."""
    s = len(mu)
    xi = (np.arange(m)[None, :] + rng.random((s, m))) / m
    w = 1.0 + np.log(np.maximum(xi + (1.0 - xi) * np.exp(-2.0 * kappa), 1e-300)) / kappa
    w = np.clip(w, -1.0, 1.0)
    phi = 2.0 * np.pi * rng.random((s, m))
    r = np.sqrt(np.clip(1.0 - w * w, 0.0, None))
    e1, e2 = _frame(mu)
    return (w[..., None] * mu[:, None, :] + (r * np.cos(phi))[..., None] * e1[:, None, :]
            + (r * np.sin(phi))[..., None] * e2[:, None, :])


# ------------------------------------------------------------- visibility


def _col(x: Var) -> Var:
    return ad.reshape(x, x.shape + (1,))


_PROBES = 8


def _edge_tables(geo: SceneGeometry):
    cached = getattr(geo, "_edge_cache", None)
    if cached is not None:
        return cached
    tri = geo.triangles
    pairs = np.sort(tri[:, [0, 1, 1, 2, 2, 0]].reshape(-1, 2), axis=1)
    uniq, inv = np.unique(pairs, axis=0, return_inverse=True)
    inv = inv.reshape(-1)
    faces = [[] for _ in range(len(uniq))]
    for k, e in enumerate(inv):
        faces[e].append(k // 3)
    geo._edge_cache = (uniq, inv.reshape(-1, 3), faces)
    return geo._edge_cache


def _pick_silhouette(geo: SceneGeometry, p: np.ndarray, mu: np.ndarray, blockers: np.ndarray):
    """Silhouette edge (as seen from ``p``) of the blocking triangles nearest the cone axis.

    Returns ``(vertex_a, vertex_b, s)`` with the tracking point at ``(1-s) a + s b``,
    or ``None`` when no silhouette edge is found.
    """
    edges, tri_edges, faces = _edge_tables(geo)
    verts = geo.vertices.value
    fn = geo.face_normals()
    best = None
    for e in np.unique(tri_edges[np.unique(blockers)].reshape(-1)):
        a, b = edges[e]
        adj = faces[e]
        if len(adj) == 2:
            s0 = np.dot(p - verts[a], fn[adj[0]])
            s1 = np.dot(p - verts[a], fn[adj[1]])
            if (s0 > 0) == (s1 > 0):
                continue
        va, vb = verts[a] - p, verts[b] - p
        # closest approach between the axis ray and the edge segment
        d = vb - va
        dd = np.dot(d, d)
        s = np.clip(-(np.dot(va, d) - np.dot(va, mu) * np.dot(mu, d)) / max(dd - np.dot(mu, d) ** 2, 1e-300),
                    0.0, 1.0)
        pt = va + s * d
        n = np.linalg.norm(pt)
        if n == 0:
            continue
        ang = np.arccos(np.clip(np.dot(pt / n, mu), -1.0, 1.0))
        if best is None or ang < best[0]:
            best = (ang, int(a), int(b), float(s))
    return None if best is None else best[1:]


def reparameterized_visibility(geo: SceneGeometry, origins, targets, cfg: TraceConfig,
                               rng: np.random.Generator, skip=None, target_normals=None):
    return _visibility(geo, origins, targets, cfg, rng, skip, target_normals)[0]


def _visibility(geo: SceneGeometry, origins, targets, cfg: TraceConfig, rng, skip=None,
                target_normals=None):
    """Visibility of segments ``origins[i] -> targets[i]`` as a tape value in [0, 1].

    The hard 0/1 answer is kept for the forward value when ``cfg.hard_forward``;
    gradients come from a vMF-smoothed estimate whose auxiliary directions are
    rotated with the nearest silhouette edge of the blocking geometry, with the
    density ratio as the change-of-variables weight. Segments with no
    silhouette inside or just outside their cone get a constant value and no
    gradient.
    ``target_normals`` marks targets lying on a surface: auxiliary rays then
    stop at that surface's plane instead of at the target distance.
    """
    p = origins if isinstance(origins, Var) else Var(np.reshape(origins, (-1, 3)))
    q = targets if isinstance(targets, Var) else Var(np.reshape(targets, (-1, 3)))
    pv, qv = p.value, q.value
    if pv.shape[0] != qv.shape[0]:
        pv = np.broadcast_to(pv, qv.shape)
    n = len(qv)
    hard = (~geo.blocked(pv, qv, skip=skip)).astype(float)
    none = np.zeros(n, bool)
    if n == 0 or geo.empty or not cfg.reparameterize:
        return Var(hard), none

    seg = qv - pv
    length = np.linalg.norm(seg, axis=1)
    mu0 = seg / length[:, None]
    m = cfg.aux_directions
    kappa = cfg.edge_smoothing_kappa
    nrm = None if target_normals is None else np.asarray(target_normals, float).reshape(-1, 3)

    def blockers(rows, dirs):
        # first hits of (len(rows), k) directions from the segment origins
        k = dirs.shape[1]
        if nrm is None:
            tmax = np.repeat(length[rows], k)
        else:
            num = np.repeat(np.einsum("ij,ij->i", seg[rows], nrm[rows]), k)
            den = np.einsum("ij,ij->i", dirs.reshape(-1, 3), np.repeat(nrm[rows], k, axis=0))
            with np.errstate(divide="ignore", invalid="ignore"):
                tmax = num / den
            tmax = np.where((tmax > 0) & np.isfinite(tmax), tmax, np.repeat(length[rows], k) * 2.0)
        sk = None if skip is None else np.repeat(np.broadcast_to(np.asarray(skip), (n,))[rows], k)
        hit, _, _, _ = geo.closest(np.repeat(pv[rows], k, axis=0), dirs.reshape(-1, 3), skip=sk,
                                   tmax=tmax * (1.0 - 1e-6))
        return hit.reshape(len(rows), k)

    seg = qv - pv
    length = np.linalg.norm(seg, axis=1)
    mu0 = seg / length[:, None]
    aux = sample_vmf(mu0, kappa, m, rng)  # (n, m, 3)
    tri = blockers(np.arange(n), aux)
    vis_aux = (tri < 0).astype(float)
    mixed = (vis_aux.min(axis=1) == 0) & (vis_aux.max(axis=1) == 1)
    smooth_const = vis_aux.mean(axis=1)
    # All-visible cones still move with a silhouette just outside them; a ring
    # of probes at three vMF widths finds it so their gradient is not dropped.
    near = {}
    clear = np.flatnonzero(vis_aux.min(axis=1) == 1)
    if len(clear):
        ang = min(3.0 / np.sqrt(kappa), 0.5 * np.pi)
        phi = 2.0 * np.pi * np.arange(_PROBES) / _PROBES
        e1, e2 = _frame(mu0[clear])
        ring = (np.cos(ang) * mu0[clear][:, None, :]
                + np.sin(ang) * (np.cos(phi)[None, :, None] * e1[:, None, :]
                                 + np.sin(phi)[None, :, None] * e2[:, None, :]))
        probe = blockers(clear, ring)
        for i, row in zip(clear, probe):
            if (row >= 0).any():
                near[int(i)] = row[row >= 0]
    if not mixed.any() and not near:
        return Var(hard if cfg.hard_forward else smooth_const), none

    rows, tracks = [], []
    for i in range(n):
        if mixed[i]:
            blocking = tri[i][tri[i] >= 0]
        elif i in near:
            blocking = near[i]
        else:
            continue
        pick = _pick_silhouette(geo, pv[i], mu0[i], blocking)
        if pick is not None:
            rows.append(i)
            tracks.append(pick)
    if not rows:
        return Var(hard if cfg.hard_forward else smooth_const), none
    rows = np.asarray(rows)
    a_idx = np.array([t[0] for t in tracks])
    b_idx = np.array([t[1] for t in tracks])
    s = np.array([t[2] for t in tracks])
    verts = geo.vertices
    edge_pt = _col(Var(1.0 - s)) * verts[a_idx] + _col(Var(s)) * verts[b_idx]
    p_rows = p[rows] if p.shape[0] == n else p[np.zeros(len(rows), np.int64)]
    u = ad.normalize(edge_pt - p_rows)
    u0 = u.value
    v = ad.cross(Var(u0), u)  # rotation axis * sin
    c = ad.dot(Var(u0), u)
    qj = Var(aux[rows])  # (r, m, 3)
    v3 = ad.reshape(v, (len(rows), 1, 3))
    vxq = ad.cross(v3, qj)
    vxvxq = ad.cross(v3, vxq)
    rq = qj + vxq + vxvxq / ad.reshape(1.0 + c, (len(rows), 1, 1))
    mu = ad.normalize(q[rows] - p_rows)
    expo = kappa * (ad.sum(ad.reshape(mu, (len(rows), 1, 3)) * rq, axis=2)
                    - np.einsum("rk,rmk->rm", mu0[rows], aux[rows]))
    smooth_rows = ad.mean(ad.exp(expo) * vis_aux[rows], axis=1)
    base = hard if cfg.hard_forward else smooth_const
    centred = smooth_rows - ad.stop_gradient(smooth_rows)
    scatter = np.zeros((n, len(rows)))
    scatter[rows, np.arange(len(rows))] = 1.0
    mask = none.copy()
    mask[rows] = True
    return Var(base) + ad.linmap(centred, scatter), mask


def exact_smoothed_visibility(offset: float, kappa: float) -> float:
    """vMF mass on the visible side of a straight edge at angular offset ``offset``.

    The edge is a great circle at angle ``offset`` from the cone axis
    (positive: the axis is visible). Reference for the smoothed estimator.
    """
    if abs(offset) >= 0.5 * np.pi:
        return 1.0 if offset > 0 else 0.0
    so, co = np.sin(offset), np.cos(offset)

    # u = kappa (1 - cos t) has density exp(-u) up to the truncation at t = pi
    def frac(u):
        w = 1.0 - u / kappa
        st = np.sqrt(max(0.0, 1.0 - w * w))
        if st * co <= abs(w * so):
            return 1.0 if w * so > 0 else (0.5 if w * so == 0 else 0.0)
        return 1.0 - np.arccos(w * so / (st * co)) / np.pi

    upper = min(2.0 * kappa, 60.0)
    kink = kappa * (1.0 - co)
    val, _ = quad(lambda u: np.exp(-u) * frac(u), 0.0, upper,
                  points=[kink] if 0.0 < kink < upper else None, limit=200, epsabs=1e-14, epsrel=1e-12)
    return float(val / -np.expm1(-upper))


# ------------------------------------------------------------------ tracing


@dataclass
class _Front:
    """Active path prefixes sitting on a surface."""

    point: Var
    incoming: Var
    normal: Var
    face_normal: np.ndarray
    tri: np.ndarray
    tx: np.ndarray
    length: Var
    amp: DiffComplex
    weight: np.ndarray
    kind: np.ndarray

    def take(self, idx) -> "_Front":
        return _Front(self.point[idx], self.incoming[idx], self.normal[idx], self.face_normal[idx],
                      self.tri[idx], self.tx[idx], self.length[idx], self.amp[idx],
                      self.weight[idx], self.kind[idx])


def _material_arrays(scene: RadarScene, tri):
    mats: list[RFMaterial] = scene.materials
    ids = scene.geometry.material[tri]
    eps = ad.stack([m.eps_r if isinstance(m.eps_r, Var) else Var(m.eps_r) for m in mats])
    sig = ad.stack([m.sigma if isinstance(m.sigma, Var) else Var(m.sigma) for m in mats])
    return eps[ids], sig[ids]


def _primary(scene: RadarScene, array: AntennaArray, cfg: TraceConfig, cone: Cone) -> _Front | None:
    geo = scene.geometry
    txw = array.tx_world()
    parts = []
    sqrt_pt = np.sqrt(cfg.tx_power)
    beta = cfg.random_fraction
    n = cfg.rays_per_virtual_element
    if beta > 0:
        dirs, txs, ws = [], [], []
        for i in range(array.n_tx):
            d = sample_cone(cone.axis[i], cone.cos_half[i], n, _rng(cfg.rng_seed, 1, i))
            dirs.append(d)
            txs.append(np.full(n, i))
            ws.append(np.full(n, beta * cone.solid_angle[i] / n))
        d = np.vstack(dirs)
        tx = np.concatenate(txs)
        w = np.concatenate(ws)
        o = txw[tx]
        tri, _, _, _ = geo.closest(o, d)
        hit = tri >= 0
        if hit.any():
            o, d, tx, w, tri = o[hit], d[hit], tx[hit], w[hit], tri[hit]
            h = geo.hit_geometry(tri, Var(o), Var(d))
            gain = pattern_gain(array.pattern, array.boresight, d).value
            amp = DiffComplex.const(sqrt_pt * gain * np.sqrt(w))
            parts.append(_Front(h.point, Var(d), h.normal, h.face_normal, tri, tx, h.t, amp, w,
                                np.ones(len(tri), np.int64)))
    if cfg.centroid_rays and beta < 1:
        fn = geo.face_normals()
        cen_v = geo.centroids().value
        txs, tris = [], []
        for i in range(array.n_tx):
            facing = np.einsum("ij,ij->i", txw[i] - cen_v, fn) > 0
            ids = np.flatnonzero(facing)
            txs.append(np.full(len(ids), i))
            tris.append(ids)
        tx = np.concatenate(txs).astype(np.int64)
        tri = np.concatenate(tris).astype(np.int64)
        if len(tri):
            cen = geo.centroids(tri)
            o = Var(txw[tx])
            vis, grad_rows = _visibility(geo, o, cen, cfg, _rng(cfg.rng_seed, 2), skip=tri,
                                         target_normals=fn[tri])
            keep = (vis.value > 0) | grad_rows
            idx = np.flatnonzero(keep)
            if len(idx):
                tx, tri, cen, vis = tx[idx], tri[idx], cen[idx], vis[idx]
                o = Var(txw[tx])
                vec = cen - o
                r = ad.norm(vec)
                d = vec / _col(r)
                area_vec = geo.area_vectors(tri)
                w = (1.0 - beta) * ad.dot(area_vec, o - cen) / (r * r * r)
                w = ad.clamp_min(w, 0.0)
                gain = pattern_gain(array.pattern, array.boresight, d)
                third = Var(np.full(len(tri), 1.0 / 3.0))
                normal = geo.shading_normal(tri, third, third)
                amp_r = sqrt_pt * gain * ad.sqrt(w) * vis
                parts.append(_Front(cen, d, normal, fn[tri], tri, tx, r, DiffComplex(amp_r, 0.0 * amp_r),
                                    np.asarray(w.value), np.zeros(len(tri), np.int64)))
    if not parts:
        return None
    if len(parts) == 1:
        return parts[0]
    a, b = parts
    cat = lambda x, y: ad.concatenate([x, y])  # noqa: E731
    return _Front(cat(a.point, b.point), cat(a.incoming, b.incoming), cat(a.normal, b.normal),
                  np.vstack([a.face_normal, b.face_normal]), np.concatenate([a.tri, b.tri]),
                  np.concatenate([a.tx, b.tx]), cat(a.length, b.length),
                  DiffComplex(cat(a.amp.re, b.amp.re), cat(a.amp.im, b.amp.im)),
                  np.concatenate([a.weight, b.weight]), np.concatenate([a.kind, b.kind]))


def trace(scene: RadarScene, array: AntennaArray, cfg: TraceConfig, carrier_freq: float,
          cone: Cone | None = None) -> PathSet:
    """All TX -> hit(s) -> RX paths for the current scene pose.

    ``cone`` fixes the stratified sampling cone (defaults to the cone bounding
    the current geometry); finite-difference checks pass a frozen one so the
    random directions do not move with the parameters.
    """
    geo = scene.geometry
    n_rx, n_el = array.n_rx, array.n_virtual
    if geo.empty:
        return _empty_paths(n_rx, n_el)
    txw, rxw = array.tx_world(), array.rx_world()
    cone = cone or scene_cone(geo, txw)
    front = _primary(scene, array, cfg, cone)
    out = []
    bounce = 1
    while front is not None and len(front.tri):
        # cull back faces and grazing shading normals
        cos_i = -ad.dot(front.incoming, front.normal)
        ok = (np.einsum("ij,ij->i", front.incoming.value, front.face_normal) < 0) & (cos_i.value > 1e-12)
        if not ok.all():
            front = front.take(np.flatnonzero(ok))
            cos_i = cos_i[np.flatnonzero(ok)]
        if not len(front.tri):
            break
        eps, sig = _material_arrays(scene, front.tri)
        coeffs = fresnel_arrays(eps, sig, cos_i, carrier_freq)
        rho = effective_reflectivity(coeffs, cfg.polarization)
        amp_hit = front.amp * rho * cos_i
        out.append(_returns(scene, array, cfg, front, amp_hit, rxw, bounce))
        if bounce >= cfg.max_bounces:
            break
        front = _continue(scene, cfg, front, amp_hit, bounce)
        bounce += 1
    out = [p for p in out if p is not None and len(p)]
    if not out:
        return _empty_paths(n_rx, n_el)
    paths = out[0] if len(out) == 1 else _concat_paths(out)
    if not np.all(np.isfinite(paths.amplitude.value)) or not np.all(np.isfinite(paths.tof.value)):
        bad = np.flatnonzero(~np.isfinite(paths.amplitude.value) | ~np.isfinite(paths.tof.value))
        raise TraceFault(f"non-finite path amplitude/tof at paths {bad[:10].tolist()} "
                         f"(tx {paths.tx_id[bad[:10]].tolist()}, bounce {paths.bounce_count[bad[:10]].tolist()})")
    return paths


def _returns(scene, array, cfg, front: _Front, amp_hit: DiffComplex, rxw, bounce) -> PathSet | None:
    geo = scene.geometry
    nh, nr = len(front.tri), len(rxw)
    hi = np.repeat(np.arange(nh), nr)
    rj = np.tile(np.arange(nr), nh)
    pts = front.point[hi]
    rx = rxw[rj]
    front_side = np.einsum("ij,ij->i", rx - pts.value, front.face_normal[hi]) > 0
    sel = np.flatnonzero(front_side)
    if not len(sel):
        return None
    hi, rj, pts = hi[sel], rj[sel], pts[sel]
    vis, grad_rows = _visibility(geo, pts, Var(rxw[rj]), cfg, _rng(cfg.rng_seed, 3, bounce),
                                 skip=front.tri[hi])
    live = (vis.value > 0) | grad_rows
    sel = np.flatnonzero(live)
    if not len(sel):
        return None
    hi, rj, pts, vis = hi[sel], rj[sel], pts[sel], vis[sel]
    vec = Var(rxw[rj]) - pts
    dist = ad.norm(vec)
    arrive = -vec / _col(dist)
    gain = pattern_gain(array.pattern, array.boresight, arrive)
    total = front.length[hi] + dist
    amp = amp_hit[hi] * (gain * vis / (_FOUR_PI * total))
    tx = front.tx[hi]
    return PathSet(total / C0, amp, tx, rj.astype(np.int64), np.full(len(hi), bounce, np.int64),
                   front.kind[hi], front.weight[hi], total.value.copy(), array.n_rx, array.n_virtual)


def _continue(scene, cfg, front: _Front, amp_hit: DiffComplex, bounce) -> _Front | None:
    geo = scene.geometry
    d, nrm = front.incoming, front.normal
    refl = d - 2.0 * _col(ad.dot(d, nrm)) * nrm
    tri, _, _, _ = geo.closest(front.point.value, refl.value, skip=front.tri)
    hit = tri >= 0
    if not hit.any():
        return None
    idx = np.flatnonzero(hit)
    # Russian roulette on the spreading-attenuated amplitude
    mag = np.abs(amp_hit.value[idx]) / (_FOUR_PI * front.length.value[idx])
    thr = cfg.russian_roulette_threshold
    survive = np.ones(len(idx), bool)
    scale = np.ones(len(idx))
    low = mag < thr
    if low.any():
        prob = np.maximum(mag[low] / thr, 1e-12)
        u = _rng(cfg.rng_seed, 4, bounce).random(len(idx))[low]
        survive[low] = u < prob
        scale[low] = 1.0 / prob
    idx, scale = idx[survive], scale[survive]
    if not len(idx):
        return None
    h = geo.hit_geometry(tri[idx], front.point[idx], refl[idx])
    return _Front(h.point, refl[idx], h.normal, h.face_normal, tri[idx], front.tx[idx],
                  front.length[idx] + h.t, amp_hit[idx] * scale, front.weight[idx], front.kind[idx])


def _concat_paths(parts: list[PathSet]) -> PathSet:
    first = parts[0]
    return PathSet(ad.concatenate([p.tof for p in parts]),
                   DiffComplex(ad.concatenate([p.amplitude.re for p in parts]),
                               ad.concatenate([p.amplitude.im for p in parts])),
                   np.concatenate([p.tx_id for p in parts]), np.concatenate([p.rx_id for p in parts]),
                   np.concatenate([p.bounce_count for p in parts]), np.concatenate([p.kind for p in parts]),
                   np.concatenate([p.sample_weight for p in parts]),
                   np.concatenate([p.path_length for p in parts]), first.n_rx, first.n_elements)


def received_power(paths: PathSet) -> float:
    """Incoherent total ``sum |I^s|^2``."""
    return float(np.sum(np.abs(paths.amplitude.value) ** 2)) if len(paths) else 0.0


def estimate_convergence(scene: RadarScene, array: AntennaArray, cfg: TraceConfig, n_list,
                         carrier_freq: float, n_seeds: int = 16) -> list[dict]:
    """Across-seed mean and variance of received power for each ray count."""
    n_list = list(n_list)
    if len(n_list) < 2:
        raise ValueError("need at least two ray counts")
    cone = scene_cone(scene.geometry, array.tx_world())
    rows = []
    for n in n_list:
        vals = []
        for s in range(n_seeds):
            c = replace(cfg, rays_per_virtual_element=int(n), rng_seed=cfg.rng_seed * 1000003 + s)
            with ad.Tape():
                vals.append(received_power(trace(scene, array, c, carrier_freq, cone)))
        vals = np.asarray(vals)
        rows.append({"n": int(n), "mean": float(vals.mean()), "variance": float(vals.var(ddof=1)),
                     "std_error": float(vals.std(ddof=1) / np.sqrt(n_seeds))})
    return rows


def doubling_ratio(rows) -> float:
    """Variance ratio per doubling of N, from a log-log fit over all rows.

    A single pair of 16-seed variances is too noisy to estimate the rate;
    the fit pools every doubling in the table.
    """
    if len(rows) < 2:
        raise ValueError("need at least two ray counts")
    n = np.log2([r["n"] for r in rows])
    v = np.log2([r["variance"] for r in rows])
    return float(2.0 ** np.polyfit(n, v, 1)[0])

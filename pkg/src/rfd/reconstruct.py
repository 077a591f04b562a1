"""Inverse loop: parameter vector, spatial loss, gradient steps, evaluation, result bundle."""
from __future__ import annotations

import csv
import json
import math
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np
import scipy.sparse as sp
from scipy import ndimage

from . import adgraph as ad
from .adgraph import Var
from .antenna import AntennaArray
from .geometry.kernels import closest_hit
from .geometry.bvh import build_bvh
from .geometry.mesh import TriangleMesh, save_obj
from .geometry.scene import SceneGeometry
from .geometry.transform import DisplacementParam, RigidParam, rotation_matrix, transform_mesh
from .ifsignal import ChirpConfig, IFFrame, synthesize
from .imaging import (ArrayLayout, CFARConfig, InitializationError, PointCloud, SpatialImage,
                      extract_pointcloud, register_init, save_volume, spatial_image)
from .rfmaterial import RFMaterial
from .tracer import Cone, RadarScene, TraceConfig, scene_cone, trace


class OptimizationAborted(RuntimeError):
    pass


class MetricsUndefined(ValueError):
    pass


# ------------------------------------------------------------- parameters

POSE_FIELDS = ("translation.x", "translation.y", "translation.z",
               "rotation.x", "rotation.y", "rotation.z", "log_scale")
GROUPS = {
    "translation": POSE_FIELDS[:3],
    "rotation": POSE_FIELDS[3:6],
    "scale": ("log_scale",),
    "material": ("eps_r", "sigma"),
}


def _softplus_inv(y: float) -> float:
    y = max(float(y), 1e-12)
    return y + math.log(-math.expm1(-y))


@dataclass
class ObjectSpec:
    name: str
    mesh: TriangleMesh
    material: RFMaterial
    translation: tuple = (0.0, 0.0, 0.0)
    rotation: tuple = (0.0, 0.0, 0.0)
    scale: float = 1.0
    free: tuple = ()
    displacement: bool = False
    displacement_weight: float = 0.1


class SceneParams:
    """Flat unconstrained vector theta with a name for every entry.

    Per object: translation (m), axis-angle rotation (rad), ``log_scale``,
    ``eps_r`` stored as ``softplus^-1(eps_r - 1)``, ``sigma`` as
    ``softplus^-1(sigma)``, then optional per-vertex displacement.
    """

    def __init__(self, objects: list[ObjectSpec]):
        self.objects = list(objects)
        names, values, free = [], [], []
        self._slices = []
        for o in self.objects:
            start = len(names)
            vals = list(o.translation) + list(o.rotation) + [math.log(o.scale)]
            vals += [_softplus_inv(float(ad._val(o.material.eps_r)) - 1.0),
                     _softplus_inv(float(ad._val(o.material.sigma)))]
            fields_ = list(POSE_FIELDS) + ["eps_r", "sigma"]
            if o.displacement:
                for i in range(o.mesh.n_vertices):
                    fields_ += [f"displacement[{i}].{a}" for a in "xyz"]
                vals += [0.0] * (3 * o.mesh.n_vertices)
            names += [f"{o.name}.{f}" for f in fields_]
            values += vals
            free += [self._is_free(o, f) for f in fields_]
            self._slices.append(slice(start, len(names)))
        self.names = names
        self.index = {n: i for i, n in enumerate(names)}
        self.initial = np.asarray(values, float)
        self.free = np.asarray(free, bool)
        unknown = [f for o in self.objects for f in o.free if not self._known(f)]
        if unknown:
            raise ValueError(f"unknown free parameter name(s): {unknown}")

    @staticmethod
    def _known(f: str) -> bool:
        return f in GROUPS or f in POSE_FIELDS or f in ("eps_r", "sigma", "scale", "displacement") \
            or any(f == g.split(".")[0] for g in POSE_FIELDS)

    @staticmethod
    def _is_free(o: ObjectSpec, field_: str) -> bool:
        for f in o.free:
            if f == field_ or (f in GROUPS and field_ in GROUPS[f]):
                return True
            if f == "scale" and field_ == "log_scale":
                return True
            if f == "displacement" and field_.startswith("displacement["):
                return True
        return False

    def __len__(self):
        return len(self.names)

    def flatten(self, named: dict) -> np.ndarray:
        vec = self.initial.copy()
        for k, v in named.items():
            vec[self.index[k]] = v
        return vec

    def unflatten(self, vec) -> dict:
        vec = np.asarray(vec, float)
        return {n: float(v) for n, v in zip(self.names, vec)}

    def group_mask(self, groups) -> np.ndarray:
        """Free entries that also belong to one of ``groups``."""
        keep = np.zeros(len(self), bool)
        for i, n in enumerate(self.names):
            f = n.split(".", 1)[1]
            for g in groups:
                if (g in GROUPS and f in GROUPS[g]) or (g == "displacement" and f.startswith("displacement[")):
                    keep[i] = True
        return keep & self.free

    def free_names(self) -> list[str]:
        return [n for n, f in zip(self.names, self.free) if f]

    def build(self, theta):
        """Per object ``(RigidParam, DisplacementParam | None, RFMaterial)`` from theta."""
        theta = theta if isinstance(theta, Var) else Var(theta)
        out = []
        for o, sl in zip(self.objects, self._slices):
            s0 = sl.start
            rp = RigidParam(theta[s0:s0 + 3], theta[s0 + 3:s0 + 6], ad.exp(theta[s0 + 6]))
            mat = o.material
            if self.free[s0 + 7] or self.free[s0 + 8]:
                eps = 1.0 + ad.softplus(theta[s0 + 7]) if self.free[s0 + 7] else o.material.eps_r
                sig = ad.softplus(theta[s0 + 8]) if self.free[s0 + 8] else o.material.sigma
                mat = RFMaterial(o.material.name, eps, sig)
            dp = None
            if o.displacement:
                dp = DisplacementParam(ad.reshape(theta[s0 + 9:sl.stop], (-1, 3)), o.displacement_weight)
            out.append((rp, dp, mat))
        return out

    def pose_values(self, vec, k: int = 0) -> dict:
        s0 = self._slices[k].start
        vec = np.asarray(vec, float)
        return {"translation": vec[s0:s0 + 3].tolist(), "rotation": vec[s0 + 3:s0 + 6].tolist(),
                "scale": float(np.exp(vec[s0 + 6]))}

    def posed_vertices(self, vec, k: int = 0) -> np.ndarray:
        built = self.build(np.asarray(vec, float))
        rp, dp, _ = built[k]
        return transform_mesh(self.objects[k].mesh, rp, dp).value

    def with_pose(self, vec, k: int, translation=None, scale=None) -> np.ndarray:
        vec = np.array(vec, float)
        s0 = self._slices[k].start
        if translation is not None:
            vec[s0:s0 + 3] = translation
        if scale is not None:
            vec[s0 + 6] = math.log(scale)
        return vec


# --------------------------------------------------------------- rendering


@dataclass
class Renderer:
    array: AntennaArray
    chirp: ChirpConfig
    trace_cfg: TraceConfig = field(default_factory=TraceConfig)
    dims: tuple | None = None
    window: str = "hann"
    synth_mode: str = "fused"
    cone: Cone | None = None

    def __post_init__(self):
        self.layout = ArrayLayout.from_array(self.array)

    def scene(self, params: SceneParams, theta) -> RadarScene:
        built = params.build(theta)
        objs, mats = [], []
        for k, (o, (rp, dp, mat)) in enumerate(zip(params.objects, built)):
            objs.append((o.mesh, transform_mesh(o.mesh, rp, dp), k))
            mats.append(mat)
        return RadarScene(SceneGeometry(objs, backend=self.trace_cfg.backend), mats)

    def frame(self, params: SceneParams, theta) -> IFFrame:
        scene = self.scene(params, theta)
        paths = trace(scene, self.array, self.trace_cfg, self.chirp.f_c, cone=self.cone)
        return synthesize(paths.batch(), self.chirp, self.array.element_order(), mode=self.synth_mode,
                          backend=self.trace_cfg.backend)

    def image(self, frame: IFFrame) -> SpatialImage:
        return spatial_image(frame, self.layout, self.dims, self.window)

    def frozen_cone(self, params: SceneParams, theta) -> Cone:
        return scene_cone(self.scene(params, np.asarray(ad._val(theta))).geometry, self.array.tx_world())


# -------------------------------------------------------------------- loss


def _check_compatible(sim: IFFrame, obs: IFFrame):
    if sim.chirp != obs.chirp:
        for f in ("f_c", "bandwidth", "duration", "n_samples", "sample_rate"):
            if getattr(sim.chirp, f) != getattr(obs.chirp, f):
                name = "chirp_duration" if f == "duration" else f
                raise ValueError(f"simulated and observed chirps differ in {name}: "
                                 f"{getattr(sim.chirp, f)} vs {getattr(obs.chirp, f)}")
    if [tuple(e) for e in sim.element_order] != [tuple(e) for e in obs.element_order]:
        raise ValueError("simulated and observed frames differ in element_order")
    if sim.shape != obs.shape:
        raise ValueError(f"simulated and observed frames differ in shape: {sim.shape} vs {obs.shape}")


def _gauss_matrix(n: int, sigma: float):
    if sigma <= 0 or n == 1:
        return None
    r = max(1, int(math.ceil(3 * sigma)))
    k = np.exp(-0.5 * (np.arange(-r, r + 1) / sigma) ** 2)
    k /= k.sum()
    return sp.diags([np.full(n - abs(o), k[o + r]) for o in range(-r, r + 1)
                     if abs(o) < n], [o for o in range(-r, r + 1) if abs(o) < n], format="csr")


def blur_volume(vol, sigma_range: float = 0.0, sigma_angle: float = 0.0):
    """Separable Gaussian blur along range and both angle axes (tape-compatible)."""
    v = vol if isinstance(vol, Var) else Var(vol)
    for axis, sigma in ((0, sigma_range), (1, sigma_angle), (2, sigma_angle)):
        b = _gauss_matrix(v.shape[axis], sigma)
        if b is None:
            continue
        order = (axis,) + tuple(a for a in range(3) if a != axis)
        t = ad.transpose(v, order) if axis else v
        shape = t.shape
        t = ad.reshape(ad.linmap(ad.reshape(t, (shape[0], -1)), b), shape)
        v = ad.transpose(t, tuple(np.argsort(order))) if axis else t
    return v


def _normalized(vol):
    m = ad.amax(vol)
    if float(m.value) <= 0.0:
        return vol
    return vol / m


def volume_loss(sim_vol, obs_vol, blur=(0.0, 0.0)) -> Var:
    a = _normalized(blur_volume(sim_vol, *blur))
    b = _normalized(blur_volume(ad.constant(obs_vol), *blur))
    d = a - b
    return ad.mean(d * d)


def spatial_loss(sim: IFFrame, obs: IFFrame, layout: ArrayLayout, dims=None, window: str = "hann",
                 blur=(0.0, 0.0)) -> Var:
    """Mean squared difference of max-normalized power volumes."""
    _check_compatible(sim, obs)
    vs = spatial_image(sim, layout, dims, window).volume
    vo = spatial_image(IFFrame(ad.stop_gradient(obs.samples), obs.chirp, obs.element_order),
                       layout, dims, window).volume
    return volume_loss(vs, vo, blur)


# ---------------------------------------------------------------- optimizer


@dataclass
class OptConfig:
    kind: str = "sgd"
    lr: float = 0.01
    schedule: str = "cosine"
    lr_min_fraction: float = 0.05
    max_iters: int = 300
    clip: float = 10.0
    rel_tol: float = 1e-5
    window: int = 20
    phases: bool = True
    phase_fractions: tuple = (0.25, 0.25)
    blur_range_bins: float = 0.0
    blur_az_bins: float = 0.0
    blur_min_range_bins: float = 0.0
    blur_min_az_bins: float = 0.0
    blur_fraction: float = 0.5
    seed: int = 0
    snapshot_every: int = 10
    betas: tuple = (0.9, 0.999)
    adam_eps: float = 1e-8
    init: str = "register"
    prior: bool = True

    def __post_init__(self):
        if self.kind not in ("sgd", "adam"):
            raise ValueError(f"unknown optimizer {self.kind!r}")
        if self.schedule not in ("constant", "cosine"):
            raise ValueError(f"unknown schedule {self.schedule!r}")
        if self.init not in ("prior", "register"):
            raise ValueError(f"unknown init mode {self.init!r}")

    def to_dict(self) -> dict:
        d = {k: getattr(self, k) for k in self.__dataclass_fields__}
        d["betas"], d["phase_fractions"] = list(self.betas), list(self.phase_fractions)
        return d


@dataclass
class OptState:
    iteration: int = 0
    lr: float = 0.0
    loss_history: list = field(default_factory=list)
    best_loss: float = math.inf
    best_theta: np.ndarray | None = None
    m: np.ndarray | None = None
    v: np.ndarray | None = None
    steps: np.ndarray | None = None


def learning_rate(cfg: OptConfig, it: int) -> float:
    if cfg.schedule == "constant" or cfg.max_iters <= 1:
        return cfg.lr
    frac = min(it / (cfg.max_iters - 1), 1.0)
    lo = cfg.lr * cfg.lr_min_fraction
    return lo + 0.5 * (cfg.lr - lo) * (1.0 + math.cos(math.pi * frac))


def sgd_step(theta, grad, state: OptState, cfg: OptConfig, names=None, lr: float | None = None,
             active=None):
    """One update ``theta - alpha * g`` (or Adam) with gradient-norm clipping.

    ``active`` masks the entries being optimized this step; Adam keeps a
    per-entry step count so entries joining in a later phase start with
    fresh bias correction.
    """
    theta = np.asarray(theta, float)
    grad = np.asarray(grad, float)
    if grad.shape != theta.shape:
        raise ValueError(f"gradient shape {grad.shape} does not match parameters {theta.shape}")
    bad = np.flatnonzero(~np.isfinite(grad))
    if bad.size:
        who = names[bad[0]] if names is not None else f"index {bad[0]}"
        raise OptimizationAborted(f"non-finite gradient for {who} at iteration {state.iteration}")
    alpha = learning_rate(cfg, state.iteration) if lr is None else lr
    norm = float(np.linalg.norm(grad))
    if cfg.clip and norm > cfg.clip:
        grad = grad * (cfg.clip / norm)
    if cfg.kind == "sgd":
        new = theta - alpha * grad
    else:
        b1, b2 = cfg.betas
        on = np.ones(theta.shape, bool) if active is None else np.asarray(active, bool)
        if state.m is None:
            state.m, state.v = np.zeros_like(theta), np.zeros_like(theta)
            state.steps = np.zeros(theta.shape, np.int64)
        state.m = np.where(on, b1 * state.m + (1 - b1) * grad, state.m)
        state.v = np.where(on, b2 * state.v + (1 - b2) * grad * grad, state.v)
        state.steps = state.steps + on
        t = np.maximum(state.steps, 1)
        mh = state.m / (1 - b1 ** t)
        vh = state.v / (1 - b2 ** t)
        new = np.where(on, theta - alpha * mh / (np.sqrt(vh) + cfg.adam_eps), theta)
    state.iteration += 1
    state.lr = alpha
    return new, state


# ------------------------------------------------------------- main loop


@dataclass
class ReconResult:
    theta: np.ndarray
    theta_init: np.ndarray
    best_loss: float
    history: list  # dicts: iter, loss, track_loss, grad_norm, alpha
    snapshots: list
    status: str  # converged | max_iters | initialized
    optimizer: str
    params: SceneParams

    def named(self, vec=None) -> dict:
        return self.params.unflatten(self.theta if vec is None else vec)


def _phase_mask(params: SceneParams, cfg: OptConfig, it: int) -> np.ndarray:
    if not cfg.phases:
        return params.free
    f1, f2 = cfg.phase_fractions
    if it < f1 * cfg.max_iters:
        groups = ("translation",)
    elif it < (f1 + f2) * cfg.max_iters:
        groups = ("translation", "rotation", "scale")
    else:
        return params.free
    mask = params.group_mask(groups)
    return mask if mask.any() else params.free


def _blur_at(cfg: OptConfig, it: int):
    """Coarse-to-fine Gaussian blur (bins), decaying linearly to the floor."""
    lo = (cfg.blur_min_range_bins, cfg.blur_min_az_bins)
    span = cfg.blur_fraction * cfg.max_iters
    if span <= 0 or it >= span:
        return lo
    k = 1.0 - it / span
    return (lo[0] + max(cfg.blur_range_bins - lo[0], 0.0) * k, lo[1] + max(cfg.blur_az_bins - lo[1], 0.0) * k)


def _cloud_center(cloud: PointCloud) -> np.ndarray:
    w = np.maximum(cloud.intensity, 0.0)
    w = w / w.sum() if w.sum() > 0 else np.full(len(w), 1.0 / len(w))
    return w @ cloud.xyz


def initialize(obs, renderer: Renderer, params: SceneParams, theta, cfar: CFARConfig | None = None,
               prior: bool = False, rounds: int = 2):
    """Initial pose for the first object from the observed point cloud.

    Without a prior the template is registered straight onto the cloud.
    With a prior pose, the template is rendered there and shifted by the
    offset between the observed and simulated cloud centers, which cancels
    the bias of seeing only the radar-facing surfaces.
    """
    cloud = obs if isinstance(obs, PointCloud) else extract_pointcloud(renderer.image(obs), cfar)
    if len(cloud.xyz) == 0:
        raise InitializationError("observation produced an empty point cloud")
    if not prior or isinstance(obs, PointCloud):
        rp = register_init(cloud, params.objects[0].mesh)
        return params.with_pose(theta, 0, translation=rp.translation.value, scale=float(rp.scale.value))
    theta = np.asarray(theta, float).copy()
    target = _cloud_center(cloud)
    s0 = params._slices[0].start
    for _ in range(rounds):
        with ad.Tape():
            sim = extract_pointcloud(renderer.image(renderer.frame(params, theta)), cfar)
        if len(sim.xyz) == 0:
            break
        theta[s0:s0 + 3] += (target - _cloud_center(sim)) * params.free[s0:s0 + 3]
    return theta


def evaluate_loss(renderer: Renderer, params: SceneParams, theta, obs_vol, blur=(0.0, 0.0),
                  with_grad: bool = True, track_blur=None):
    """``(loss, tracking loss, gradient)``; the tracking loss uses ``track_blur``
    (default: same as ``blur``) so values stay comparable across the schedule."""
    track_blur = blur if track_blur is None else tuple(track_blur)
    with ad.Tape():
        th = ad.register_parameter(np.asarray(theta, float)) if with_grad else Var(theta)
        frame = renderer.frame(params, th)
        vol = renderer.image(frame).volume
        loss = volume_loss(vol, obs_vol, blur)
        track = loss if tuple(blur) == track_blur else volume_loss(vol, obs_vol, track_blur)
        reg = 0.0
        for _, dp, _ in params.build(th):
            if dp is not None:
                reg = reg + dp.regularizer()
        total = loss + reg
        g = ad.backward(total)[th] if with_grad and total.node is not None else np.zeros(len(params))
    return float(total.value), float(track.value), np.asarray(g)


def reconstruct(obs, renderer: Renderer, params: SceneParams, cfg: OptConfig, theta0=None,
                cfar: CFARConfig | None = None, log=None) -> ReconResult:
    theta = params.initial.copy() if theta0 is None else np.asarray(theta0, float).copy()
    if isinstance(obs, PointCloud) or cfg.init == "register":
        try:
            theta = initialize(obs, renderer, params, theta, cfar, prior=cfg.prior)
        except InitializationError:
            if not cfg.prior:
                raise
    theta_init = theta.copy()
    if isinstance(obs, PointCloud) or cfg.max_iters == 0:
        return ReconResult(theta, theta_init, math.nan, [], [], "initialized", cfg.kind, params)
    obs_vol = renderer.image(obs).volume.value
    state = OptState(best_theta=theta.copy())
    history, snaps = [], []
    status = "max_iters"
    floor = (cfg.blur_min_range_bins, cfg.blur_min_az_bins)
    final_phase_start = None
    for it in range(cfg.max_iters):
        blur = _blur_at(cfg, it)
        loss, track, g = evaluate_loss(renderer, params, theta, obs_vol, blur, track_blur=floor)
        if not math.isfinite(loss):
            raise OptimizationAborted(f"non-finite loss at iteration {it} (theta={params.unflatten(theta)})")
        active = _phase_mask(params, cfg, it)
        g = g * active
        if track < state.best_loss:
            state.best_loss, state.best_theta = track, theta.copy()
        state.loss_history.append(state.best_loss)
        alpha = learning_rate(cfg, it)
        history.append({"iter": it, "loss": loss, "track_loss": track,
                        "grad_norm": float(np.linalg.norm(g)), "alpha": alpha})
        if cfg.snapshot_every and it % cfg.snapshot_every == 0:
            snaps.append({"iter": it, "theta": params.unflatten(theta)})
        if log is not None:
            log(history[-1])
        if blur == floor and final_phase_start is None:
            final_phase_start = it
        if state.best_loss == 0.0:
            status = "converged"
            break
        if final_phase_start is not None and it - final_phase_start >= cfg.window:
            old = state.loss_history[-1 - cfg.window]
            if old > 0 and (old - state.best_loss) / old < cfg.rel_tol:
                status = "converged"
                break
        state.iteration = it
        theta, state = sgd_step(theta, g, state, cfg, params.names, active=active)
    return ReconResult(state.best_theta, theta_init, state.best_loss, history, snaps, status, cfg.kind,
                       params)


def relative_error(ad_grad, fd_grad):
    """``|ad - fd| / max(|fd|, 1e-3 * max|fd|)`` per entry (floored against all-zero references)."""
    ad_grad, fd_grad = np.asarray(ad_grad, float), np.asarray(fd_grad, float)
    ref = np.maximum(np.abs(fd_grad), 1e-3 * np.max(np.abs(fd_grad), initial=0.0))
    ref = np.where(ref > 0, ref, 1.0)
    return np.abs(ad_grad - fd_grad) / ref


def gradient_check(renderer: Renderer, params: SceneParams, theta, obs: IFFrame, step: float = 1e-7,
                   blur=(0.0, 0.0)) -> list[dict]:
    """AD gradient vs central differences of the full pipeline for every free entry.

    The ray cone is frozen at ``theta`` so both estimates see the same
    sampling; use a renderer with ``hard_forward`` off for smooth checks.
    The default step is small because path phases move by ``2k`` per metre
    of path length, so the loss oscillates on a sub-millimetre scale.
    """
    theta = np.asarray(theta, float)
    r = replace(renderer, cone=renderer.frozen_cone(params, theta))
    obs_vol = r.image(obs).volume.value
    _, _, g = evaluate_loss(r, params, theta, obs_vol, blur)
    idx = np.flatnonzero(params.free)
    fd = np.empty(len(idx))
    for k, i in enumerate(idx):
        tp, tm = theta.copy(), theta.copy()
        tp[i] += step
        tm[i] -= step
        lp = evaluate_loss(r, params, tp, obs_vol, blur, with_grad=False)[0]
        lm = evaluate_loss(r, params, tm, obs_vol, blur, with_grad=False)[0]
        fd[k] = (lp - lm) / (2 * step)
    rel = relative_error(g[idx], fd)
    return [{"parameter": params.names[i], "ad": float(g[i]), "fd": float(fd[k]), "rel_error": float(rel[k])}
            for k, i in enumerate(idx)]


def select_category(obs, renderer: Renderer, candidates: list[SceneParams], cfg: OptConfig,
                    thetas=None) -> tuple[int, list[ReconResult]]:
    """Reconstruct with each template; the argmin final loss wins."""
    results = [reconstruct(obs, renderer, p, cfg, None if thetas is None else thetas[i])
               for i, p in enumerate(candidates)]
    losses = [r.best_loss for r in results]
    return int(np.nanargmin(losses)), results


# ------------------------------------------------------------- evaluation


def depth_map(vertices, mesh: TriangleMesh, array: AntennaArray, extent, resolution: int = 64):
    """Z-buffer depth (along boresight) seen from the radar over a tangent-plane grid.

    ``extent`` is ``(umin, umax, vmin, vmax)`` in tangent coordinates
    (x/z, y/z) of the radar frame. NaN marks uncovered pixels.
    """
    umin, umax, vmin, vmax = extent
    u = np.linspace(umin, umax, resolution)
    v = np.linspace(vmin, vmax, resolution)
    uu, vv = np.meshgrid(u, v, indexing="xy")
    local = np.stack([uu.ravel(), vv.ravel(), np.ones(uu.size)], axis=1)
    local /= np.linalg.norm(local, axis=1, keepdims=True)
    d = local @ array.rotation.T
    o = np.broadcast_to(array.position, d.shape)
    bvh = build_bvh(np.asarray(vertices)[mesh.triangles])
    tri, t, _, _ = closest_hit(o, d, bvh)
    depth = np.where(tri >= 0, t * local[:, 2], np.nan)
    return depth.reshape(resolution, resolution)


def _tangent_extent(points_local, margin=0.05):
    u = points_local[:, 0] / points_local[:, 2]
    v = points_local[:, 1] / points_local[:, 2]
    du, dv = np.ptp(u) * margin + 1e-6, np.ptp(v) * margin + 1e-6
    return (u.min() - du, u.max() + du, v.min() - dv, v.max() + dv)


def ssim(a: np.ndarray, b: np.ndarray, data_range: float = 1.0) -> float:
    """Mean SSIM with an 11x11 Gaussian window (sigma 1.5), K1 = 0.01, K2 = 0.03."""
    c1, c2 = (0.01 * data_range) ** 2, (0.03 * data_range) ** 2
    f = lambda x: ndimage.gaussian_filter(x, 1.5, truncate=3.5, mode="reflect")  # noqa: E731
    mu_a, mu_b = f(a), f(b)
    saa = f(a * a) - mu_a ** 2
    sbb = f(b * b) - mu_b ** 2
    sab = f(a * b) - mu_a * mu_b
    num = (2 * mu_a * mu_b + c1) * (2 * sab + c2)
    den = (mu_a ** 2 + mu_b ** 2 + c1) * (saa + sbb + c2)
    return float(np.mean(num / den))


def evaluate(recon_vertices, truth_vertices, mesh_recon: TriangleMesh, mesh_truth: TriangleMesh,
             array: AntennaArray, tolerances=(0.05, 0.1, 0.2), resolution: int = 64) -> dict:
    """Depth-map metrics between a reconstructed and a reference posed mesh.

    SSIM is computed over depth maps normalized to [0.2, 1] (near = 1) with
    uncovered pixels at 0.
    """
    rv, tv = np.asarray(recon_vertices, float), np.asarray(truth_vertices, float)
    to_local = lambda p: (p - array.position) @ array.rotation  # noqa: E731
    ext = _tangent_extent(np.vstack([to_local(rv), to_local(tv)]))
    dr = depth_map(rv, mesh_recon, array, ext, resolution)
    dt = depth_map(tv, mesh_truth, array, ext, resolution)
    both = np.isfinite(dr) & np.isfinite(dt)
    if not both.any():
        raise MetricsUndefined("reconstruction and reference share no covered depth pixel")
    err = np.abs(dr - dt)[both]
    covered = np.concatenate([dr[np.isfinite(dr)], dt[np.isfinite(dt)]])
    lo, hi = covered.min(), covered.max()
    span = max(hi - lo, 1e-12)
    norm = lambda d: np.where(np.isfinite(d), 1.0 - 0.8 * (d - lo) / span, 0.0)  # noqa: E731
    ext_r, ext_t = np.ptp(rv, axis=0), np.ptp(tv, axis=0)
    size_err = np.abs(ext_r - ext_t) / np.where(ext_t > 0, ext_t, 1.0)
    return {
        "depth_accuracy": {f"{tol:g}": float(np.mean(err <= tol + 1e-12)) for tol in tolerances},
        "size_error": size_err.tolist(),
        "size_error_max": float(size_err.max()),
        "ssim": ssim(norm(dr), norm(dt)),
        "covered_pixels": int(both.sum()),
        "resolution": resolution,
    }


# ------------------------------------------------------------- bundle I/O


def write_bundle(out_dir, result: ReconResult, renderer: Renderer, obs: IFFrame | None,
                 metrics: dict | None = None) -> Path:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    params = result.params
    theta_doc = {
        "optimizer": result.optimizer, "status": result.status, "best_loss": result.best_loss,
        "final": params.unflatten(result.theta), "initial": params.unflatten(result.theta_init),
        "free": params.free_names(),
        "poses": {o.name: params.pose_values(result.theta, k) for k, o in enumerate(params.objects)},
        "snapshots": result.snapshots,
    }
    (out / "theta.json").write_text(json.dumps(theta_doc, indent=2, sort_keys=True) + "\n")
    save_obj(params.objects[0].mesh, out / "recon.obj", params.posed_vertices(result.theta, 0))
    with open(out / "trace.csv", "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["iter", "loss", "grad_norm", "alpha"])
        for row in result.history:
            w.writerow([row["iter"], repr(row["loss"]), repr(row["grad_norm"]), repr(row["alpha"])])
    (out / "metrics.json").write_text(json.dumps(metrics or {}, indent=2, sort_keys=True) + "\n")
    with ad.Tape():
        sim = renderer.frame(params, result.theta)
        save_volume(renderer.image(sim), out / "volume_sim")
    if obs is not None:
        save_volume(renderer.image(obs), out / "volume_obs")
    return out

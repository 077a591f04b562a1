import json
import math
from dataclasses import replace

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st
from skimage.metrics import structural_similarity

from rfd import adgraph as ad
from rfd import meshes
from rfd.antenna import preset
from rfd.ifsignal import ChirpConfig, IFFrame
from rfd.reconstruct import (ObjectSpec, OptConfig, OptimizationAborted, OptState, Renderer, SceneParams,
                             blur_volume, evaluate, evaluate_loss, gradient_check, learning_rate, reconstruct,
                             select_category, sgd_step, spatial_loss, ssim, volume_loss, write_bundle)
from rfd.rfmaterial import lookup
from rfd.tracer import TraceConfig

ARR, CHIRP = preset("awr1843")
TRACE = TraceConfig(rays_per_virtual_element=16, max_bounces=1, random_fraction=0.0)


def cube_params(translation=(1.0, 0.0, 5.0), free=("translation.x", "translation.z", "scale"), mesh=None):
    mesh = mesh or meshes.cube(0.5)
    return SceneParams([ObjectSpec("cube", mesh, lookup("metal"), translation=translation, free=free)])


def render(renderer, params, theta=None):
    with ad.Tape():
        f = renderer.frame(params, params.initial if theta is None else theta)
    return IFFrame.from_array(f.data, f.chirp, f.element_order)


@pytest.fixture(scope="module")
def renderer():
    return Renderer(ARR, CHIRP, TRACE)


@pytest.fixture(scope="module")
def truth_frame(renderer):
    return render(renderer, cube_params())


# --- loss ------------------------------------------------------------------------------


def test_loss_zero_for_identical_frames(renderer, truth_frame):
    loss = spatial_loss(truth_frame, truth_frame, renderer.layout)
    assert float(loss.value) == 0.0


def test_loss_against_empty_observation(renderer, truth_frame):
    vol = renderer.image(truth_frame).data
    loss = float(volume_loss(ad.Var(vol), np.zeros_like(vol)).value)
    assert loss == pytest.approx(np.mean((vol / vol.max()) ** 2), rel=1e-12)


def test_loss_grows_with_offset(renderer, truth_frame):
    near = render(renderer, cube_params((1.0, 0.0, 5.05)))
    far = render(renderer, cube_params((1.0, 0.0, 5.2)))
    l_near = float(spatial_loss(near, truth_frame, renderer.layout).value)
    l_far = float(spatial_loss(far, truth_frame, renderer.layout).value)
    assert 0 < l_near < l_far


@given(st.floats(1e-3, 1e3))
def test_loss_invariant_to_observation_gain(c):
    rng = np.random.default_rng(1)
    a, b = rng.random((8, 3, 1)), rng.random((8, 3, 1))
    base = float(volume_loss(ad.Var(a), b).value)
    assert float(volume_loss(ad.Var(a), c * b).value) == pytest.approx(base, rel=1e-9)
    assert float(volume_loss(ad.Var(c * a), b).value) == pytest.approx(base, rel=1e-9)


def test_loss_rejects_mismatched_chirp(renderer, truth_frame):
    d = CHIRP.to_dict()
    d["chirp_duration"] = 50e-6
    other = IFFrame.from_array(truth_frame.data, ChirpConfig.from_dict(d), truth_frame.element_order)
    with pytest.raises(ValueError, match="chirp_duration"):
        spatial_loss(truth_frame, other, renderer.layout)


def test_blur_identity_and_mass(rng):
    v = rng.random((40, 12, 1))
    np.testing.assert_array_equal(blur_volume(v).value, v)
    const = np.ones((40, 12, 1))
    b = blur_volume(const, 2.0, 1.0).value
    np.testing.assert_allclose(b[10:30, 4:8], 1.0, rtol=1e-12)


# --- optimizer -------------------------------------------------------------------------


def test_sgd_step_example():
    cfg = OptConfig(kind="sgd", schedule="constant", lr=0.1)
    new, state = sgd_step(np.array([1.0]), np.array([0.5]), OptState(), cfg)
    assert new[0] == pytest.approx(0.95, abs=1e-15)
    assert state.iteration == 1
    same, _ = sgd_step(np.array([1.0, 2.0]), np.zeros(2), OptState(), cfg)
    np.testing.assert_array_equal(same, [1.0, 2.0])


def test_gradient_clipping():
    cfg = OptConfig(kind="sgd", schedule="constant", lr=1.0, clip=10.0)
    new, _ = sgd_step(np.zeros(2), np.array([60.0, 80.0]), OptState(), cfg)
    assert np.linalg.norm(new) == pytest.approx(10.0)
    np.testing.assert_allclose(new, [-6.0, -8.0])


@pytest.mark.parametrize("bad", [math.nan, math.inf])
def test_non_finite_gradient_aborts(bad):
    with pytest.raises(OptimizationAborted, match="cube.translation.z"):
        sgd_step(np.zeros(2), np.array([0.0, bad]), OptState(), OptConfig(), names=["cube.x", "cube.translation.z"])


def test_cosine_schedule_endpoints():
    cfg = OptConfig(lr=0.02, max_iters=101, lr_min_fraction=0.05)
    assert learning_rate(cfg, 0) == pytest.approx(0.02)
    assert learning_rate(cfg, 100) == pytest.approx(0.001)
    assert learning_rate(cfg, 50) == pytest.approx(0.0105)


def test_adam_inactive_entries_frozen():
    cfg = OptConfig(kind="adam", schedule="constant", lr=0.1)
    state = OptState()
    theta = np.array([1.0, 1.0])
    for _ in range(3):
        theta, state = sgd_step(theta, np.array([1.0, 1.0]), state, cfg, active=[True, False])
    assert theta[1] == 1.0
    assert theta[0] == pytest.approx(0.7)  # bias-corrected Adam step is lr * sign(g) for a constant g


def test_bad_optimizer_options():
    for kw in (dict(kind="lbfgs"), dict(schedule="step"), dict(init="random")):
        with pytest.raises(ValueError):
            OptConfig(**kw)


# --- parameter vector --------------------------------------------------------------------


def test_flatten_roundtrip():
    p = cube_params(free=("translation", "eps_r"))
    named = p.unflatten(p.initial)
    np.testing.assert_array_equal(p.flatten(named), p.initial)
    assert p.free_names() == ["cube.translation.x", "cube.translation.y", "cube.translation.z", "cube.eps_r"]


def test_eps_r_reparameterization_roundtrip():
    spec = ObjectSpec("w", meshes.wall(), lookup("concrete"), free=("eps_r",))
    p = SceneParams([spec])
    (_, _, mat), = p.build(p.initial)
    assert float(ad._val(mat.eps_r)) == pytest.approx(float(lookup("concrete").eps_r), rel=1e-12)


def test_unknown_free_name():
    with pytest.raises(ValueError, match="unknown free"):
        cube_params(free=("translation.w",))


def test_pose_values_and_with_pose():
    p = cube_params()
    th = p.with_pose(p.initial, 0, translation=(0.0, 1.0, 2.0), scale=2.0)
    pv = p.pose_values(th)
    assert pv["translation"] == [0.0, 1.0, 2.0] and pv["scale"] == pytest.approx(2.0)
    verts = p.posed_vertices(th)
    np.testing.assert_allclose(np.ptp(verts, axis=0), [1.0, 1.0, 1.0], atol=1e-12)


# --- gradients ---------------------------------------------------------------------------


@pytest.fixture(scope="module")
def smooth_setup(truth_frame):
    r = Renderer(ARR, CHIRP, replace(TRACE, hard_forward=False))
    p = cube_params(free=("translation", "scale"))
    th = p.with_pose(p.initial, 0, translation=(1.02, 0.0, 5.03))
    r = replace(r, cone=r.frozen_cone(p, th))
    return r, p, th, r.image(truth_frame).volume.value


def test_descent_direction(smooth_setup):
    r, p, th, ov = smooth_setup
    rng = np.random.default_rng(7)
    for _ in range(20):
        t0 = th + p.free * rng.normal(scale=2e-3, size=len(th))
        loss, _, g = evaluate_loss(r, p, t0, ov)
        step = 1e-5 * g / np.linalg.norm(g)  # 10 um along the negative gradient
        assert evaluate_loss(r, p, t0 - step, ov, with_grad=False)[0] < loss


def test_end_to_end_gradient_check(truth_frame):
    r = Renderer(ARR, CHIRP, replace(TRACE, hard_forward=False))
    p = cube_params(free=("translation.x", "translation.z", "rotation.y", "scale"))
    th = p.with_pose(p.initial, 0, translation=(1.03, 0.0, 4.96))
    rows = gradient_check(r, p, th, truth_frame)
    assert [row["parameter"] for row in rows] == p.free_names()
    for row in rows:
        assert row["rel_error"] < 1e-3, row


# --- reconstruction loop -------------------------------------------------------------------


def test_identical_observation_is_fixed_point(renderer, truth_frame):
    p = cube_params()
    res = reconstruct(truth_frame, renderer, p, OptConfig(init="prior", max_iters=20))
    assert res.status == "converged" and res.best_loss == 0.0
    np.testing.assert_array_equal(res.theta, p.initial)


def test_zero_iterations_only_initializes(renderer, truth_frame):
    res = reconstruct(truth_frame, renderer, cube_params(), OptConfig(max_iters=0))
    assert res.status == "initialized" and res.history == []


def test_short_run_tracks_best_loss(renderer, truth_frame):
    p = cube_params()
    th0 = p.with_pose(p.initial, 0, translation=(1.1, 0.0, 5.15))
    res = reconstruct(truth_frame, renderer, p, OptConfig(kind="adam", lr=0.01, init="prior", max_iters=15,
                                                          snapshot_every=5), theta0=th0)
    track = [h["track_loss"] for h in res.history]
    assert res.best_loss == min(track)
    assert res.best_loss < track[0]
    assert [s["iter"] for s in res.snapshots] == [0, 5, 10]


def test_self_closed_loop(renderer, truth_frame):
    p = cube_params(free=("translation.z",))
    th0 = p.with_pose(p.initial, 0, translation=(1.0, 0.0, 5.1))
    cfg = OptConfig(kind="adam", lr=0.005, init="prior", max_iters=60, blur_range_bins=4, blur_az_bins=1,
                    blur_min_range_bins=2, blur_min_az_bins=0.5)
    res = reconstruct(truth_frame, renderer, p, cfg, theta0=th0)
    err = np.linalg.norm(np.subtract(p.pose_values(res.theta)["translation"], (1.0, 0.0, 5.0)))
    assert err < CHIRP.range_resolution


def test_select_category_prefers_true_shape(renderer):
    truth = render(renderer, cube_params(free=()))
    cands = [cube_params(free=()), SceneParams([ObjectSpec("cyl", meshes.cylinder(0.4, 0.2), lookup("metal"),
                                                           translation=(1.0, 0.0, 5.0))])]
    cfg = OptConfig(init="prior", max_iters=1)
    best, results = select_category(truth, renderer, cands, cfg)
    assert best == 0 and len(results) == 2


# --- evaluation --------------------------------------------------------------------------


def _posed(translation=(0.0, 0.0, 4.0), scale=1.0):
    p = cube_params(translation)
    return p.posed_vertices(p.with_pose(p.initial, 0, scale=scale)), p.objects[0].mesh


def test_evaluate_identity():
    v, m = _posed()
    out = evaluate(v, v, m, m, ARR)
    assert out["depth_accuracy"] == {"0.05": 1.0, "0.1": 1.0, "0.2": 1.0}
    assert out["size_error_max"] == 0.0 and out["ssim"] == pytest.approx(1.0)


def test_evaluate_depth_shift():
    v, m = _posed()
    out = evaluate(v + [0, 0, 0.1], v, m, m, ARR)
    assert out["depth_accuracy"]["0.05"] == 0.0
    assert out["depth_accuracy"]["0.2"] == 1.0
    assert out["size_error_max"] == pytest.approx(0.0, abs=1e-12)


def test_evaluate_scale_error():
    v, m = _posed()
    v2, _ = _posed(scale=1.05)
    out = evaluate(v2, v, m, m, ARR)
    np.testing.assert_allclose(out["size_error"], 0.05, rtol=1e-9)


def test_evaluate_disjoint_raises():
    from rfd.reconstruct import MetricsUndefined
    v, m = _posed((-3.0, 0.0, 4.0))
    w, _ = _posed((3.0, 0.0, 4.0))
    with pytest.raises(MetricsUndefined):
        evaluate(v, w, m, m, ARR, resolution=16)


def test_ssim_matches_skimage(rng):
    a = rng.random((32, 32))
    b = np.clip(a + 0.1 * rng.normal(size=a.shape), 0, 1)
    _, full = structural_similarity(a, b, data_range=1.0, gaussian_weights=True, sigma=1.5,
                                    use_sample_covariance=False, full=True)
    assert ssim(a, b) == pytest.approx(float(np.mean(full)), abs=1e-9)
    assert ssim(a, a) == pytest.approx(1.0)


# --- bundle ------------------------------------------------------------------------------


def test_write_bundle(tmp_path, renderer, truth_frame):
    p = cube_params()
    res = reconstruct(truth_frame, renderer, p, OptConfig(init="prior", max_iters=2))
    write_bundle(tmp_path, res, renderer, truth_frame, {"note": 1})
    names = {f.name for f in tmp_path.iterdir()}
    assert {"theta.json", "recon.obj", "trace.csv", "metrics.json", "volume_sim.f32", "volume_obs.f32"} <= names
    doc = json.loads((tmp_path / "theta.json").read_text())
    assert doc["free"] == p.free_names() and doc["status"] == res.status
    assert (tmp_path / "trace.csv").read_text().splitlines()[0] == "iter,loss,grad_norm,alpha"

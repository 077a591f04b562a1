"""``rfd`` command line: simulate, reconstruct, gradcheck, image.

Exit codes: 0 success, 2 configuration or input error, 3 runtime fault,
4 aborted optimization, 5 failed gradient check.
"""
from __future__ import annotations

import argparse
import json
import os
import sys
from pathlib import Path

import numpy as np

from . import adgraph as ad
from ._accel import set_threads
from .config import ConfigError, SceneConfig
from .ifsignal import ChirpError, FrameFormatError, IFFrame, add_noise, load_frame, read_frame_meta, save_frame
from .imaging import ArrayLayout, CFARConfig, extract_pointcloud, save_pointcloud, save_volume, spatial_image
from .reconstruct import (MetricsUndefined, OptimizationAborted, evaluate, gradient_check, reconstruct,
                          select_category, write_bundle)

EXIT_OK, EXIT_CONFIG, EXIT_RUNTIME, EXIT_ABORTED, EXIT_GRADCHECK = 0, 2, 3, 4, 5


class InputError(ValueError):
    pass


def _dims(text):
    if text is None:
        return None
    try:
        dims = [int(x) for x in text.split(",")]
    except ValueError:
        raise argparse.ArgumentTypeError(f"--dims expects three integers, got {text!r}") from None
    if len(dims) != 3 or min(dims) < 1:
        raise argparse.ArgumentTypeError(f"--dims expects three positive integers, got {text!r}")
    return dims


def _write_json(path: Path, doc):
    path.write_text(json.dumps(doc, indent=2, sort_keys=True) + "\n")


def _load_config(args) -> SceneConfig:
    cfg = SceneConfig.load(args.config)
    return cfg.with_overrides(seed=args.seed, max_iters=getattr(args, "max_iters", None),
                              dims=getattr(args, "dims", None))


def _frame_extra(cfg: SceneConfig, renderer) -> dict:
    return {"array_layout": renderer.layout.to_dict(), "seed": cfg.seed,
            "snr_db": cfg.data["noise"]["snr_db"], "radar_preset": cfg.data["radar"]["preset"]}


def simulate_frame(cfg: SceneConfig, which: str = "truth") -> IFFrame:
    renderer = cfg.renderer()
    params = cfg.params(which)
    with ad.Tape():
        frame = renderer.frame(params, params.initial)
    frame = IFFrame.from_array(frame.data, frame.chirp, frame.element_order)
    snr = cfg.data["noise"]["snr_db"]
    if snr is not None:
        frame = add_noise(frame, float(snr), cfg.seed + 1)
    return frame


def cmd_simulate(args) -> int:
    cfg = _load_config(args)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    (out / "config.effective.json").write_text(cfg.dumps())
    renderer = cfg.renderer()
    frame = simulate_frame(cfg)
    save_frame(frame, out / "observation", extra=_frame_extra(cfg, renderer))
    image = renderer.image(frame)
    cloud = extract_pointcloud(image, cfg.cfar())
    save_volume(image, out / "volume")
    save_pointcloud(cloud, out / "pointcloud.csv")
    peak = image.peak()
    summary = {"peak_range_m": float(image.range_axis[peak[0]]), "peak_index": [int(i) for i in peak],
               "detections": cloud.n_clusters, "points": len(cloud)}
    _write_json(out / "summary.json", summary)
    print(f"simulated {frame.shape[0]} x {frame.shape[1]} IF samples; peak at "
          f"{summary['peak_range_m']:.4f} m; {summary['detections']} detection(s)")
    return EXIT_OK


def _check_obs_chirp(frame: IFFrame, cfg: SceneConfig):
    _, chirp = cfg.radar()
    if frame.chirp != chirp:
        for key, value in chirp.to_dict().items():
            seen = frame.chirp.to_dict()[key]
            if seen != value:
                raise InputError(f"observation chirp {key}={seen} does not match config {key}={value}")
    renderer_order = [tuple(e) for e in cfg.radar()[0].element_order()]
    if [tuple(e) for e in frame.element_order] != renderer_order:
        raise InputError("observation element_order does not match the configured array")


def _pose_errors(params, theta, truth_params) -> dict:
    est = params.pose_values(theta, 0)
    tru = truth_params.pose_values(truth_params.initial, 0)
    return {"translation_error": float(np.linalg.norm(np.subtract(est["translation"], tru["translation"]))),
            "scale_error": float(abs(est["scale"] / tru["scale"] - 1.0))}


def cmd_reconstruct(args) -> int:
    cfg = _load_config(args)
    obs = load_frame(args.obs)
    _check_obs_chirp(obs, cfg)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    (out / "config.effective.json").write_text(cfg.dumps())
    renderer = cfg.renderer()
    opt = cfg.opt_config()
    metrics: dict = {}
    if cfg.data["templates"]:
        candidates = cfg.template_params()
        best, results = select_category(obs, renderer, candidates, opt)
        result = results[best]
        metrics["category"] = candidates[best].objects[0].name
        metrics["category_losses"] = {c.objects[0].name: r.best_loss for c, r in zip(candidates, results)}
    else:
        result = reconstruct(obs, renderer, cfg.params("pose"), opt, cfar=cfg.cfar())
    has_truth = any(o["truth_pose"] is not None for o in cfg.data["objects"])
    if has_truth:
        truth = cfg.params("truth")
        metrics.update(_pose_errors(result.params, result.theta, truth))
        array, _ = cfg.radar()
        ev = cfg.data["evaluate"]
        try:
            metrics.update(evaluate(result.params.posed_vertices(result.theta, 0),
                                    truth.posed_vertices(truth.initial, 0), result.params.objects[0].mesh,
                                    truth.objects[0].mesh, array, tuple(ev["tolerances"]), int(ev["resolution"])))
        except MetricsUndefined as exc:
            metrics["evaluate_error"] = str(exc)
    metrics.update({"best_loss": result.best_loss, "iterations": len(result.history), "status": result.status,
                    "optimizer": result.optimizer})
    write_bundle(out, result, renderer, obs, metrics)
    print(f"reconstruct: {result.status} after {len(result.history)} iteration(s); best loss {result.best_loss:.6g}")
    if "translation_error" in metrics:
        print(f"translation error {metrics['translation_error']:.4f} m; scale error {metrics['scale_error']:.4f}")
    return EXIT_OK


def cmd_gradcheck(args) -> int:
    cfg = _load_config(args)
    gc = cfg.data["gradcheck"]
    renderer = cfg.renderer(smooth=bool(gc["smooth"]))
    params = cfg.params("pose")
    if not params.free.any():
        raise ConfigError("gradcheck needs at least one free parameter", "objects[].free")
    truth_cfg = cfg if any(o["truth_pose"] is not None for o in cfg.data["objects"]) else None
    if truth_cfg is not None:
        truth = cfg.params("truth")
        with ad.Tape():
            obs = renderer.frame(truth, truth.initial)
    else:  # observation from a fixed offset of the evaluation point
        shifted = params.initial.copy()
        s0 = params.index[f"{params.objects[0].name}.translation.z"]
        shifted[s0] += 0.05
        with ad.Tape():
            obs = renderer.frame(params, shifted)
    obs = IFFrame.from_array(obs.data, obs.chirp, obs.element_order)
    rows = gradient_check(renderer, params, params.initial, obs, float(gc["step"]))
    tol = float(gc["tolerance"])
    print(f"{'parameter':<32} {'ad':>14} {'fd':>14} {'rel_error':>10}")
    for r in rows:
        flag = "" if r["rel_error"] < tol else "  FAIL"
        print(f"{r['parameter']:<32} {r['ad']:>14.6e} {r['fd']:>14.6e} {r['rel_error']:>10.2e}{flag}")
    if args.out:
        out = Path(args.out)
        out.mkdir(parents=True, exist_ok=True)
        (out / "config.effective.json").write_text(cfg.dumps())
        _write_json(out / "gradcheck.json", {"tolerance": tol, "rows": rows})
    failed = [r["parameter"] for r in rows if not r["rel_error"] < tol]
    if failed:
        print(f"gradient check failed for: {', '.join(failed)}", file=sys.stderr)
        return EXIT_GRADCHECK
    return EXIT_OK


def cmd_image(args) -> int:
    obs = load_frame(args.obs)
    meta = read_frame_meta(args.obs)
    if args.config:
        cfg = _load_config(args)
        layout = cfg.renderer().layout
        cfar = cfg.cfar()
        window = cfg.data["imaging"]["window"]
    elif "array_layout" in meta:
        layout = ArrayLayout.from_dict(meta["array_layout"])
        cfar, window = CFARConfig(), "hann"
    else:
        raise InputError("observation sidecar has no array_layout; pass --config")
    dims = tuple(args.dims) if args.dims else None
    if dims is not None and ((dims[1] > 1 and layout.n_x == 1) or (dims[2] > 1 and layout.n_y == 1)):
        dims = (dims[0], dims[1] if layout.n_x > 1 else 1, dims[2] if layout.n_y > 1 else 1)
    image = spatial_image(obs, layout, dims, window)
    cloud = extract_pointcloud(image, cfar)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    save_volume(image, out / "volume")
    save_pointcloud(cloud, out / "pointcloud.csv")
    _write_json(out / "summary.json", {"shape": list(image.shape), "detections": cloud.n_clusters,
                                       "points": len(cloud)})
    print(f"volume {tuple(image.shape)}; {cloud.n_clusters} detection(s)")
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="rfd", description="Differentiable FMCW radar simulation and inversion.")
    sub = p.add_subparsers(dest="command", required=True)

    def common(sp, config_required=True):
        sp.add_argument("--config", required=config_required, help="scene configuration (JSON)")
        sp.add_argument("--seed", type=int, default=None, help="override the config seed")
        sp.add_argument("--threads", type=int, default=None, help="worker threads (default: RFD_THREADS)")

    sp = sub.add_parser("simulate", help="render an observation from the configured scene")
    common(sp)
    sp.add_argument("--out", required=True)
    sp.add_argument("--dims", type=_dims, default=None)
    sp.set_defaults(func=cmd_simulate)

    sp = sub.add_parser("reconstruct", help="fit scene parameters to an observation")
    common(sp)
    sp.add_argument("--obs", required=True, help="observation stem (<stem>.iq + <stem>.json)")
    sp.add_argument("--out", required=True)
    sp.add_argument("--max-iters", type=int, default=None)
    sp.add_argument("--dims", type=_dims, default=None)
    sp.set_defaults(func=cmd_reconstruct)

    sp = sub.add_parser("gradcheck", help="compare AD gradients with central differences")
    common(sp)
    sp.add_argument("--out", default=None)
    sp.add_argument("--dims", type=_dims, default=None)
    sp.set_defaults(func=cmd_gradcheck)

    sp = sub.add_parser("image", help="spatial image and point cloud of an observation")
    common(sp, config_required=False)
    sp.add_argument("--obs", required=True)
    sp.add_argument("--out", required=True)
    sp.add_argument("--dims", type=_dims, default=None)
    sp.set_defaults(func=cmd_image)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return EXIT_OK if exc.code == 0 else EXIT_CONFIG
    threads = args.threads or os.environ.get("RFD_THREADS")
    if threads:
        set_threads(int(threads))
    try:
        return args.func(args)
    except (ConfigError, ChirpError, FrameFormatError, InputError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except OptimizationAborted as exc:
        print(f"optimization aborted: {exc}", file=sys.stderr)
        return EXIT_ABORTED
    except Exception as exc:  # noqa: BLE001 - mapped to the runtime-fault exit code
        print(f"runtime fault: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())

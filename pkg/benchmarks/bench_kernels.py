"""Compare the numba and numpy backends on the hot kernels.

    python benchmarks/bench_kernels.py [--repeat 5]

Prints the median wall time per kernel and backend, and checks that both
backends return the same answer.
"""
import argparse
import statistics
import time

import numpy as np

from rfd import meshes
from rfd.geometry.bvh import build_bvh
from rfd.geometry.kernels import brute_force_hit, closest_hit
from rfd.ifsignal import ChirpConfig, PathBatch, synthesize


def timed(fn, repeat):
    fn()  # warm-up (numba compilation, caches)
    times = []
    for _ in range(repeat):
        t0 = time.perf_counter()
        out = fn()
        times.append(time.perf_counter() - t0)
    return statistics.median(times), out


def ray_problem(n_rays=20000, seed=0):
    rng = np.random.default_rng(seed)
    mesh = meshes.random_triangles(2000, seed=seed, spread=1.0, size=0.1, center=(0, 0, 4))
    tv = mesh.vertices[mesh.triangles]
    d = rng.normal(size=(n_rays, 3)) * [0.15, 0.15, 0.0] + [0, 0, 1.0]
    d /= np.linalg.norm(d, axis=1, keepdims=True)
    return np.zeros((n_rays, 3)), d, tv


def path_problem(n_paths=2000, seed=0):
    rng = np.random.default_rng(seed)
    chirp = ChirpConfig(77e9, 4e9, 40e-6, 512, 12.8e6)
    paths = PathBatch.from_arrays(rng.uniform(5e-9, 60e-9, n_paths),
                                  rng.normal(size=n_paths) + 1j * rng.normal(size=n_paths),
                                  rng.integers(0, 12, n_paths), 12)
    return paths, chirp


def main(argv=None):
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--repeat", type=int, default=5)
    args = ap.parse_args(argv)

    o, d, tv = ray_problem()
    bvh = build_bvh(tv)
    paths, chirp = path_problem()
    o_small, d_small = o[:2000], d[:2000]
    cases = {
        "closest_hit (BVH, 20k rays, 2k tris)": lambda b: closest_hit(o, d, bvh, backend=b)[:2],
        "brute_force_hit (2k rays, 2k tris)": lambda b: brute_force_hit(o_small, d_small, tv, backend=b)[:2],
        "synthesize (2k paths, 12 x 512)": lambda b: (synthesize(paths, chirp, backend=b).data,),
    }
    print(f"{'kernel':<40} {'numpy [ms]':>12} {'numba [ms]':>12} {'speedup':>8}")
    for name, fn in cases.items():
        t_np, r_np = timed(lambda: fn("numpy"), args.repeat)
        t_nb, r_nb = timed(lambda: fn("numba"), args.repeat)
        for a, b in zip(r_np, r_nb):
            np.testing.assert_allclose(a, b, rtol=1e-9, atol=1e-12)
        print(f"{name:<40} {t_np * 1e3:>12.2f} {t_nb * 1e3:>12.2f} {t_np / t_nb:>7.1f}x")


if __name__ == "__main__":
    main()

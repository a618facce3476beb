"""Time the compiled kernels against the numpy fallback.

    python benchmarks/bench_kernels.py [--repeat N] [--scale S]

Prints one row per kernel: best-of-N wall time for each backend and the ratio.
"""

import argparse
import time

import numpy as np

from refrax import kernels
from refrax.geometry import Accel, Medium, MediumMap, make_sphere
from refrax.lightpath import Scene
from refrax.renderer import trace_for_mode


def best_of(fn, repeat):
    times = []
    for _ in range(repeat):
        t0 = time.perf_counter()
        fn()
        times.append(time.perf_counter() - t0)
    return min(times)


def cases(scale, rng):
    n = int(20_000 * scale)
    mesh = make_sphere(0.5, 4)
    accel = Accel(mesh)
    o = rng.uniform(-1.5, 1.5, (n, 3))
    d = rng.normal(size=(n, 3))
    d /= np.linalg.norm(d, axis=1, keepdims=True)
    t0, t1 = np.zeros(n), np.full(n, np.inf)

    def bvh(be):
        accel._run(be, o, d, t0, t1)

    degree, res = 2, 64
    nc = 1 + 3 * (degree + 1) ** 2
    grid = rng.normal(size=(res, res, res, nc))
    pts = rng.uniform(-1, 1, (4 * n, 3))
    dirs = rng.normal(size=(4 * n, 3))
    dirs /= np.linalg.norm(dirs, axis=1, keepdims=True)
    lo, hi = np.full(3, -1.0), np.full(3, 1.0)
    rgb, sigma, valid = np.empty((4 * n, 3)), np.empty(4 * n), np.empty(4 * n, np.uint8)

    def forward(be):
        be.field_forward(grid, pts, dirs, lo, hi, degree, True, rgb, sigma, valid)

    g_rgb, g_sigma = rng.normal(size=(4 * n, 3)), rng.normal(size=4 * n)
    acc = np.zeros_like(grid)

    def backward(be):
        be.field_backward(acc, pts, dirs, lo, hi, degree, rgb, sigma, g_rgb, g_sigma)

    flat = grid.reshape(-1).copy()
    m, v = np.zeros_like(flat), np.zeros_like(flat)
    lr = np.full(nc, 1e-3)

    def adam(be):
        be.adam_step(flat, np.ones_like(flat), m, v, lr, nc, 0.9, 0.99, 1e-15, 10)

    scene = Scene(mesh, MediumMap({1: Medium(1.5)}))
    k = n // 4
    oo = np.tile([0.0, 0, -1.5], (k, 1))
    dd = np.c_[rng.normal(0, 0.2, (k, 2)), np.ones(k)]
    dd /= np.linalg.norm(dd, axis=1, keepdims=True)
    paths = trace_for_mode(scene, oo, dd).refraction
    ts = np.sort(rng.uniform(0, 4, (k, 128)), axis=1)
    pos, pd, pm = np.empty((k, 128, 3)), np.empty((k, 128, 3)), np.empty((k, 128), np.int64)
    c = np.ascontiguousarray

    def samples(be):
        be.path_samples(c(paths.vertices), c(paths.directions), c(paths.tau), c(paths.media),
                        ts, pos, pd, pm)

    a = np.sort(rng.random((k, 64)), axis=1)
    b = np.sort(rng.random((k, 64)), axis=1)
    merged = np.empty((k, 128))

    def merge(be):
        be.merge_sorted(a, b, merged)

    return [(f"bvh_intersect ({n} rays)", bvh), (f"field_forward ({4 * n} pts)", forward),
            (f"field_backward ({4 * n} pts)", backward), (f"adam_step ({flat.size} params)", adam),
            (f"path_samples ({k}x128)", samples), (f"merge_sorted ({k}x128)", merge)]


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--repeat", type=int, default=3)
    ap.add_argument("--scale", type=float, default=1.0)
    args = ap.parse_args()
    compiled = kernels.get_backend("compiled")
    python = kernels.get_backend("python")
    print(f"{'kernel':<34}{'compiled s':>12}{'python s':>12}{'speedup':>10}")
    for name, fn in cases(args.scale, np.random.default_rng(0)):
        tc = best_of(lambda: fn(compiled), args.repeat)
        tp = best_of(lambda: fn(python), args.repeat)
        print(f"{name:<34}{tc:>12.4f}{tp:>12.4f}{tp / tc:>9.1f}x")


if __name__ == "__main__":
    main()

"""Time each compiled kernel against its numpy fallback.

    python3 benchmarks/bench_kernels.py --size 64 --repeat 5

Numbers are the best of ``--repeat`` runs after one warm-up call, which also
absorbs the numba compile.
"""

import argparse
import time

import numpy as np

from vesselforge import _accel, background as bg, kernels, volume as vol


def _cases(n, g):
    img = g.random((n, n, n)).astype(np.float32)
    labels = kernels.voronoi_labels((n, n, n), g.uniform(0, n, (6, 3)))
    k = 6
    perms = np.stack([np.stack([g.permutation(256)] * 2).ravel() for _ in range(k * 3)]).reshape(k, 3, 512)
    freqs = np.tile(0.08 * 2.0 ** np.arange(3), (k, 1))
    amps = np.tile(0.5 ** np.arange(3), (k, 1))
    offsets = g.uniform(0, 100, (k, 3, 3))
    plain = np.array([True] + [False] * (k - 1))
    tex_args = (labels, plain, np.full(k, 0.3), np.zeros(k), np.ones(k), perms, freqs, amps, offsets, np.full(k, 3))
    control = g.normal(0, 1, (3, 8, 8, 8))
    pts = g.uniform(0, n, (n * n * n, 3))
    tables = [np.tile(g.permutation(256), 2) for _ in range(3)]
    xp = np.linspace(0, 1, 6)
    fp = np.sort(g.random(6))
    return {
        "fractal_noise": lambda: bg.fractal_noise(pts, tables, 0.1, 0.5),
        "textured_regions": lambda: kernels.textured_regions(*tex_args),
        "voronoi_labels": lambda: kernels.voronoi_labels((n, n, n), g.uniform(0, n, (12, 3))),
        "warp_control": lambda: vol.warp_control(img, control, 2.0),
        "median_excess": lambda: kernels.median_excess(img, 5, 0.1),
        "gaussian_smooth": lambda: vol.gaussian_smooth(img, 1.5),
        "histogram_remap": lambda: kernels.histogram_remap(img, 0.0, 1.0, xp, fp),
    }


def _best(fn, repeat):
    fn()
    times = []
    for _ in range(repeat):
        t0 = time.perf_counter()
        fn()
        times.append(time.perf_counter() - t0)
    return min(times)


def main(argv=None):
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--size", type=int, default=64)
    ap.add_argument("--repeat", type=int, default=3)
    ap.add_argument("--only", nargs="*", help="kernel names to run")
    args = ap.parse_args(argv)
    if not _accel.HAS_NUMBA:
        raise SystemExit("numba is not installed; nothing to compare")
    g = np.random.default_rng(0)
    cases = _cases(args.size, g)
    names = args.only or list(cases)
    previous = _accel.backend()
    print(f"{'kernel':<18} {'numba ms':>10} {'numpy ms':>10} {'speed-up':>9}   ({args.size}^3)")
    try:
        for name in names:
            res = {}
            for b in ("numba", "numpy"):
                _accel.set_backend(b)
                res[b] = _best(cases[name], args.repeat) * 1e3
            print(f"{name:<18} {res['numba']:>10.1f} {res['numpy']:>10.1f} {res['numpy'] / res['numba']:>8.1f}x")
    finally:
        _accel.set_backend(previous)


if __name__ == "__main__":
    main()

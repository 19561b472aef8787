"""Time the compiled and pure-Python geometry kernels on the same inputs.

    python3 benchmarks/bench_kernels.py [--pairs 2000] [--polys 200] [--size 256]

Both backends must produce identical results; the script checks that before
printing timings.
"""

from __future__ import annotations

import argparse
import math
import time

import numpy as np

from rsvlts.kernels import available_backends


def _box(rng, size):
    cx, cy = rng.uniform(0.2 * size, 0.8 * size, 2)
    w, h = rng.uniform(4, size / 3, 2)
    t = rng.uniform(-math.pi / 2, math.pi / 2)
    c, s = math.cos(t), math.sin(t)
    pts = [(-w / 2, -h / 2), (w / 2, -h / 2), (w / 2, h / 2), (-w / 2, h / 2)]
    return [cx + x * c - y * s for x, y in pts], [cy + x * s + y * c for x, y in pts]


def _poly(rng, size):
    n = int(rng.integers(3, 24))
    ang = np.sort(rng.uniform(0, 2 * math.pi, n))
    r = rng.uniform(0.1, 0.45, n) * size
    return list(size / 2 + r * np.cos(ang)), list(size / 2 + r * np.sin(ang))


def _time(fn, repeat=3):
    best = math.inf
    for _ in range(repeat):
        t0 = time.perf_counter()
        out = fn()
        best = min(best, time.perf_counter() - t0)
    return best, out


def main(argv=None):
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--pairs", type=int, default=2000)
    ap.add_argument("--polys", type=int, default=200)
    ap.add_argument("--size", type=int, default=256)
    ap.add_argument("--seed", type=int, default=0)
    args = ap.parse_args(argv)

    rng = np.random.default_rng(args.seed)
    pairs = [(_box(rng, args.size), _box(rng, args.size)) for _ in range(args.pairs)]
    polys = [_poly(rng, args.size) for _ in range(args.polys)]

    backends = available_backends()
    results = {}
    for name, mod in backends.items():
        t_iou, areas = _time(lambda: [mod.intersection_area(a[0], a[1], b[0], b[1]) for a, b in pairs])
        t_ras, rasters = _time(lambda: [bytes(mod.rasterize(x, y, args.size, args.size)) for x, y in polys])
        results[name] = (t_iou, t_ras, areas, rasters)

    names = list(results)
    for other in names[1:]:
        assert results[other][2] == results[names[0]][2], "intersection areas differ between backends"
        assert results[other][3] == results[names[0]][3], "rasters differ between backends"

    print(f"{'backend':<8} {'clip+area (%d pairs)' % args.pairs:>24} {'rasterize (%d polys)' % args.polys:>24}")
    for name, (t_iou, t_ras, _, _) in results.items():
        print(f"{name:<8} {t_iou * 1e3:>21.1f} ms {t_ras * 1e3:>21.1f} ms")
    if "cython" in results:
        py, cy = results["python"], results["cython"]
        print(f"speedup  {py[0] / cy[0]:>23.1f}x {py[1] / cy[1]:>23.1f}x")
    else:
        print("compiled backend not built; only the pure-Python twin was timed")


if __name__ == "__main__":
    main()

"""Time the compiled geometry kernels against the pure-Python fallback.

    python3 benchmarks/bench_geometry.py --boxes 2000 --k 16 --top 15
"""
import argparse
import sys
import timeit

import numpy as np

from pfan import _geometry_py

try:
    from pfan import _geometry_kernels
except ImportError:
    _geometry_kernels = None


def random_boxes(rng, n, width, height):
    x = np.sort(rng.integers(0, width + 1, (n, 2)), axis=1)
    y = np.sort(rng.integers(0, height + 1, (n, 2)), axis=1)
    x[:, 1] = np.maximum(x[:, 1], x[:, 0] + 1).clip(max=width)
    y[:, 1] = np.maximum(y[:, 1], y[:, 0] + 1).clip(max=height)
    x[:, 0] = np.minimum(x[:, 0], x[:, 1] - 1)
    y[:, 0] = np.minimum(y[:, 0], y[:, 1] - 1)
    return np.stack([x[:, 0], y[:, 0], x[:, 1], y[:, 1]], axis=1)


def best_of(fn, repeat):
    return min(timeit.repeat(fn, number=1, repeat=repeat))


def main(argv=None):
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--boxes", type=int, default=2000)
    ap.add_argument("--width", type=int, default=640)
    ap.add_argument("--height", type=int, default=480)
    ap.add_argument("--k", type=int, default=16)
    ap.add_argument("--top", type=int, default=15)
    ap.add_argument("--repeat", type=int, default=5)
    ap.add_argument("--seed", type=int, default=0)
    args = ap.parse_args(argv)

    if _geometry_kernels is None:
        print("compiled kernels not built; run `pip install -e . --no-build-isolation` first", file=sys.stderr)
        return 1

    boxes = random_boxes(np.random.default_rng(args.seed), args.boxes, args.width, args.height)
    dims = (args.width, args.height, args.k)
    counts = _geometry_py.overlap_counts(boxes, *dims)
    # both backends must agree before timing means anything
    assert np.array_equal(counts, _geometry_kernels.overlap_counts(boxes, *dims))
    assert np.array_equal(_geometry_py.select_top(counts, args.top), _geometry_kernels.select_top(counts, args.top))

    print(f"{args.boxes} boxes, K={args.k}, L={args.top}, best of {args.repeat}")
    print(f"{'kernel':<16}{'python ms':>12}{'compiled ms':>14}{'speedup':>10}")
    for name, call in [
        ("overlap_counts", lambda mod: mod.overlap_counts(boxes, *dims)),
        ("select_top", lambda mod: mod.select_top(counts, args.top)),
    ]:
        py = best_of(lambda: call(_geometry_py), args.repeat)
        cy = best_of(lambda: call(_geometry_kernels), args.repeat)
        print(f"{name:<16}{py * 1e3:>12.2f}{cy * 1e3:>14.3f}{py / cy:>9.1f}x")
    return 0


if __name__ == "__main__":
    sys.exit(main())

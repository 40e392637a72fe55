"""Time the numba and numpy interpolation kernels on the same inputs.

    python benchmarks/bench_kernels.py [--N 32] [--images 256] [--repeat 3]
"""

import argparse
import time

import numpy as np

from lrh import _kernels
from lrh.projection import BatchProjector
from lrh.simulator import random_rotvecs


def _best(fn, repeat):
    times = []
    for _ in range(repeat):
        t0 = time.perf_counter()
        fn()
        times.append(time.perf_counter() - t0)
    return min(times)


def main(argv=None):
    p = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    p.add_argument("--N", type=int, default=32)
    p.add_argument("--images", type=int, default=256)
    p.add_argument("--rank", type=int, default=3)
    p.add_argument("--repeat", type=int, default=3)
    args = p.parse_args(argv)

    rng = np.random.default_rng(0)
    thetas = random_rotvecs([np.random.default_rng(i) for i in range(args.images)])
    op = BatchProjector(args.N, thetas)
    M, K = op.M, args.rank + 1
    vols = rng.normal(size=(K, M, M, M)) + 1j * rng.normal(size=(K, M, M, M))
    vals = rng.normal(size=(K, len(op.coords))) + 0j
    cases = {
        "gather trilinear": lambda nb: _kernels.gather(vols, op.coords, "trilinear", nb),
        "scatter trilinear": lambda nb: _kernels.scatter(vals, op.coords, M, "trilinear", use_numba=nb),
        "gather+grad trilinear": lambda nb: _kernels.gather_grad(vols, op.coords, nb),
        "gather nearest": lambda nb: _kernels.gather(vols, op.coords, "nearest", nb),
        "scatter nearest": lambda nb: _kernels.scatter(vals, op.coords, M, "nearest", use_numba=nb),
    }
    print(f"N={args.N} images={args.images} volumes={K} samples={len(op.coords)} numba={_kernels.HAVE_NUMBA}")
    print(f"{'kernel':24s} {'numpy [s]':>10s} {'numba [s]':>10s} {'speedup':>8s}")
    for name, fn in cases.items():
        t_np = _best(lambda: fn(False), args.repeat)
        if _kernels.HAVE_NUMBA:
            fn(True)  # compile
            t_nb = _best(lambda: fn(True), args.repeat)
            print(f"{name:24s} {t_np:10.4f} {t_nb:10.4f} {t_np / t_nb:8.1f}")
        else:
            print(f"{name:24s} {t_np:10.4f} {'-':>10s} {'-':>8s}")


if __name__ == "__main__":
    main()

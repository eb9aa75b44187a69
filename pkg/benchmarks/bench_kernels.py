"""Time the numba and numpy implementations of each hot kernel.

    python3 benchmarks/bench_kernels.py [--repeat 20]

Both paths are imported from the same module; the numba versions are
compiled (and checked against numpy) before timing.  With
DESKNAS_DISABLE_NUMBA=1 only the numpy column is reported.
"""

from __future__ import annotations

import argparse
import timeit

import numpy as np

from desknas import _kernels as K


def cases(rng):
    xp = rng.normal(size=(128, 36, 96)).astype(np.float32)
    w = rng.normal(size=(5, 96)).astype(np.float32)
    dy = rng.normal(size=(128, 16, 96)).astype(np.float32)
    f = np.column_stack([-rng.uniform(size=500), rng.uniform(1, 10, 500)])
    x = rng.integers(0, 3, size=(2400, 15)).astype(np.float64)
    y = rng.normal(size=2400)
    return {
        "dwconv_fwd (B128 L36 C96 k5 s2)": (K.dwconv_fwd_np, K.dwconv_fwd_nb, (xp, w, 2, 16)),
        "dwconv_bwd (B128 L36 C96 k5 s2)": (K.dwconv_bwd_np, K.dwconv_bwd_nb, (xp, w, dy, 2)),
        "front_ranks (n=500)": (K.front_ranks_np, K.front_ranks_nb, (f,)),
        "best_split (n=2400, d=15)": (K.best_split_np, K.best_split_nb, (x, y, 5)),
    }


def _same(a, b):
    a, b = (a if isinstance(a, tuple) else (a,)), (b if isinstance(b, tuple) else (b,))
    return all(np.allclose(u, v, rtol=1e-4, atol=1e-4) for u, v in zip(a, b))


def main(argv=None):
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--repeat", type=int, default=20)
    args = ap.parse_args(argv)
    rng = np.random.default_rng(0)
    print(f"numba available: {K.HAVE_NUMBA}")
    print(f"{'kernel':36s} {'numpy ms':>10s} {'numba ms':>10s} {'speedup':>8s}")
    for name, (f_np, f_nb, a) in cases(rng).items():
        t_np = min(timeit.repeat(lambda: f_np(*a), number=1, repeat=args.repeat)) * 1e3
        if K.HAVE_NUMBA:
            if not _same(f_np(*a), f_nb(*a)):  # also triggers compilation
                raise SystemExit(f"{name}: numba and numpy results differ")
            t_nb = min(timeit.repeat(lambda: f_nb(*a), number=1, repeat=args.repeat)) * 1e3
            print(f"{name:36s} {t_np:10.3f} {t_nb:10.3f} {t_np / t_nb:7.1f}x")
        else:
            print(f"{name:36s} {t_np:10.3f} {'-':>10s} {'-':>8s}")


if __name__ == "__main__":
    main()

"""Time the numba and numpy kernel paths on the same inputs and check they agree.

    python benchmarks/bench_kernels.py [--repeats N]

Both implementations are called directly, so one process measures both
regardless of ``USTR_DISABLE_NUMBA``.
"""

from __future__ import annotations

import argparse
import time

import numpy as np

from ustr import _kernels as K


def _best_of(fn, repeats):
    best = float("inf")
    for _ in range(repeats):
        t0 = time.perf_counter()
        fn()
        best = min(best, time.perf_counter() - t0)
    return best


def _finite_diff(a, b):
    # -inf cells are compared for equality, finite cells by absolute difference
    if not np.array_equal(np.isfinite(a), np.isfinite(b)):
        return float("inf")
    f = np.isfinite(a)
    return float(np.abs(a[f] - b[f]).max()) if f.any() else 0.0


def lattice_inputs(T, U, seed=0):
    rng = np.random.default_rng(seed)
    lp = rng.normal(size=(T, U + 1, 8))
    lp -= np.log(np.exp(lp).sum(axis=-1, keepdims=True))
    return lp[:, :, 0].copy(), lp[:, :U, 1].copy()


def main(argv=None):
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--repeats", type=int, default=5)
    args = ap.parse_args(argv)
    if not K.HAVE_NUMBA:
        print("numba unavailable or disabled; only the numpy path can be timed")

    rows = []
    for T, U in ((36, 18), (80, 40), (200, 100)):
        lb, ll = lattice_inputs(T, U)
        ref = K._lattice_numpy(lb, ll)
        entry = {"kernel": f"lattice T={T} U={U}", "numpy": _best_of(lambda: K._lattice_numpy(lb, ll), args.repeats)}
        if K.HAVE_NUMBA:
            K._lattice_numba(lb, ll)  # compile
            out = K._lattice_numba(lb, ll)
            entry["numba"] = _best_of(lambda: K._lattice_numba(lb, ll), args.repeats)
            entry["max_diff"] = max(_finite_diff(a, b) for a, b in zip(out, ref))
        rows.append(entry)

    rng = np.random.default_rng(1)
    for n in (10, 50, 200):
        r, h = rng.integers(0, 20, size=n), rng.integers(0, 20, size=n + 3)
        entry = {"kernel": f"edit_table n={n}", "numpy": _best_of(lambda: K._edit_table_numpy(r, h), args.repeats)}
        if K.HAVE_NUMBA:
            K._edit_table_numba(r, h)
            entry["numba"] = _best_of(lambda: K._edit_table_numba(r, h), args.repeats)
            entry["max_diff"] = float(np.abs(K._edit_table_numba(r, h) - K._edit_table_numpy(r, h)).max())
        rows.append(entry)

    print(f"{'kernel':<24}{'numpy ms':>11}{'numba ms':>11}{'speedup':>9}{'max diff':>11}")
    for e in rows:
        nb = e.get("numba")
        print(
            f"{e['kernel']:<24}{1e3 * e['numpy']:>11.3f}"
            + (f"{1e3 * nb:>11.3f}{e['numpy'] / nb:>8.1f}x{e['max_diff']:>11.1e}" if nb else "")
        )


if __name__ == "__main__":
    main()

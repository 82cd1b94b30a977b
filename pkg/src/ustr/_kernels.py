"""Hot dynamic-programming kernels.

Two implementations of every kernel live here: a numba ``@njit`` version
and a vectorised numpy version. The numba path is used when numba imports
and ``USTR_DISABLE_NUMBA`` is unset (or ``0``); otherwise the numpy path
is selected. Both produce the same numbers up to floating point rounding,
which ``benchmarks/bench_kernels.py`` and the test-suite check.
"""

from __future__ import annotations

import math
import os

import numpy as np

NEG_INF = -np.inf

_disabled = os.environ.get("USTR_DISABLE_NUMBA", "0").lower() not in ("", "0", "false", "no")

try:
    if _disabled:
        raise ImportError("numba disabled by USTR_DISABLE_NUMBA")
    from numba import njit

    HAVE_NUMBA = True
except ImportError:  # pragma: no cover - exercised only without numba
    HAVE_NUMBA = False

    def njit(*args, **kwargs):
        if args and callable(args[0]):
            return args[0]
        return lambda f: f


def backend() -> str:
    return "numba" if HAVE_NUMBA else "numpy"


# ---------------------------------------------------------------------------
# transducer lattice
# ---------------------------------------------------------------------------


@njit(cache=True)
def _lse2(a, b):
    if a == -np.inf:
        return b
    if b == -np.inf:
        return a
    if a > b:
        return a + math.log1p(math.exp(b - a))
    return b + math.log1p(math.exp(a - b))


@njit(cache=True)
def _lattice_numba(lp_blank, lp_label):
    T, U1 = lp_blank.shape
    U = U1 - 1
    alpha = np.full((T + 1, U1), -np.inf)
    beta = np.full((T + 1, U1), -np.inf)
    alpha[0, 0] = 0.0
    for t in range(T):
        for u in range(U1):
            if t == 0 and u == 0:
                continue
            a = -np.inf
            if t > 0:
                a = alpha[t - 1, u] + lp_blank[t - 1, u]
            if u > 0:
                a = _lse2(a, alpha[t, u - 1] + lp_label[t, u - 1])
            alpha[t, u] = a
    for u in range(U1):
        alpha[T, u] = alpha[T - 1, u] + lp_blank[T - 1, u]

    beta[T, U] = 0.0
    for t in range(T - 1, -1, -1):
        for u in range(U, -1, -1):
            b = lp_blank[t, u] + beta[t + 1, u]
            if u < U:
                b = _lse2(b, lp_label[t, u] + beta[t, u + 1])
            beta[t, u] = b
    return alpha, beta


def _lattice_numpy(lp_blank, lp_label):
    T, U1 = lp_blank.shape
    U = U1 - 1
    alpha = np.full((T + 1, U1), NEG_INF)
    beta = np.full((T + 1, U1), NEG_INF)
    lab = np.concatenate([lp_label, np.full((T, 1), NEG_INF)], axis=1)  # pad so lab[t, U] exists
    # anti-diagonal wavefront: every node with t + u = n depends only on diagonal n - 1
    alpha[0, 0] = 0.0
    for n in range(1, T + U):
        t = np.arange(max(0, n - U), min(T - 1, n) + 1)
        u = n - t
        tp, up = np.maximum(t - 1, 0), np.maximum(u - 1, 0)
        from_blank = np.where(t > 0, alpha[tp, u] + lp_blank[tp, u], NEG_INF)
        from_label = np.where(u > 0, alpha[t, up] + lab[t, up], NEG_INF)
        alpha[t, u] = np.logaddexp(from_blank, from_label)
    alpha[T] = alpha[T - 1] + lp_blank[T - 1]

    beta[T, U] = 0.0
    for n in range(T - 1 + U, -1, -1):
        t = np.arange(max(0, n - U), min(T - 1, n) + 1)
        u = n - t
        via_blank = lp_blank[t, u] + beta[t + 1, u]
        via_label = np.where(u < U, lab[t, u] + beta[t, np.minimum(u + 1, U)], NEG_INF)
        beta[t, u] = np.logaddexp(via_blank, via_label)
    return alpha, beta


@njit(cache=True)
def _occupancy_numba(alpha, beta, lp_blank, lp_label, total):
    T, U1 = lp_blank.shape
    g_blank = np.zeros((T, U1))
    g_label = np.zeros((T, U1 - 1))
    for t in range(T):
        for u in range(U1):
            a = alpha[t, u]
            if a == -np.inf:
                continue
            g_blank[t, u] = -math.exp(a + lp_blank[t, u] + beta[t + 1, u] - total)
            if u < U1 - 1:
                g_label[t, u] = -math.exp(a + lp_label[t, u] + beta[t, u + 1] - total)
    return g_blank, g_label


def _occupancy_numpy(alpha, beta, lp_blank, lp_label, total):
    a = alpha[:-1]
    with np.errstate(invalid="ignore", over="ignore"):
        g_blank = -np.exp(a + lp_blank + beta[1:] - total)
        g_label = -np.exp(a[:, :-1] + lp_label + beta[:-1, 1:] - total)
    g_blank[~np.isfinite(g_blank)] = 0.0
    g_label[~np.isfinite(g_label)] = 0.0
    return g_blank, g_label


def transducer_lattice(lp_blank: np.ndarray, lp_label: np.ndarray):
    """Forward and backward tables of the transducer lattice.

    ``lp_blank`` is (T, U+1), ``lp_label`` is (T, U): the log-probability of
    blank and of the next reference label at every node. Returns
    ``(alpha, beta)``, each (T+1, U+1). Row T of ``alpha`` holds the mass that
    left the last frame through a blank, so ``alpha[T, U] == beta[0, 0]``.
    """
    lp_blank = np.ascontiguousarray(lp_blank, dtype=np.float64)
    lp_label = np.ascontiguousarray(lp_label, dtype=np.float64).reshape(lp_blank.shape[0], -1)
    if HAVE_NUMBA:
        return _lattice_numba(lp_blank, lp_label)
    return _lattice_numpy(lp_blank, lp_label)


def transducer_occupancy(alpha, beta, lp_blank, lp_label, total):
    """Derivative of ``-total`` w.r.t. the blank and label log-probs."""
    lp_blank = np.ascontiguousarray(lp_blank, dtype=np.float64)
    lp_label = np.ascontiguousarray(lp_label, dtype=np.float64).reshape(lp_blank.shape[0], -1)
    if HAVE_NUMBA:
        return _occupancy_numba(alpha, beta, lp_blank, lp_label, float(total))
    return _occupancy_numpy(alpha, beta, lp_blank, lp_label, float(total))


# ---------------------------------------------------------------------------
# word alignment
# ---------------------------------------------------------------------------


@njit(cache=True)
def _edit_table_numba(ref, hyp):
    n = ref.shape[0]
    m = hyp.shape[0]
    d = np.zeros((n + 1, m + 1), dtype=np.int64)
    for j in range(m + 1):
        d[0, j] = j
    for i in range(1, n + 1):
        d[i, 0] = i
        for j in range(1, m + 1):
            c = d[i - 1, j - 1] + (0 if ref[i - 1] == hyp[j - 1] else 1)
            up = d[i - 1, j] + 1
            left = d[i, j - 1] + 1
            if up < c:
                c = up
            if left < c:
                c = left
            d[i, j] = c
    return d


def _edit_table_numpy(ref, hyp):
    n, m = ref.shape[0], hyp.shape[0]
    d = np.zeros((n + 1, m + 1), dtype=np.int64)
    d[0] = np.arange(m + 1)
    ramp = np.arange(m + 1)
    for i in range(1, n + 1):
        best = np.empty(m + 1, dtype=np.int64)
        best[0] = i
        best[1:] = np.minimum(d[i - 1, :-1] + (ref[i - 1] != hyp), d[i - 1, 1:] + 1)
        # left-to-right insertions: d[i, j] = min_k best[k] + (j - k)
        d[i] = np.minimum.accumulate(best - ramp) + ramp
    return d


def edit_table(ref: np.ndarray, hyp: np.ndarray) -> np.ndarray:
    """Levenshtein cost table between two integer sequences, unit costs."""
    ref = np.ascontiguousarray(ref, dtype=np.int64)
    hyp = np.ascontiguousarray(hyp, dtype=np.int64)
    if HAVE_NUMBA:
        return _edit_table_numba(ref, hyp)
    return _edit_table_numpy(ref, hyp)

"""Hot inner loops, each with a numba and a pure-numpy implementation.

Set ``DESKNAS_DISABLE_NUMBA=1`` before import to force the numpy path
(also used automatically when numba is missing).  Both paths are exact
re-statements of the same arithmetic; results agree to rounding.
"""

from __future__ import annotations

import os
import warnings

import numpy as np

_DISABLED = os.environ.get("DESKNAS_DISABLE_NUMBA", "").strip().lower() in ("1", "true", "yes")

try:
    if _DISABLED:
        raise ImportError
    from numba import njit

    HAVE_NUMBA = True
except ImportError:
    HAVE_NUMBA = False
    if not _DISABLED:
        warnings.warn("numba not importable; using the numpy fallback kernels")

    def njit(*args, **kwargs):
        if args and callable(args[0]):
            return args[0]
        return lambda f: f


USE_NUMBA = HAVE_NUMBA


# --------------------------------------------------------------------------
# depthwise 1-D convolution on (batch, length, channels) tensors
# --------------------------------------------------------------------------

def dwconv_fwd_np(xp, w, stride, l_out):
    b, _, c = xp.shape
    y = np.zeros((b, l_out, c), dtype=xp.dtype)
    span = stride * (l_out - 1) + 1
    for t in range(w.shape[0]):
        y += xp[:, t:t + span:stride, :] * w[t]
    return y


def dwconv_bwd_np(xp, w, dy, stride):
    dxp = np.zeros_like(xp)
    dw = np.zeros_like(w)
    l_out = dy.shape[1]
    span = stride * (l_out - 1) + 1
    for t in range(w.shape[0]):
        dw[t] = np.einsum("blc,blc->c", xp[:, t:t + span:stride, :], dy)
        dxp[:, t:t + span:stride, :] += dy * w[t]
    return dxp, dw


@njit(cache=True)
def _dwconv_fwd_nb(xp, w, stride, l_out):
    b_n, _, c_n = xp.shape
    k_n = w.shape[0]
    y = np.zeros((b_n, l_out, c_n), dtype=xp.dtype)
    for b in range(b_n):
        for l in range(l_out):
            base = l * stride
            for t in range(k_n):
                for c in range(c_n):
                    y[b, l, c] += xp[b, base + t, c] * w[t, c]
    return y


@njit(cache=True)
def _dwconv_bwd_nb(xp, w, dy, stride):
    b_n, l_out, c_n = dy.shape
    k_n = w.shape[0]
    dxp = np.zeros_like(xp)
    dw = np.zeros_like(w)
    for b in range(b_n):
        for l in range(l_out):
            base = l * stride
            for t in range(k_n):
                for c in range(c_n):
                    g = dy[b, l, c]
                    dw[t, c] += xp[b, base + t, c] * g
                    dxp[b, base + t, c] += w[t, c] * g
    return dxp, dw


# --------------------------------------------------------------------------
# non-dominated front ranks (all objectives minimised)
# --------------------------------------------------------------------------

def front_ranks_np(f):
    n = f.shape[0]
    le = np.all(f[:, None, :] <= f[None, :, :], axis=2)
    lt = np.any(f[:, None, :] < f[None, :, :], axis=2)
    dom = le & lt  # dom[i, j]: i dominates j
    count = dom.sum(axis=0)
    rank = np.full(n, -1, dtype=np.int64)
    current = np.flatnonzero(count == 0)
    r = 0
    while current.size:
        rank[current] = r
        count = count - dom[current].sum(axis=0)
        count[rank >= 0] = -1
        current = np.flatnonzero(count == 0)
        r += 1
    return rank


@njit(cache=True)
def _front_ranks_nb(f):
    n, m = f.shape
    count = np.zeros(n, dtype=np.int64)
    dom = np.zeros((n, n), dtype=np.bool_)
    for i in range(n):
        for j in range(n):
            if i == j:
                continue
            le = True
            lt = False
            for k in range(m):
                if f[i, k] > f[j, k]:
                    le = False
                    break
                if f[i, k] < f[j, k]:
                    lt = True
            if le and lt:
                dom[i, j] = True
                count[j] += 1
    rank = np.full(n, -1, dtype=np.int64)
    current = np.empty(n, dtype=np.int64)
    nxt = np.empty(n, dtype=np.int64)
    n_cur = 0
    for i in range(n):
        if count[i] == 0:
            current[n_cur] = i
            n_cur += 1
    r = 0
    while n_cur > 0:
        n_nxt = 0
        for a in range(n_cur):
            i = current[a]
            rank[i] = r
        for a in range(n_cur):
            i = current[a]
            for j in range(n):
                if dom[i, j]:
                    count[j] -= 1
                    if count[j] == 0:
                        nxt[n_nxt] = j
                        n_nxt += 1
        for a in range(n_nxt):
            current[a] = nxt[a]
        n_cur = n_nxt
        r += 1
    return rank


# --------------------------------------------------------------------------
# regression-tree split search (variance reduction)
# --------------------------------------------------------------------------

def best_split_np(x, y, min_leaf):
    """Return (feature, threshold, score) maximising sum_left^2/n_l + sum_right^2/n_r.

    feature is -1 when no admissible split exists.
    """
    n, d = x.shape
    best_f, best_thr, best_score = -1, 0.0, -np.inf
    total = y.sum()
    pos = np.arange(1, n)
    ok_size = (pos >= min_leaf) & (n - pos >= min_leaf)
    for f in range(d):
        order = np.argsort(x[:, f], kind="mergesort")
        xs = x[order, f]
        cs = np.cumsum(y[order])[:-1]
        ok = ok_size & (xs[:-1] < xs[1:])
        if not ok.any():
            continue
        score = cs * cs / pos + (total - cs) ** 2 / (n - pos)
        score = np.where(ok, score, -np.inf)
        i = int(np.argmax(score))
        if score[i] > best_score:
            best_f, best_score = f, float(score[i])
            best_thr = 0.5 * (xs[i] + xs[i + 1])
    return best_f, best_thr, best_score


@njit(cache=True)
def _best_split_nb(x, y, min_leaf):
    n, d = x.shape
    best_f = -1
    best_thr = 0.0
    best_score = -np.inf
    total = 0.0
    for i in range(n):
        total += y[i]
    for f in range(d):
        order = np.argsort(x[:, f], kind="mergesort")
        cs = 0.0
        f_score = -np.inf
        f_thr = 0.0
        for i in range(n - 1):
            cs += y[order[i]]
            left = i + 1
            right = n - left
            if left < min_leaf or right < min_leaf:
                continue
            xa = x[order[i], f]
            xb = x[order[i + 1], f]
            if not xa < xb:
                continue
            score = cs * cs / left + (total - cs) ** 2 / right
            if score > f_score:
                f_score = score
                f_thr = 0.5 * (xa + xb)
        if f_score > best_score:
            best_f = f
            best_score = f_score
            best_thr = f_thr
    return best_f, best_thr, best_score


if USE_NUMBA:
    dwconv_fwd = _dwconv_fwd_nb
    dwconv_bwd = _dwconv_bwd_nb
    front_ranks = _front_ranks_nb
    best_split = _best_split_nb
else:
    dwconv_fwd = dwconv_fwd_np
    dwconv_bwd = dwconv_bwd_np
    front_ranks = front_ranks_np
    best_split = best_split_np

# exposed for the benchmark and the cross-path tests
dwconv_fwd_nb = _dwconv_fwd_nb
dwconv_bwd_nb = _dwconv_bwd_nb
front_ranks_nb = _front_ranks_nb
best_split_nb = _best_split_nb

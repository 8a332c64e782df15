"""Hot loops of tree training and inference.

Every kernel exists twice: a loop version compiled by numba and a vectorised
numpy version. Both accumulate in the same sequential order so they return
bit-identical results; ``best_split`` and ``apply_tree`` dispatch to one of
them according to :mod:`laeids._accel`.
"""

import numpy as np

from laeids._accel import NUMBA_ENABLED, njit


def best_split_numpy(X, rows, G, H, feat_ok, lam, min_leaf, min_hess):
    """Exact greedy split search over one node.

    Returns ``(feature, threshold, gain)``; feature is -1 when no admissible
    split exists. Rows go left when ``x <= threshold``. Ties keep the lower
    feature index, then the lower threshold.
    """
    m = rows.shape[0]
    d = X.shape[1]
    K = G.shape[1]
    best_f, best_t, best_gain = -1, 0.0, -np.inf
    if m < 2 * min_leaf or m < 2:
        return best_f, best_t, best_gain
    g = G[rows]
    h = H[rows]
    nl = np.arange(1, m)
    size_ok = (nl >= min_leaf) & (m - nl >= min_leaf)
    for j in range(d):
        if not feat_ok[j]:
            continue
        xs = X[rows, j]
        o = np.argsort(xs, kind="mergesort")
        xs = xs[o]
        cg = np.cumsum(g[o], axis=0)
        ch = np.cumsum(h[o], axis=0)
        valid = size_ok & (xs[:-1] < xs[1:])
        if not valid.any():
            continue
        shl = np.zeros(m - 1)
        shr = np.zeros(m - 1)
        gain = np.zeros(m - 1)
        for k in range(K):
            gt = cg[-1, k]
            ht = ch[-1, k]
            gl = cg[:-1, k]
            hl = ch[:-1, k]
            gr = gt - gl
            hr = ht - hl
            shl = shl + hl
            shr = shr + hr
            gain = gain + (gl * gl / (hl + lam) + gr * gr / (hr + lam) - gt * gt / (ht + lam))
        valid &= (shl >= min_hess) & (shr >= min_hess)
        if not valid.any():
            continue
        cand = np.where(valid, gain, -np.inf)
        i = int(np.argmax(cand))
        if cand[i] > best_gain:
            best_f, best_t, best_gain = j, float(xs[i]), float(cand[i])
    return best_f, best_t, best_gain


def _best_split_loop(X, rows, G, H, feat_ok, lam, min_leaf, min_hess):
    m = rows.shape[0]
    d = X.shape[1]
    K = G.shape[1]
    best_f = -1
    best_t = 0.0
    best_gain = -np.inf
    if m < 2 * min_leaf or m < 2:
        return best_f, best_t, best_gain
    xs = np.empty(m)
    gt = np.zeros(K)
    ht = np.zeros(K)
    gl = np.zeros(K)
    hl = np.zeros(K)
    for j in range(d):
        if not feat_ok[j]:
            continue
        for i in range(m):
            xs[i] = X[rows[i], j]
        o = np.argsort(xs, kind="mergesort")
        for k in range(K):
            gt[k] = 0.0
            ht[k] = 0.0
            gl[k] = 0.0
            hl[k] = 0.0
        for i in range(m):
            r = rows[o[i]]
            for k in range(K):
                gt[k] += G[r, k]
                ht[k] += H[r, k]
        for i in range(m - 1):
            r = rows[o[i]]
            for k in range(K):
                gl[k] += G[r, k]
                hl[k] += H[r, k]
            if not xs[o[i]] < xs[o[i + 1]]:
                continue
            n_left = i + 1
            if n_left < min_leaf or m - n_left < min_leaf:
                continue
            shl = 0.0
            shr = 0.0
            gain = 0.0
            for k in range(K):
                gr = gt[k] - gl[k]
                hr = ht[k] - hl[k]
                shl = shl + hl[k]
                shr = shr + hr
                gain = gain + (gl[k] * gl[k] / (hl[k] + lam) + gr * gr / (hr + lam) - gt[k] * gt[k] / (ht[k] + lam))
            if shl < min_hess or shr < min_hess:
                continue
            if gain > best_gain:
                best_f = j
                best_t = xs[o[i]]
                best_gain = gain
    return best_f, best_t, best_gain


def apply_tree_numpy(X, feature, threshold, left, right):
    """Leaf index reached by every row of ``X``."""
    node = np.zeros(X.shape[0], dtype=np.int64)
    rows = np.arange(X.shape[0])
    active = feature[node] >= 0
    while active.any():
        r = rows[active]
        nd = node[r]
        go_left = X[r, feature[nd]] <= threshold[nd]
        node[r] = np.where(go_left, left[nd], right[nd])
        active = feature[node] >= 0
    return node


def _apply_tree_loop(X, feature, threshold, left, right):
    n = X.shape[0]
    out = np.empty(n, dtype=np.int64)
    for i in range(n):
        nd = 0
        while feature[nd] >= 0:
            if X[i, feature[nd]] <= threshold[nd]:
                nd = left[nd]
            else:
                nd = right[nd]
        out[i] = nd
    return out


best_split_numba = njit(_best_split_loop)
apply_tree_numba = njit(_apply_tree_loop)

if NUMBA_ENABLED:
    best_split = best_split_numba
    apply_tree = apply_tree_numba
else:
    best_split = best_split_numpy
    apply_tree = apply_tree_numpy

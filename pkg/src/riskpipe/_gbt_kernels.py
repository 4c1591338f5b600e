"""Numba kernels for exact greedy tree growth and prediction.

Candidate splits for a node and feature, in tie-break order:

1. if the node has missing values and at least one present value: missing
   rows left, every present row right (threshold = smallest present value);
2. for each pair of consecutive distinct present values ``a < b``, threshold
   ``(a + b) / 2`` with rows ``x < threshold`` going left; the missing rows are
   tried on the left first, then on the right. Without missing rows only the
   left default is evaluated.

Features are visited in ascending index order. A candidate replaces the
incumbent only when its gain exceeds it by more than ``TIE_RTOL`` relative to
the parent score, so near-equal gains resolve to the earliest candidate.
"""

import numpy as np
from numba import njit

TIE_RTOL = 1e-12


@njit(cache=True, nogil=True)
def tie_tolerance(G, H, lam):
    return TIE_RTOL * (1.0 + G * G / (H + lam))


@njit(cache=True, nogil=True)
def _threshold(a, b):
    t = 0.5 * (a + b)
    if t <= a:
        t = b
    return t


@njit(cache=True, nogil=True)
def _score(G, H, lam):
    d = H + lam
    if d <= 0.0:
        return 0.0
    return G * G / d


@njit(cache=True, nogil=True)
def find_splits(loc, n_level, G, H, C, g, h, feats,
                srows, svals, sstart, sstop, mrows, mstart, mstop,
                lam, gamma, min_child_weight):
    """Best split per level node. Returns (gain, feature, threshold, default_left)."""
    best_gain = np.full(n_level, -np.inf)
    best_feat = np.full(n_level, -1, dtype=np.int64)
    best_thr = np.zeros(n_level)
    best_left = np.zeros(n_level, dtype=np.bool_)
    tol = np.empty(n_level)
    parent = np.empty(n_level)
    for j in range(n_level):
        tol[j] = tie_tolerance(G[j], H[j], lam)
        parent[j] = _score(G[j], H[j], lam)

    Gm = np.zeros(n_level)
    Hm = np.zeros(n_level)
    cm = np.zeros(n_level, dtype=np.int64)
    aG = np.zeros(n_level)
    aH = np.zeros(n_level)
    ac = np.zeros(n_level, dtype=np.int64)
    last = np.zeros(n_level)

    for fi in range(feats.shape[0]):
        f = feats[fi]
        Gm[:] = 0.0
        Hm[:] = 0.0
        cm[:] = 0
        aG[:] = 0.0
        aH[:] = 0.0
        ac[:] = 0
        for kk in range(mstart[f], mstop[f]):
            r = mrows[kk]
            j = loc[r]
            if j >= 0:
                Gm[j] += g[r]
                Hm[j] += h[r]
                cm[j] += 1
        for kk in range(sstart[f], sstop[f]):
            r = srows[kk]
            j = loc[r]
            if j < 0:
                continue
            v = svals[kk]
            if ac[j] == 0:
                if cm[j] > 0:
                    GL = Gm[j]
                    HL = Hm[j]
                    GR = G[j] - GL
                    HR = H[j] - HL
                    if HL >= min_child_weight and HR >= min_child_weight:
                        gain = 0.5 * (_score(GL, HL, lam) + _score(GR, HR, lam) - parent[j]) - gamma
                        if gain > best_gain[j] + tol[j]:
                            best_gain[j] = gain
                            best_feat[j] = f
                            best_thr[j] = v
                            best_left[j] = True
            elif v != last[j]:
                thr = _threshold(last[j], v)
                if cm[j] > 0:
                    GL = aG[j] + Gm[j]
                    HL = aH[j] + Hm[j]
                    GR = G[j] - GL
                    HR = H[j] - HL
                    if C[j] - ac[j] - cm[j] > 0 and HL >= min_child_weight and HR >= min_child_weight:
                        gain = 0.5 * (_score(GL, HL, lam) + _score(GR, HR, lam) - parent[j]) - gamma
                        if gain > best_gain[j] + tol[j]:
                            best_gain[j] = gain
                            best_feat[j] = f
                            best_thr[j] = thr
                            best_left[j] = True
                GL = aG[j]
                HL = aH[j]
                GR = G[j] - GL
                HR = H[j] - HL
                if HL >= min_child_weight and HR >= min_child_weight:
                    gain = 0.5 * (_score(GL, HL, lam) + _score(GR, HR, lam) - parent[j]) - gamma
                    if gain > best_gain[j] + tol[j]:
                        best_gain[j] = gain
                        best_feat[j] = f
                        best_thr[j] = thr
                        best_left[j] = cm[j] == 0
            aG[j] += g[r]
            aH[j] += h[r]
            ac[j] += 1
            last[j] = v
    return best_gain, best_feat, best_thr, best_left


@njit(cache=True, nogil=True)
def grow_tree(X, g, h, feats, srows, svals, sstart, sstop, mrows, mstart, mstop,
              max_depth, lam, gamma, min_child_weight, learning_rate):
    """Grow one tree level by level.

    Returns node arrays (feature, threshold, default_left, left, right, value,
    gain, cover) and the leaf value reached by every training row.
    """
    n = X.shape[0]
    cap = 2 ** (max_depth + 1) - 1
    feature = np.full(cap, -1, dtype=np.int64)
    threshold = np.zeros(cap)
    default_left = np.zeros(cap, dtype=np.bool_)
    left = np.full(cap, -1, dtype=np.int64)
    right = np.full(cap, -1, dtype=np.int64)
    value = np.zeros(cap)
    gain_out = np.zeros(cap)
    cover = np.zeros(cap)
    n_nodes = 1

    pos = np.zeros(n, dtype=np.int64)
    level = np.zeros(1, dtype=np.int64)
    node_local = np.full(cap, -1, dtype=np.int64)
    loc = np.empty(n, dtype=np.int64)

    for depth in range(max_depth + 1):
        n_level = level.shape[0]
        G = np.zeros(n_level)
        H = np.zeros(n_level)
        C = np.zeros(n_level, dtype=np.int64)
        for j in range(n_level):
            node_local[level[j]] = j
        for r in range(n):
            j = node_local[pos[r]] if pos[r] >= 0 else -1
            loc[r] = j
            if j >= 0:
                G[j] += g[r]
                H[j] += h[r]
                C[j] += 1
        for j in range(n_level):
            cover[level[j]] = H[j]
            d = H[j] + lam
            value[level[j]] = -learning_rate * G[j] / d if d > 0.0 else 0.0
        if depth == max_depth:
            break
        bg, bf, bt, bl = find_splits(loc, n_level, G, H, C, g, h, feats,
                                     srows, svals, sstart, sstop, mrows, mstart, mstop,
                                     lam, gamma, min_child_weight)
        split_any = False
        next_count = 0
        for j in range(n_level):
            if bf[j] >= 0 and bg[j] > tie_tolerance(G[j], H[j], lam):
                next_count += 2
        next_level = np.empty(next_count, dtype=np.int64)
        child_l = np.full(n_level, -1, dtype=np.int64)
        k = 0
        for j in range(n_level):
            node = level[j]
            if bf[j] >= 0 and bg[j] > tie_tolerance(G[j], H[j], lam):
                split_any = True
                feature[node] = bf[j]
                threshold[node] = bt[j]
                default_left[node] = bl[j]
                gain_out[node] = bg[j]
                left[node] = n_nodes
                right[node] = n_nodes + 1
                value[node] = 0.0
                child_l[j] = n_nodes
                next_level[k] = n_nodes
                next_level[k + 1] = n_nodes + 1
                k += 2
                n_nodes += 2
        for j in range(n_level):
            node_local[level[j]] = -1
        if not split_any:
            break
        for r in range(n):
            j = loc[r]
            if j < 0:
                continue
            cl = child_l[j]
            if cl < 0:
                pos[r] = -1 - pos[r]  # parked in a leaf; encoded to keep the node id
                continue
            x = X[r, bf[j]]
            if np.isnan(x):
                go_left = bl[j]
            else:
                go_left = x < bt[j]
            pos[r] = cl if go_left else cl + 1
        level = next_level

    leaf_of_row = np.empty(n)
    for r in range(n):
        p = pos[r]
        node = p if p >= 0 else -1 - p
        leaf_of_row[r] = value[node]
    return (feature[:n_nodes], threshold[:n_nodes], default_left[:n_nodes], left[:n_nodes],
            right[:n_nodes], value[:n_nodes], gain_out[:n_nodes], cover[:n_nodes], leaf_of_row)


@njit(cache=True, nogil=True)
def predict_margin(X, base_score, offsets, feature, threshold, default_left, left, right, value):
    n = X.shape[0]
    out = np.full(n, base_score)
    n_trees = offsets.shape[0] - 1
    for r in range(n):
        s = 0.0
        for t in range(n_trees):
            o = offsets[t]
            node = 0
            while left[o + node] >= 0:
                x = X[r, feature[o + node]]
                if np.isnan(x):
                    node = left[o + node] if default_left[o + node] else right[o + node]
                elif x < threshold[o + node]:
                    node = left[o + node]
                else:
                    node = right[o + node]
            s += value[o + node]
        out[r] += s
    return out

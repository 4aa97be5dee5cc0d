import numpy as np
from numba import njit


@njit(cache=True)
def emd_rows(p, q, width):
    n, bins = p.shape
    out = np.empty(n)
    for i in range(n):
        cp = 0.0
        cq = 0.0
        acc = 0.0
        for k in range(bins):
            cp += p[i, k]
            cq += q[i, k]
            acc += abs(cp - cq)
        out[i] = acc * width
    return out


@njit(cache=True)
def constrained_argmin(dists, order, min_dist):
    best = -1
    for i in range(dists.shape[0]):
        d = dists[i]
        if d < min_dist:
            continue
        if best < 0 or d < dists[best] or (d == dists[best] and order[i] < order[best]):
            best = i
    return best


@njit(cache=True)
def rank_of(dists, order, true_idx):
    d_true = dists[true_idx]
    o_true = order[true_idx]
    rank = 1
    for i in range(dists.shape[0]):
        d = dists[i]
        if d < d_true or (d == d_true and order[i] < o_true):
            rank += 1
    return rank


@njit(cache=True)
def auc_numerator(scores, labels):
    idx = np.argsort(scores, kind="mergesort")
    n = idx.shape[0]
    total = 0.0
    n_pos = 0.0
    i = 0
    while i < n:
        j = i
        while j + 1 < n and scores[idx[j + 1]] == scores[idx[i]]:
            j += 1
        # doubled average rank of the tie block i..j (1-based)
        doubled = float(i + j + 2)
        for k in range(i, j + 1):
            if labels[idx[k]] == 1:
                total += doubled
                n_pos += 1.0
        i = j + 1
    return total - n_pos * (n_pos + 1.0)

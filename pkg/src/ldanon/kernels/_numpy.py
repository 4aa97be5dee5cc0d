"""Pure-numpy reference kernels.

Every function here has a numba twin in ``_numba`` with the same signature
and bit-identical results on the inputs the package feeds them.
"""
import numpy as np


def emd_rows(p, q, width):
    """1-D earth mover's distance between matching rows of two histogram stacks.

    ``p`` and ``q`` are ``(n, bins)`` arrays already normalised to unit mass
    per row; ``width`` is the uniform bin width.
    """
    cdf_gap = np.cumsum(p, axis=1) - np.cumsum(q, axis=1)
    return np.abs(cdf_gap).sum(axis=1) * width


def constrained_argmin(dists, order, min_dist):
    # smallest distance >= min_dist; ties go to the smallest ``order`` value.
    # returns -1 when nothing qualifies
    ok = np.flatnonzero(dists >= min_dist)
    if ok.size == 0:
        return -1
    best = dists[ok].min()
    tied = ok[dists[ok] == best]
    return int(tied[np.argmin(order[tied])])


def rank_of(dists, order, true_idx):
    d_true = dists[true_idx]
    closer = np.count_nonzero(dists < d_true)
    tied_before = np.count_nonzero((dists == d_true) & (order < order[true_idx]))
    return int(1 + closer + tied_before)


def auc_numerator(scores, labels):
    """Mann-Whitney U of the positive class, ties counted half.

    Returned as twice U so the value is an exact integer in float64.
    """
    order = np.argsort(scores, kind="mergesort")
    s = scores[order]
    y = labels[order]
    # average ranks (1-based), doubled to stay integral
    _, first, counts = np.unique(s, return_index=True, return_counts=True)
    doubled = np.repeat(2 * first + counts + 1, counts).astype(np.float64)
    n_pos = float(np.count_nonzero(y))
    return doubled[y == 1].sum() - n_pos * (n_pos + 1.0)

"""Compiled inner loops for the step-down recursion.

The arithmetic mirrors :func:`omtfdr.policy.coefficients` operation for
operation, so decisions agree bit-for-bit with the array implementation.
"""

import numpy as np
from numba import njit


@njit(cache=True)
def _prefix_sums(row, cs):
    acc = 0.0
    for k in range(row.shape[0]):
        acc += row[k]
        cs[k] = acc


@njit(cache=True)
def _b_coef(t, cs, k, alpha, pfdr):
    # k is 0-based; cs[k-1] is the sum of the k smallest values
    if k == 0:
        return t - alpha if pfdr else t
    return (t - cs[k - 1] / k) / (k + 1)


@njit(cache=True)
def stepdown_trace(t_sorted, mu, alpha, pfdr):
    """R_k and m_k for one sorted locFDR vector."""
    n = t_sorted.shape[0]
    cs = np.empty(n)
    _prefix_sums(t_sorted, cs)
    r = np.empty(n)
    m = np.empty(n)
    acc = 0.0
    for k in range(n - 1, -1, -1):
        t = t_sorted[k]
        r[k] = (1.0 - t) - mu * _b_coef(t, cs, k, alpha, pfdr)
        acc = acc + r[k]
        if acc < 0.0:
            acc = 0.0
        m[k] = acc
    return r, m


@njit(cache=True)
def stepdown_counts(t_sorted, mu, alpha, pfdr):
    """Number of step-down rejections per row and the mean locFDR of the
    rejected set (0 for an empty set)."""
    n_rows, n = t_sorted.shape
    counts = np.empty(n_rows, np.int64)
    fdp = np.empty(n_rows)
    cs = np.empty(n)
    for i in range(n_rows):
        row = t_sorted[i]
        _prefix_sums(row, cs)
        acc = 0.0
        first_stop = n
        for k in range(n - 1, -1, -1):
            t = row[k]
            acc = acc + ((1.0 - t) - mu * _b_coef(t, cs, k, alpha, pfdr))
            if acc < 0.0:
                acc = 0.0
            if not acc > 0.0:
                first_stop = k
        counts[i] = first_stop
        fdp[i] = cs[first_stop - 1] / first_stop if first_stop > 0 else 0.0
    return counts, fdp

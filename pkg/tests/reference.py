"""Independent reference implementations used as test oracles.

Everything here is written in the most pedestrian way possible (explicit
loops, exhaustive enumeration, exact rational arithmetic) and stays
independent of the library code paths it checks.
"""
from __future__ import annotations

import itertools
import math
from fractions import Fraction

import numpy as np


def naive_dbscan(dist: np.ndarray, eps: float, min_samples: int) -> np.ndarray:
    """Textbook DBSCAN with brute-force region queries.

    Seeds scan in ascending index order and each cluster is fully grown
    before the next seed is considered, so border points join the first
    discovered cluster.  Labels: -1 noise, 0.. clusters in discovery order.
    """
    n = dist.shape[0]
    UNSEEN = -99

    def region_query(i):
        return [j for j in range(n) if dist[i][j] <= eps]

    labels = [UNSEEN] * n
    cluster = 0
    for i in range(n):
        if labels[i] != UNSEEN:
            continue
        seeds = region_query(i)
        if len(seeds) < min_samples:
            labels[i] = -1
            continue
        labels[i] = cluster
        k = 0
        while k < len(seeds):
            j = seeds[k]
            k += 1
            if labels[j] == -1:
                labels[j] = cluster
            if labels[j] != UNSEEN:
                continue
            labels[j] = cluster
            j_neighbors = region_query(j)
            if len(j_neighbors) >= min_samples:
                seeds.extend(j_neighbors)
        cluster += 1
    return np.array(labels)


def brute_force_assignment(cost: np.ndarray) -> float:
    """Minimum total cost over all ways of giving each column a distinct row."""
    pv, pr = cost.shape
    assert pv >= pr
    best = math.inf
    for rows in itertools.permutations(range(pv), pr):
        total = sum(cost[rows[c]][c] for c in range(pr))
        best = min(best, total)
    return best


def _noise_as_singletons(labels) -> list[int]:
    out = list(labels)
    nxt = max([l for l in out if l >= 0], default=-1) + 1
    for i, l in enumerate(out):
        if l == -1:
            out[i] = nxt
            nxt += 1
    return out


def ari_pair_counting(labels_a, labels_b) -> Fraction:
    """ARI via explicit iteration over all sample pairs, exact rationals."""
    a = _noise_as_singletons(labels_a)
    b = _noise_as_singletons(labels_b)
    n = len(a)
    together_both = together_a = together_b = 0
    for i in range(n):
        for j in range(i + 1, n):
            same_a = a[i] == a[j]
            same_b = b[i] == b[j]
            together_a += same_a
            together_b += same_b
            together_both += same_a and same_b
    total_pairs = n * (n - 1) // 2
    expected = Fraction(together_a * together_b, total_pairs)
    max_index = Fraction(together_a + together_b, 2)
    if max_index == expected:
        return Fraction(1)
    return (together_both - expected) / (max_index - expected)


def mmd2_double_loop(x, y, sigma: float) -> float:
    """Biased V-statistic MMD^2 with explicit double loops."""

    def k(a, b):
        d2 = sum((ai - bi) ** 2 for ai, bi in zip(a, b))
        return math.exp(-d2 / (2.0 * sigma * sigma))

    x = [list(row) for row in np.atleast_2d(x)]
    y = [list(row) for row in np.atleast_2d(y)]
    xx = sum(k(a, b) for a in x for b in x) / len(x) ** 2
    yy = sum(k(a, b) for a in y for b in y) / len(y) ** 2
    xy = sum(k(a, b) for a in x for b in y) / (len(x) * len(y))
    return xx + yy - 2.0 * xy


def finite_difference(fn, x: np.ndarray, step: float = 1e-5) -> np.ndarray:
    """Central finite differences of a scalar function of an array."""
    grad = np.zeros_like(x, dtype=float)
    flat = x.ravel()
    g = grad.ravel()
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + step
        hi = fn(x)
        flat[i] = orig - step
        lo = fn(x)
        flat[i] = orig
        g[i] = (hi - lo) / (2.0 * step)
    return grad


def gradient_gap(analytic: np.ndarray, numeric: np.ndarray) -> float:
    """Worst absolute error normalized by the numeric gradient's scale."""
    scale = max(float(np.abs(numeric).max()), 1e-6)
    return float(np.abs(analytic - numeric).max()) / scale

"""Plackett-Luce sampling and probabilities over padded score matrices.

Scores are non-negative weights ``f`` of shape (n, M); padded candidates
carry weight 0.  Rankings are (n, K) candidate indices with -1 marking
unused slots.
"""
from __future__ import annotations

import itertools
import math

import numpy as np

MAX_ENUMERATION = 10 ** 6


def perm_count(m, k):
    """Number of ordered k-subsets of m items, elementwise."""
    m = np.asarray(m, dtype=np.int64)
    k = np.asarray(k, dtype=np.int64)
    out = np.ones(np.broadcast(m, k).shape, dtype=float)
    for j in range(int(np.max(k)) if k.size else 0):
        out = out * np.where(j < k, m - j, 1)
    return out


def plackett_luce_prob(f: np.ndarray, rankings: np.ndarray) -> np.ndarray:
    """Probability of each ranking under sampling without replacement from ``f``.

    The slot-j denominator is the total weight still available, summed over
    the remaining candidates in ascending-weight order.  That sum does not
    depend on candidate order or padding, so the same ranking of the same
    products gets the same bits however the pool is laid out.
    """
    f = np.asarray(f, dtype=float)
    rankings = np.asarray(rankings)
    n, M = f.shape
    rows = np.arange(n)
    order = np.argsort(f, axis=1, kind="stable")
    remaining = np.take_along_axis(f, order, axis=1).copy()
    pos = np.empty_like(order)
    np.put_along_axis(pos, order, np.broadcast_to(np.arange(M), (n, M)), axis=1)
    prob = np.ones(n)
    for j in range(rankings.shape[1]):
        r = rankings[:, j]
        active = r >= 0
        rr = np.where(active, r, 0)
        denom = np.cumsum(remaining, axis=1)[:, -1]
        step = np.where(active, f[rows, rr] / np.where(active, denom, 1.0), 1.0)
        prob = prob * step
        remaining[rows[active], pos[rows, rr][active]] = 0.0
    return prob


def sample_plackett_luce(log_f: np.ndarray, k, rng: np.random.Generator) -> np.ndarray:
    """Draw one ranking per row via the Gumbel-top-k construction.

    ``log_f`` uses -inf for padded candidates; ``k`` may vary by row, unused
    slots are filled with -1.
    """
    n, M = log_f.shape
    k = np.broadcast_to(np.asarray(k, dtype=np.int64), (n,))
    keys = log_f + rng.gumbel(size=(n, M))
    K = int(k.max()) if n else 0
    top = np.argsort(-keys, axis=1, kind="stable")[:, :K]
    return np.where(np.arange(K)[None, :] < k[:, None], top, -1)


def top_k(scores: np.ndarray, mask: np.ndarray, k) -> np.ndarray:
    """Highest-scoring candidates per row; ties go to the lowest index."""
    n = scores.shape[0]
    k = np.broadcast_to(np.asarray(k, dtype=np.int64), (n,))
    keyed = np.where(mask, scores, -np.inf)
    K = int(k.max()) if n else 0
    top = np.argsort(-keyed, axis=1, kind="stable")[:, :K]
    return np.where(np.arange(K)[None, :] < k[:, None], top, -1)


def enumerate_rankings(m: int, k: int) -> np.ndarray:
    """All ordered k-subsets of range(m), shape (m!/(m-k)!, k)."""
    if math.perm(m, k) > MAX_ENUMERATION:
        raise ValueError(f"{math.perm(m, k)} rankings exceed the enumeration cap "
                         f"{MAX_ENUMERATION}")
    return np.array(list(itertools.permutations(range(m), k)), dtype=np.int64).reshape(-1, k)

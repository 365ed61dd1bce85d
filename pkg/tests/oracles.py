"""Independent reference implementations used by the tests.

Everything here is written with plain Python loops and ``itertools`` from
the model definitions, without reusing the vectorized library code paths.
"""
from __future__ import annotations

import itertools
import math

MASK64 = (1 << 64) - 1


def splitmix(x: int) -> int:
    x = (x + 0x9E3779B97F4A7C15) & MASK64
    x = ((x ^ (x >> 30)) * 0xBF58476D1CE4E5B9) & MASK64
    x = ((x ^ (x >> 27)) * 0x94D049BB133111EB) & MASK64
    return x ^ (x >> 31)


def key(kind: int, fid: int, code: int) -> int:
    return splitmix(((kind << 56) ^ (fid << 40) ^ code) & MASK64)


def featurize(display: dict, candidate: dict, dim: int, crosses=(), bias=True) -> dict:
    """Sparse phi(c, p) as {index: value}; colliding entries add up."""
    phi: dict = {}

    def add(i, v):
        phi[i] = phi.get(i, 0.0) + v

    if bias:
        add(key(1, 0, 0) % dim, 1.0)
    for fid in (1, 2):
        if fid in display:
            add(key(2, fid, 0) % dim, float(display[fid]))
        if fid in candidate:
            add(key(2, fid, 1) % dim, float(candidate[fid]))
    for fv in (display, candidate):
        for fid, codes in fv.items():
            if fid in (1, 2):
                continue
            for c in codes:
                add(key(3, fid, c) % dim, 1.0)
    for a, b in crosses:
        if a in display and b in candidate:
            (da,) = tuple(display[a])
            for cb in candidate[b]:
                add(splitmix(key(4, a, da) ^ key(4, b, cb)) % dim, 1.0)
    return phi


def linear_score(phi: dict, w) -> float:
    return math.fsum(float(w[i]) * v for i, v in phi.items())


def pl_probability(f, ranking) -> float:
    """Product of sequential Plackett-Luce conditionals."""
    remaining = list(range(len(f)))
    p = 1.0
    for r in ranking:
        p *= f[r] / math.fsum(f[j] for j in remaining)
        remaining.remove(r)
    return p


def all_rankings(m: int, k: int):
    return list(itertools.permutations(range(m), k))


def n_rankings(m: int, k: int) -> int:
    return math.perm(m, k)


def sigmoid(x: float) -> float:
    return 1.0 / (1.0 + math.exp(-x))


def expected_click(cand_probs, ranking, position_bias) -> float:
    """1 - prod_s (1 - pb_s * c(y_s))."""
    miss = 1.0
    for s, r in enumerate(ranking):
        miss *= 1.0 - position_bias[s] * cand_probs[r]
    return 1.0 - miss


def context_value(policy_prob, cand_probs, k, position_bias) -> float:
    """sum_y pi(y) E[click | y] for one context; ``policy_prob(ranking)``."""
    return math.fsum(policy_prob(y) * expected_click(cand_probs, y, position_bias)
                     for y in all_rankings(len(cand_probs), k))


def estimates(rows, keep_prob):
    """IPS, C_hat, SNIPS, N_hat from (pi, q, delta) triples of kept records."""
    n_hat = 0.0
    sw = sdw = 0.0
    for pi, q, d in rows:
        s = 1.0 if d else 1.0 / keep_prob
        n_hat += s
        sw += s * pi / q
        sdw += d * s * pi / q
    ips, c = sdw / n_hat, sw / n_hat
    return dict(n_hat=n_hat, ips=ips, c_hat=c, snips=ips / c if c else float("nan"))


def linearized_se(rows, keep_prob):
    """Standard errors of IPS and C_hat: sqrt(sum s^2 (x - est)^2) / N_hat, written as loops."""
    e = estimates(rows, keep_prob)
    acc_r = acc_c = acc_s = 0.0
    for pi, q, d in rows:
        s = 1.0 if d else 1.0 / keep_prob
        u = pi / q
        acc_r += s * s * (d * u - e["ips"]) ** 2
        acc_c += s * s * (u - e["c_hat"]) ** 2
        w = s * u
        acc_s += w * w * (d - e["snips"]) ** 2
    nh = e["n_hat"]
    return (math.sqrt(acc_r) / nh, math.sqrt(acc_c) / nh,
            math.sqrt(acc_s) / (nh * e["c_hat"]))

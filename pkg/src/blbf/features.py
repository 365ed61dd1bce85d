"""Hashed linear features for (context, candidate) pairs.

Display features are shared by all candidates of a context, so they are kept
in a separate per-context block instead of being copied per candidate.
Scores are accumulated column by column in a fixed order (bias, numeric,
display codes, candidate codes, crosses); padding columns carry value 0 and
leave the running sum bit-for-bit unchanged, so a candidate's score does not
depend on how its batch was padded or in which position it sits.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .data import Contexts

_M1 = np.uint64(0xBF58476D1CE4E5B9)
_M2 = np.uint64(0x94D049BB133111EB)
_GOLD = np.uint64(0x9E3779B97F4A7C15)

_BIAS, _NUM, _CAT, _CROSS = 1, 2, 3, 4


def _mix(x: np.ndarray) -> np.ndarray:
    """splitmix64 finalizer, vectorized over uint64 arrays."""
    with np.errstate(over="ignore"):
        x = np.asarray(x, dtype=np.uint64) + _GOLD
        x = (x ^ (x >> np.uint64(30))) * _M1
        x = (x ^ (x >> np.uint64(27))) * _M2
        return x ^ (x >> np.uint64(31))


def _key(kind: int, fid, code) -> np.ndarray:
    fid = np.asarray(fid, dtype=np.uint64)
    code = np.asarray(code, dtype=np.uint64)
    return _mix((np.uint64(kind) << np.uint64(56)) ^ (fid << np.uint64(40)) ^ code)


@dataclass(frozen=True, eq=False)
class FeatureBlock:
    d_idx: np.ndarray  # (n, Kd)
    d_val: np.ndarray
    c_idx: np.ndarray  # (n, M, Kc)
    c_val: np.ndarray
    mask: np.ndarray   # (n, M) real candidates

    def __len__(self) -> int:
        return self.d_idx.shape[0]

    def take(self, rows) -> "FeatureBlock":
        return FeatureBlock(self.d_idx[rows], self.d_val[rows], self.c_idx[rows],
                            self.c_val[rows], self.mask[rows])

    def columns(self) -> np.ndarray:
        """Sorted distinct feature indices referenced by the block."""
        return np.unique(np.concatenate([self.d_idx.ravel(), self.c_idx.ravel()]))

    def compact(self, columns: np.ndarray) -> "FeatureBlock":
        """Re-index into ``columns``; unknown indices map to ``len(columns)``."""
        def remap(idx):
            pos = np.searchsorted(columns, idx)
            pos_c = np.minimum(pos, len(columns) - 1)
            found = columns[pos_c] == idx
            return np.where(found, pos_c, len(columns))
        return FeatureBlock(remap(self.d_idx), self.d_val, remap(self.c_idx), self.c_val,
                            self.mask)

    def scores(self, w: np.ndarray) -> np.ndarray:
        """Linear scores ``<w, phi(c, p)>`` of shape (n, M); padded candidates get 0."""
        s = np.zeros(len(self))
        for c in range(self.d_idx.shape[1]):
            s += w[self.d_idx[:, c]] * self.d_val[:, c]
        out = np.repeat(s[:, None], self.c_idx.shape[1], axis=1)
        for c in range(self.c_idx.shape[2]):
            out += w[self.c_idx[:, :, c]] * self.c_val[:, :, c]
        return np.where(self.mask, out, 0.0)

    def backprop(self, g: np.ndarray, dim: int) -> np.ndarray:
        """Gradient of ``sum(g * scores(w))`` with respect to ``w``."""
        g = np.where(self.mask, g, 0.0)
        grad = np.bincount(self.c_idx.ravel(), weights=(g[:, :, None] * self.c_val).ravel(),
                           minlength=dim)
        grad += np.bincount(self.d_idx.ravel(),
                            weights=(g.sum(axis=1)[:, None] * self.d_val).ravel(), minlength=dim)
        return grad[:dim]

    def rows(self, cand: np.ndarray) -> "FeatureBlock":
        """Single-candidate block holding candidate ``cand[i]`` of every row ``i``."""
        r = np.arange(len(self))
        return FeatureBlock(self.d_idx, self.d_val, self.c_idx[r, cand][:, None, :],
                            self.c_val[r, cand][:, None, :], np.ones((len(self), 1), bool))


@dataclass(frozen=True)
class Featurizer:
    """Hashing featurizer phi(c, p).

    Numeric features pass through; each categorical ``(id, code)`` pair and
    each configured cross ``(display id, candidate id)`` becomes a one-hot
    indicator hashed into ``dim`` buckets.  Colliding pairs share a weight.
    """

    dim: int = 2 ** 18
    crosses: tuple = ()
    bias: bool = True

    def transform(self, ctx: Contexts) -> FeatureBlock:
        n, M = len(ctx), ctx.max_pool
        dim = np.uint64(self.dim)
        d_idx, d_val = [], []
        if self.bias:
            d_idx.append(np.full(n, int(_key(_BIAS, 0, 0) % dim)))
            d_val.append(np.ones(n))
        for k in range(ctx.numeric.shape[1]):
            present = ~np.isnan(ctx.numeric[:, k])
            d_idx.append(np.full(n, int(_key(_NUM, k + 1, 0) % dim)))
            d_val.append(np.where(present, ctx.numeric[:, k], 0.0))
        if ctx.disp_fid.shape[1]:
            hashed = (_key(_CAT, ctx.disp_fid, ctx.disp_code) % dim).astype(np.int64)
            pad = ctx.disp_fid == 0
            d_idx.extend(np.where(pad, 0, hashed).T)
            d_val.extend(np.where(pad, 0.0, 1.0).T)

        c_idx, c_val = [], []
        for k in range(ctx.cand_numeric.shape[2]):
            col = ctx.cand_numeric[:, :, k]
            if np.isnan(col).all():
                continue
            c_idx.append(np.full((n, M), int(_key(_NUM, k + 1, 1) % dim)))
            c_val.append(np.where(np.isnan(col), 0.0, col))
        if ctx.cand_fid.shape[2]:
            hashed = (_key(_CAT, ctx.cand_fid, ctx.cand_code) % dim).astype(np.int64)
            pad = ctx.cand_fid == 0
            c_idx.extend(np.moveaxis(np.where(pad, 0, hashed), 2, 0))
            c_val.extend(np.moveaxis(np.where(pad, 0.0, 1.0), 2, 0))
        for a, b in self.crosses:
            dmask = ctx.disp_fid == a
            has = dmask.any(axis=1)
            dcode = np.where(has, ctx.disp_code[np.arange(n), dmask.argmax(axis=1)], 0)
            cols = np.flatnonzero((ctx.cand_fid == b).any(axis=(0, 1)))
            for c in cols:
                on = (ctx.cand_fid[:, :, c] == b) & has[:, None]
                inner = _key(_CROSS, a, dcode)[:, None] ^ _key(_CROSS, b, ctx.cand_code[:, :, c])
                hashed = (_mix(inner) % dim).astype(np.int64)
                c_idx.append(np.where(on, hashed, 0))
                c_val.append(np.where(on, 1.0, 0.0))

        if d_idx:
            D_idx, D_val = np.stack(d_idx, axis=-1).astype(np.int64), np.stack(d_val, axis=-1)
        else:
            D_idx, D_val = np.zeros((n, 0), np.int64), np.zeros((n, 0))
        if c_idx:
            C_idx, C_val = np.stack(c_idx, axis=-1).astype(np.int64), np.stack(c_val, axis=-1)
        else:
            C_idx, C_val = np.zeros((n, M, 0), np.int64), np.zeros((n, M, 0))
        return FeatureBlock(D_idx, D_val, C_idx, C_val, ctx.candidate_mask)

    def describe(self) -> str:
        crosses = ",".join(f"{a}x{b}" for a, b in self.crosses)
        return f"dim={self.dim} bias={int(self.bias)} crosses={crosses}"


def parse_crosses(text: str) -> tuple:
    """``"3x6,4x8"`` -> ``((3, 6), (4, 8))``."""
    out = []
    for part in text.replace(" ", "").split(","):
        if not part:
            continue
        a, sep, b = part.partition("x")
        if not sep:
            raise ValueError(f"malformed cross {part!r}; expected '<display id>x<candidate id>'")
        out.append((int(a), int(b)))
    return tuple(out)

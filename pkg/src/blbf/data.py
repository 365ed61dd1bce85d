"""Padded-array views of contexts and logged impressions.

Every numerical path (policies, estimators, learners, the oracle) works on
these batches rather than on per-record dictionaries.  Categorical features
are stored as ``(feature id, code)`` pairs, ordered by feature id then code,
with feature id 0 marking padding.
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .logformat import NUMERIC_FEATURE_IDS, ImpressionRecord

_NUMERIC = tuple(sorted(NUMERIC_FEATURE_IDS))


@dataclass(frozen=True)
class ContextSample:
    """One context: display features plus the feature vector of every candidate."""

    display_features: dict
    candidates: tuple


def _split_features(fv) -> tuple:
    numeric = [np.nan] * len(_NUMERIC)
    pairs = []
    for fid in sorted(fv):
        value = fv[fid]
        if fid in NUMERIC_FEATURE_IDS:
            numeric[_NUMERIC.index(fid)] = float(value)
        else:
            pairs.extend((fid, code) for code in sorted(value))
    return numeric, pairs


@dataclass(frozen=True, eq=False)
class Contexts:
    pool_size: np.ndarray     # (n,)
    nb_slots: np.ndarray      # (n,)
    numeric: np.ndarray       # (n, 2), NaN when absent
    disp_fid: np.ndarray      # (n, Ld)
    disp_code: np.ndarray     # (n, Ld)
    cand_numeric: np.ndarray  # (n, M, 2)
    cand_fid: np.ndarray      # (n, M, L)
    cand_code: np.ndarray     # (n, M, L)

    def __len__(self) -> int:
        return len(self.pool_size)

    @property
    def max_pool(self) -> int:
        return self.cand_fid.shape[1]

    @property
    def candidate_mask(self) -> np.ndarray:
        return np.arange(self.max_pool)[None, :] < self.pool_size[:, None]

    def take(self, rows) -> "Contexts":
        rows = np.asarray(rows)
        return Contexts(*(getattr(self, f)[rows] for f in self.__dataclass_fields__))

    @classmethod
    def concat(cls, parts: Sequence["Contexts"]) -> "Contexts":
        parts = [p for p in parts if len(p)]
        if not parts:
            raise ValueError("nothing to concatenate")
        M = max(p.max_pool for p in parts)
        Ld = max(p.disp_fid.shape[1] for p in parts)
        L = max(p.cand_fid.shape[2] for p in parts)

        def pad(a, shape, fill):
            out = np.full((a.shape[0],) + shape, fill, dtype=a.dtype)
            out[(slice(None),) + tuple(slice(0, s) for s in a.shape[1:])] = a
            return out

        return cls(
            np.concatenate([p.pool_size for p in parts]),
            np.concatenate([p.nb_slots for p in parts]),
            np.concatenate([p.numeric for p in parts]),
            np.concatenate([pad(p.disp_fid, (Ld,), 0) for p in parts]),
            np.concatenate([pad(p.disp_code, (Ld,), 0) for p in parts]),
            np.concatenate([pad(p.cand_numeric, (M, 2), np.nan) for p in parts]),
            np.concatenate([pad(p.cand_fid, (M, L), 0) for p in parts]),
            np.concatenate([pad(p.cand_code, (M, L), 0) for p in parts]),
        )

    @classmethod
    def from_samples(cls, samples: Sequence[ContextSample], nb_slots) -> "Contexts":
        n = len(samples)
        if np.isscalar(nb_slots):
            nb_slots = [nb_slots] * n
        disp = [_split_features(s.display_features) for s in samples]
        cands = [[_split_features(c) for c in s.candidates] for s in samples]
        M = max((len(c) for c in cands), default=1)
        Ld = max((len(p) for _, p in disp), default=0)
        L = max((len(p) for cs in cands for _, p in cs), default=0)
        numeric = np.array([d[0] for d in disp], dtype=float).reshape(n, 2)
        disp_fid = np.zeros((n, Ld), dtype=np.int64)
        disp_code = np.zeros((n, Ld), dtype=np.int64)
        cand_numeric = np.full((n, M, 2), np.nan)
        cand_fid = np.zeros((n, M, L), dtype=np.int64)
        cand_code = np.zeros((n, M, L), dtype=np.int64)
        for i, (_, pairs) in enumerate(disp):
            for j, (fid, code) in enumerate(pairs):
                disp_fid[i, j] = fid
                disp_code[i, j] = code
        for i, cs in enumerate(cands):
            for m, (num, pairs) in enumerate(cs):
                cand_numeric[i, m] = num
                for j, (fid, code) in enumerate(pairs):
                    cand_fid[i, m, j] = fid
                    cand_code[i, m, j] = code
        return cls(np.array([len(c) for c in cands], dtype=np.int64),
                   np.asarray(nb_slots, dtype=np.int64), numeric, disp_fid, disp_code,
                   cand_numeric, cand_fid, cand_code)

    @classmethod
    def from_records(cls, records: Sequence[ImpressionRecord]) -> "Contexts":
        samples = [ContextSample(r.display_features, tuple(c.features for c in r.candidates))
                   for r in records]
        return cls.from_samples(samples, [r.nb_slots for r in records])

    def sample(self, i: int) -> ContextSample:
        """Rebuild the dictionary form of row ``i``."""
        return ContextSample(
            _row_features(self.numeric[i], self.disp_fid[i], self.disp_code[i]),
            tuple(_row_features(self.cand_numeric[i, m], self.cand_fid[i, m], self.cand_code[i, m])
                  for m in range(int(self.pool_size[i]))),
        )


def _row_features(numeric, fids, codes) -> dict:
    fv: dict = {}
    for k, fid in enumerate(_NUMERIC):
        if not np.isnan(numeric[k]):
            fv[fid] = float(numeric[k])
    cat: dict = {}
    for fid, code in zip(fids.tolist(), codes.tolist()):
        if fid:
            cat.setdefault(fid, set()).add(code)
    fv.update({fid: frozenset(v) for fid, v in cat.items()})
    return fv


@dataclass(frozen=True, eq=False)
class LoggedData:
    """Kept impressions of a log in array form.

    ``rankings`` holds candidate indices per slot, padded with -1 beyond each
    impression's slot count; ``clicked`` is the banner-level reward.
    """

    contexts: Contexts
    rankings: np.ndarray
    propensity: np.ndarray
    clicked: np.ndarray
    ex_id: np.ndarray
    keep_prob: float

    def __len__(self) -> int:
        return len(self.propensity)

    @property
    def sampling_weight(self) -> np.ndarray:
        """1 / Pr(kept | reward) for every kept impression."""
        return np.where(self.clicked > 0, 1.0, 1.0 / self.keep_prob)

    def take(self, rows) -> "LoggedData":
        rows = np.asarray(rows)
        return LoggedData(self.contexts.take(rows), self.rankings[rows], self.propensity[rows],
                          self.clicked[rows], self.ex_id[rows], self.keep_prob)

    @classmethod
    def concat(cls, parts: Sequence["LoggedData"]) -> "LoggedData":
        parts = [p for p in parts if len(p)]
        K = max(p.rankings.shape[1] for p in parts)
        ranks = []
        for p in parts:
            r = np.full((len(p), K), -1, dtype=np.int64)
            r[:, : p.rankings.shape[1]] = p.rankings
            ranks.append(r)
        keep = {p.keep_prob for p in parts}
        if len(keep) != 1:
            raise ValueError("cannot concatenate logs with different keep probabilities")
        return cls(Contexts.concat([p.contexts for p in parts]), np.concatenate(ranks),
                   np.concatenate([p.propensity for p in parts]),
                   np.concatenate([p.clicked for p in parts]),
                   np.concatenate([p.ex_id for p in parts]), keep.pop())

    @classmethod
    def from_records(cls, records: Sequence[ImpressionRecord], keep_prob: float) -> "LoggedData":
        if not records:
            raise ValueError("empty log")
        ctx = Contexts.from_records(records)
        K = int(ctx.nb_slots.max())
        rankings = np.where(np.arange(K)[None, :] < ctx.nb_slots[:, None],
                            np.arange(K)[None, :], -1)
        return cls(ctx, rankings.astype(np.int64),
                   np.array([r.propensity for r in records], dtype=float),
                   np.array([r.was_ad_clicked for r in records], dtype=np.int64),
                   np.array([r.ex_id for r in records], dtype=np.int64), float(keep_prob))

"""Policy learning baselines on 1-slot logs.

Four learners share one linear policy class and one optimizer (minibatch
AdaGrad with an L1 proximal step):

* ``regression`` fits ``delta`` on the displayed candidate (weighted squared
  loss) and acts greedily on the prediction;
* ``ips`` reduces the inverse-propensity objective to weighted
  one-against-all logistic classification;
* ``dro`` does the same on doubly robust values built from a regression
  model;
* ``poem`` maximizes a variance-penalized, clipped IPS objective over a
  stochastic softmax policy.

Features are compacted to the columns seen in the training split; columns
first seen at evaluation time get weight 0.
"""
from __future__ import annotations

import dataclasses
import math
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np
from scipy import sparse

from .data import LoggedData
from .estimators import EstimateReport, evaluate_policy, format_jsonl, format_tsv
from .features import Featurizer, FeatureBlock, _mix
from .policies import LinearRankingPolicy, Policy, UniformPolicy, _exp_weights
from .ranking import plackett_luce_prob, top_k

METHODS = ("regression", "ips", "dro", "poem")


class LearningError(ValueError):
    pass


@dataclass(frozen=True)
class HyperGrid:
    """Hyper-parameter grid; every epoch count from 1 to ``epochs`` is a grid point."""

    epochs: int = 40
    lasso: tuple = (1e-8, 1e-7, 1e-6, 1e-5, 1e-4)
    learning_rate: tuple = (0.1, 1.0, 10.0)
    poem_variance_reg: tuple = (1e-4, 1e-3, 1e-2, 1e-1)
    poem_l2: tuple = (1e-6, 1e-4)
    poem_clip: tuple = (10.0, 100.0, 1000.0)
    poem_learning_rate: tuple = (1.0, 10.0, 100.0)
    batch_size: int = 64
    seed: int = 0

    def __post_init__(self):
        for name in ("lasso", "learning_rate", "poem_variance_reg", "poem_l2", "poem_clip",
                     "poem_learning_rate"):
            if not len(getattr(self, name)):
                raise ValueError(f"grid {name} is empty")
        if self.epochs < 0 or self.batch_size < 1:
            raise ValueError("epochs must be >= 0 and batch_size >= 1")
        if any(v <= 0 for v in self.poem_clip) or any(v <= 0 for v in self.poem_variance_reg):
            raise ValueError("POEM clip and variance regularization must be positive")

    @classmethod
    def from_mapping(cls, kv: dict) -> "HyperGrid":
        kwargs = {}
        for f in dataclasses.fields(cls):
            key = f"grid.{f.name}"
            if key not in kv:
                continue
            raw = kv[key]
            if f.name in ("epochs", "batch_size", "seed"):
                kwargs[f.name] = int(raw)
            else:
                kwargs[f.name] = tuple(float(v) for v in str(raw).split(",") if v.strip())
        return cls(**kwargs)


# ---------------------------------------------------------------------------
# split


def split_log(data: LoggedData, ratios=(1 / 3, 1 / 3, 1 / 3), seed: int = 0) -> tuple:
    """Partition by a seeded hash of exID into train / validate / test."""
    r = np.asarray(ratios, dtype=float)
    if len(r) != 3 or np.any(r < 0) or not math.isclose(r.sum(), 1.0, rel_tol=1e-9):
        raise ValueError("ratios must be three non-negative numbers summing to 1")
    h = _mix(data.ex_id.astype(np.uint64) ^ _mix(np.uint64(seed)))
    u = (h >> np.uint64(11)).astype(np.float64) * 2.0 ** -53
    cut = np.cumsum(r)
    part = np.searchsorted(cut[:2], u, side="right")
    return tuple(data.take(np.flatnonzero(part == j)) for j in range(3))


# ---------------------------------------------------------------------------
# objectives (value and gradient over compacted weights)


def _softplus(x):
    return np.logaddexp(0.0, x)


def _sigmoid(x):
    return 0.5 * (1.0 + np.tanh(0.5 * x))


class Design:
    """Padded (index, value) arrays of a compacted feature block.

    Display features are repeated for every candidate so that a score is a
    single gather-and-sum; padded entries have value 0.  Scoring many weight
    vectors at once goes through a sparse matrix built on demand.
    """

    def __init__(self, idx, val, mask, n_cols):
        self.idx, self.val, self.mask, self.n_cols = idx, val, mask, n_cols
        self._csr = None

    @classmethod
    def from_block(cls, block: FeatureBlock, n_cols: int) -> "Design":
        n, M, _ = block.c_idx.shape
        Kd = block.d_idx.shape[1]
        idx = np.concatenate([np.broadcast_to(block.d_idx[:, None, :], (n, M, Kd)),
                              block.c_idx], axis=2)
        val = np.concatenate([np.broadcast_to(block.d_val[:, None, :], (n, M, Kd)),
                              block.c_val], axis=2)
        val = np.where(block.mask[:, :, None], val, 0.0)
        return cls(idx, val, block.mask, n_cols)

    def __len__(self):
        return self.mask.shape[0]

    def scores(self, w) -> np.ndarray:
        """(n, M) scores for a weight vector, or (n, M, C) for a (D, C) weight matrix."""
        if np.ndim(w) == 1:
            return np.where(self.mask, np.einsum("nmk,nmk->nm", w[self.idx], self.val), 0.0)
        if self._csr is None:
            n, M, K = self.idx.shape
            self._csr = sparse.csr_matrix((self.val.ravel(), self.idx.ravel(),
                                           np.arange(0, n * M * K + 1, K)),
                                          shape=(n * M, self.n_cols))
        out = (self._csr @ w).reshape(self.mask.shape + (-1,))
        return np.where(self.mask[:, :, None], out, 0.0)

    def backprop(self, g, dim=None) -> np.ndarray:
        g = np.where(self.mask, g, 0.0)
        return np.bincount(self.idx.ravel(), weights=(g[:, :, None] * self.val).ravel(),
                           minlength=self.n_cols)

    def take(self, rows) -> "Design":
        return Design(self.idx[rows], self.val[rows], self.mask[rows], self.n_cols)

    def rows(self, cand) -> "Design":
        r = np.arange(len(self))
        return Design(self.idx[r, cand][:, None, :], self.val[r, cand][:, None, :],
                      np.ones((len(self), 1), dtype=bool), self.n_cols)


def design_for(featurizer: Featurizer, data: LoggedData, columns: np.ndarray) -> Design:
    block = featurizer.transform(data.contexts).compact(columns)
    return Design.from_block(block, len(columns) + 1)


@dataclass(frozen=True, eq=False)
class Problem:
    """Training split compacted to the columns it references."""

    block: Design         # compacted, (n, M)
    columns: np.ndarray
    logged: np.ndarray    # (n,) displayed candidate
    propensity: np.ndarray
    clicked: np.ndarray
    s: np.ndarray         # 1 / Pr(kept | delta)

    @property
    def n_params(self) -> int:
        return len(self.columns) + 1  # last column absorbs unseen features

    @property
    def n_hat(self) -> float:
        return math.fsum(self.s.tolist())

    def __len__(self):
        return len(self.logged)

    @classmethod
    def build(cls, data: LoggedData, featurizer: Featurizer) -> "Problem":
        _require_one_slot(data)
        if not len(data):
            raise LearningError("empty training log")
        raw = featurizer.transform(data.contexts)
        cols = raw.columns()
        return cls(Design.from_block(raw.compact(cols), len(cols) + 1), cols,
                   data.rankings[:, 0].copy(), data.propensity,
                   data.clicked.astype(float), data.sampling_weight)


def _require_one_slot(data: LoggedData):
    if len(data) and np.any(data.contexts.nb_slots != 1):
        raise LearningError("learners support 1-slot logs only")


class Objective:
    """``value(w)``, ``grad(w)`` of a loss to minimize; ``batch_grad`` for SGD."""

    def __init__(self, problem: Problem):
        self.p = problem
        self.nh = problem.n_hat
        self.scale = 1.0 / self.nh

    def value(self, w) -> float:
        raise NotImplementedError

    def grad(self, w) -> np.ndarray:
        return self.batch_grad(w, np.arange(len(self.p)))

    def batch_grad(self, w, rows) -> np.ndarray:
        raise NotImplementedError


class RegressionObjective(Objective):
    """sum_i s_i (w . phi(x_i, y_i) - delta_i)^2 / N_hat."""

    def __init__(self, problem: Problem):
        super().__init__(problem)
        self.rows_block = problem.block.rows(problem.logged)

    def _pred(self, w, rows):
        return self.rows_block.take(rows).scores(w)[:, 0]

    def value(self, w):
        rows = np.arange(len(self.p))
        r = self._pred(w, rows) - self.p.clicked
        return math.fsum((self.p.s * r * r).tolist()) * self.scale

    def batch_grad(self, w, rows):
        r = self._pred(w, rows) - self.p.clicked[rows]
        g = 2.0 * self.p.s[rows] * r * self.scale
        return self.rows_block.take(rows).backprop(g[:, None], len(w))


def oaa_weights(values: np.ndarray, mask: np.ndarray) -> tuple:
    """Split per-candidate values into (target-1 weight, target-0 weight).

    Candidate ``b`` gets weight ``v(b)+`` towards label 1; towards label 0 it
    gets ``v(b)-`` plus the positive value of every other candidate, so
    mass on a rewarded alternative pushes ``b`` down.
    """
    v = np.where(mask, values, 0.0)
    pos = np.maximum(v, 0.0)
    neg = np.maximum(-v, 0.0)
    w1 = pos
    w0 = np.where(mask, pos.sum(axis=1, keepdims=True) - pos + neg, 0.0)
    return w1, w0


def ips_values(problem: Problem) -> np.ndarray:
    """Reward vector of the IPS reduction: s * delta / q on the logged candidate, 0 elsewhere."""
    n, M = problem.block.mask.shape
    v = np.zeros((n, M))
    v[np.arange(n), problem.logged] = (problem.clicked / problem.propensity) * problem.s
    return v


def dro_values(problem: Problem, r_hat: np.ndarray) -> np.ndarray:
    """Doubly robust values s * (r(a) + 1{a = y} (delta - r(y)) / q)."""
    n = len(problem)
    rows = np.arange(n)
    v = r_hat.copy()
    v[rows, problem.logged] = v[rows, problem.logged] + \
        (problem.clicked - r_hat[rows, problem.logged]) / problem.propensity
    return np.where(problem.block.mask, problem.s[:, None] * v, 0.0)


class OAAObjective(Objective):
    """sum over impressions and candidates of W1 softplus(-f) + W0 softplus(f), / N_hat."""

    def __init__(self, problem: Problem, w1: np.ndarray, w0: np.ndarray):
        super().__init__(problem)
        self.w1, self.w0 = w1, w0
        active = np.flatnonzero((w1 + w0).sum(axis=1) > 0)
        self.active = active  # rows that carry any weight

    def value(self, w):
        f = self.p.block.scores(w)
        loss = self.w1 * _softplus(-f) + self.w0 * _softplus(f)
        return math.fsum(loss[self.p.block.mask].tolist()) * self.scale

    def batch_grad(self, w, rows):
        b = self.p.block.take(rows)
        f = b.scores(w)
        sig = _sigmoid(f)
        g = (self.w0[rows] * sig - self.w1[rows] * (1.0 - sig)) * self.scale
        return b.backprop(g, len(w))


class POEMObjective(Objective):
    """Negated variance-penalized clipped IPS objective of a softmax policy.

    ``R = sum s z / N_hat`` and ``V = sum s (z - R)^2 / (N_hat - 1)`` with
    ``z = delta * min(pi / q, clip)``; the loss is
    ``-(R - lam_var * sqrt(V / n_kept)) + lam_l2 * |w|^2``.
    """

    def __init__(self, problem: Problem, clip: float, variance_reg: float, l2: float):
        super().__init__(problem)
        if not clip > 0 or not variance_reg >= 0:
            raise LearningError("clip must be positive and variance_reg non-negative")
        self.clip, self.lam, self.l2 = clip, variance_reg, l2
        self.n_kept = len(problem)
        self.clicked_rows = np.flatnonzero(problem.clicked > 0)
        self.active = self.clicked_rows
        self.s_unclicked = math.fsum(problem.s[problem.clicked == 0].tolist())

    def _z(self, w, rows):
        b = self.p.block.take(rows)
        f = _exp_weights(b.scores(w), b.mask)
        prob = f / f.sum(axis=1, keepdims=True)
        y = self.p.logged[rows]
        u = prob[np.arange(len(rows)), y] / self.p.propensity[rows]
        unclipped = u < self.clip
        z = self.p.clicked[rows] * np.minimum(u, self.clip)
        return b, prob, y, u, unclipped, z

    def _dz(self, w, rows):
        """z and dz/dw for the given rows (rows with delta = 0 contribute nothing)."""
        b, prob, y, u, unclipped, z = self._z(w, rows)
        coef = self.p.clicked[rows] * unclipped * u  # dz = coef * dlog pi
        onehot = np.zeros_like(prob)
        onehot[np.arange(len(rows)), y] = 1.0
        return b, z, coef[:, None] * (onehot - prob)

    def stats(self, w) -> tuple:
        """(R, V) at ``w``; unclicked rows have z = 0 and enter in closed form."""
        c = self.clicked_rows
        z = self._z(w, c)[-1] if len(c) else np.zeros(0)
        s = self.p.s[c]
        nh = self.p.n_hat
        R = math.fsum((s * z).tolist()) / nh
        V = (math.fsum((s * (z - R) ** 2).tolist()) + R * R * self.s_unclicked) / (nh - 1.0)
        return R, V

    def value(self, w):
        R, V = self.stats(w)
        return -(R - self.lam * math.sqrt(V / self.n_kept)) + self.l2 * float(w @ w)

    def grad(self, w):
        R, V = self.stats(w)
        return self._grad(w, self.clicked_rows, R, V, 1.0)

    def _grad(self, w, rows, R, V, scale):
        nh = self.nh
        b, z, dz = self._dz(w, rows)
        s = self.p.s[rows]
        coef = s / nh
        if self.lam > 0 and V > 0:
            coef = coef - self.lam / (2.0 * math.sqrt(V * self.n_kept)) * \
                2.0 * s * (z - R) / (nh - 1.0)
        g = -scale * b.backprop(coef[:, None] * dz, len(w))
        return g + 2.0 * self.l2 * w

    def surrogate_value(self, w, R_t, V_t) -> float:
        """Loss with sqrt(V) linearized at V_t and the mean in V frozen at R_t."""
        c = self.clicked_rows
        z = self._z(w, c)[-1]
        s, nh = self.p.s[c], self.nh
        R = math.fsum((s * z).tolist()) / nh
        Vr = (math.fsum((s * (z - R_t) ** 2).tolist()) + R_t * R_t * self.s_unclicked) \
            / (nh - 1.0)
        pen = math.sqrt(V_t / self.n_kept) + (Vr - V_t) / (2.0 * math.sqrt(V_t * self.n_kept)) \
            if V_t > 0 else 0.0
        return -(R - self.lam * pen) + self.l2 * float(w @ w)

    def surrogate_grad(self, w, R_t, V_t, rows=None, scale=1.0) -> np.ndarray:
        rows = self.clicked_rows if rows is None else rows
        return self._grad(w, rows, R_t, V_t, scale)


# ---------------------------------------------------------------------------
# optimizer


def adagrad_l1(objective: Objective, n_params: int, lr: float, l1: float, epochs: int,
               batch_size: int, rng: np.random.Generator, rows: np.ndarray | None = None,
               on_epoch=None, grad_fn=None) -> np.ndarray:
    """Minibatch AdaGrad with a per-coordinate L1 proximal step.

    ``rows`` restricts sampling to the impressions that can have a non-zero
    gradient; the batch gradient is rescaled so it stays an unbiased estimate
    of the full gradient.  ``on_epoch(epoch, w)`` sees a copy after each pass.
    """
    w = np.zeros(n_params)
    G = np.zeros(n_params)
    rows = np.arange(len(objective.p)) if rows is None else rows
    for epoch in range(1, epochs + 1):
        if grad_fn is not None:
            grad_fn.refresh(w)
        order = rng.permutation(rows)
        for start in range(0, len(order), batch_size):
            batch = order[start: start + batch_size]
            if grad_fn is not None:
                g = grad_fn(w, batch)
            else:
                g = objective.batch_grad(w, batch)
            G += g * g
            step = lr / (np.sqrt(G) + 1e-12)
            w = w - step * g
            if l1 > 0:
                w = np.sign(w) * np.maximum(np.abs(w) - step * l1, 0.0)
            w[-1] = 0.0
        if on_epoch is not None:
            on_epoch(epoch, w.copy())
    return w


class _PoemStep:
    """Minibatch gradient of the POEM surrogate with statistics refreshed each epoch."""

    def __init__(self, obj: POEMObjective):
        self.obj = obj
        self.R = self.V = 0.0
        self.n_rows = len(obj.clicked_rows)

    def refresh(self, w):
        self.R, self.V = self.obj.stats(w)

    def __call__(self, w, batch):
        return self.obj.surrogate_grad(w, self.R, self.V, batch, self.n_rows / len(batch))


# ---------------------------------------------------------------------------
# candidates


@dataclass(frozen=True, eq=False)
class CandidateModel:
    method: str
    params: dict
    featurizer: Featurizer
    columns: np.ndarray
    weights: np.ndarray  # compact, last entry is the unseen-feature column
    mode: str = "deterministic"

    def policy(self) -> LinearRankingPolicy:
        full = np.zeros(self.featurizer.dim)
        full[self.columns] = self.weights[:-1]
        return LinearRankingPolicy(self.featurizer, full, 1.0, self.mode, self.method)

    @property
    def finite(self) -> bool:
        return bool(np.all(np.isfinite(self.weights)))


def _grid_runs(grid: HyperGrid, problem: Problem, method: str, make_objective, mode,
               featurizer, extra_grid=({},), poem=False) -> list:
    out = []
    run = 0
    for extra in extra_grid:
        for lr in (grid.poem_learning_rate if poem else grid.learning_rate):
            for lam in ((0.0,) if poem else grid.lasso):
                obj = make_objective(**extra)
                rng = np.random.default_rng(np.random.SeedSequence([grid.seed, METHODS.index(method),
                                                                     run]))
                run += 1
                snaps = []

                def keep(epoch, w, lr=lr, lam=lam, extra=extra):
                    params = dict(extra, learning_rate=lr, epochs=epoch)
                    if not poem:
                        params["lasso"] = lam
                    snaps.append(CandidateModel(method, params, featurizer, problem.columns, w,
                                                mode))

                adagrad_l1(obj, problem.n_params, lr, lam, grid.epochs, grid.batch_size, rng,
                           rows=getattr(obj, "active", None), on_epoch=keep,
                           grad_fn=_PoemStep(obj) if poem else None)
                out.extend(snaps)
    return out


def train_regression(train: LoggedData, featurizer: Featurizer, grid: HyperGrid,
                     keep_prob: float | None = None) -> list:
    problem = _problem(train, featurizer, keep_prob)
    return _grid_runs(grid, problem, "regression", lambda: RegressionObjective(problem),
                      "deterministic", featurizer)


def _problem(train, featurizer, keep_prob):
    if keep_prob is not None and keep_prob != train.keep_prob:
        raise ValueError("keep_prob differs from the log's")
    return Problem.build(train, featurizer)


def train_ips(train: LoggedData, featurizer: Featurizer, grid: HyperGrid,
              keep_prob: float | None = None) -> list:
    problem = _problem(train, featurizer, keep_prob)
    if not np.any(problem.clicked > 0):
        raise LearningError("all rewards are zero: IPS has nothing to learn from")
    w1, w0 = oaa_weights(ips_values(problem), problem.block.mask)
    obj = OAAObjective(problem, w1, w0)
    return _grid_runs(grid, problem, "ips", lambda: obj, "deterministic", featurizer)


def regression_predictions(model: CandidateModel | None, data: LoggedData) -> np.ndarray:
    """r_hat(x, a) for every candidate, clipped to [0, 1]."""
    if model is None:
        raise LearningError("DRO needs a fitted regression model")
    block = model.featurizer.transform(data.contexts).compact(model.columns)
    return np.where(block.mask, np.clip(block.scores(model.weights), 0.0, 1.0), 0.0)


def train_dro(train: LoggedData, featurizer: Featurizer, grid: HyperGrid,
              keep_prob: float | None = None, regression: CandidateModel | None = None,
              r_hat: np.ndarray | None = None) -> list:
    problem = _problem(train, featurizer, keep_prob)
    if r_hat is None:
        r_hat = regression_predictions(regression, train)
    w1, w0 = oaa_weights(dro_values(problem, r_hat), problem.block.mask)
    obj = OAAObjective(problem, w1, w0)
    return _grid_runs(grid, problem, "dro", lambda: obj, "deterministic", featurizer)


def train_poem(train: LoggedData, featurizer: Featurizer, grid: HyperGrid,
               keep_prob: float | None = None) -> list:
    problem = _problem(train, featurizer, keep_prob)
    if not np.any(problem.clicked > 0):
        raise LearningError("all rewards are zero: POEM has nothing to learn from")
    extra = [dict(variance_reg=v, clip=c, l2=l) for v in grid.poem_variance_reg
             for c in grid.poem_clip for l in grid.poem_l2]
    return _grid_runs(grid, problem, "poem",
                      lambda variance_reg, clip, l2: POEMObjective(problem, clip, variance_reg, l2),
                      "stochastic", featurizer, extra_grid=extra, poem=True)


# ---------------------------------------------------------------------------
# selection


@dataclass(frozen=True)
class TrainedPolicyReport:
    method: str
    policy: Policy
    chosen: dict
    validation_ips: float
    test: EstimateReport

    def row(self) -> list:
        r = self.test
        params = ",".join(f"{k}={v!r}" for k, v in sorted(self.chosen.items()))
        return [self.method, params or "-", _g(r.ips * 1e4), _g(r.ips_halfwidth * 1e4),
                _g(r.snips * 1e4), _g(r.snips_halfwidth * 1e4), _g(r.cHat),
                _g(r.chat_halfwidth), _g(self.validation_ips * 1e4)]


REPORT_COLUMNS = ("method", "hyperparams", "ips_x1e4", "ips_hw_x1e4", "snips_x1e4",
                  "snips_hw_x1e4", "c_hat", "c_hat_hw", "validation_ips_x1e4")


def _g(x):
    return format(float(x), ".12g")


def validation_ips(candidates: Sequence[CandidateModel], validate: LoggedData,
                   batch: int = 64) -> np.ndarray:
    """IPS of every candidate on ``validate``; non-finite models score -inf.

    Only clicked impressions contribute to IPS, so only they are scored, and
    consecutive candidates sharing a feature space are scored together.
    """
    _require_one_slot(validate)
    if not len(validate):
        raise LearningError("empty validation log")
    nh = math.fsum(validate.sampling_weight.tolist())
    clicked = np.flatnonzero(validate.clicked > 0)
    sub = validate.take(clicked)
    y = sub.rankings[:, 0]
    rows = np.arange(len(sub))
    designs = {}
    out = np.full(len(candidates), -np.inf)
    j = 0
    while j < len(candidates):
        c = candidates[j]
        key = (id(c.featurizer), id(c.columns), c.mode)
        k = j
        while k < len(candidates) and k - j < batch and \
                (id(candidates[k].featurizer), id(candidates[k].columns), candidates[k].mode) == key:
            k += 1
        group = [i for i in range(j, k) if candidates[i].finite]
        if group and len(sub):
            if key[:2] not in designs:
                designs[key[:2]] = design_for(c.featurizer, sub, c.columns)
            d = designs[key[:2]]
            W = np.stack([candidates[i].weights for i in group], axis=1)
            scores = d.scores(W)  # (n, M, C)
            if c.mode == "deterministic":
                chosen = np.argmax(np.where(d.mask[:, :, None], scores, -np.inf), axis=1)
                pi = (chosen == y[:, None]).astype(float)
            else:
                t = np.where(d.mask[:, :, None], scores, -np.inf)
                f = np.exp(t - t.max(axis=1, keepdims=True))
                pi = f[rows, y] / f.sum(axis=1)
            dw = pi / sub.propensity[:, None]  # s = 1 on clicked rows
            for col, i in enumerate(group):
                out[i] = math.fsum(dw[:, col].tolist()) / nh
        elif group:
            out[group] = 0.0
        j = k
    return out


def select_and_evaluate(candidates: Sequence[CandidateModel], validate: LoggedData,
                        test: LoggedData, keep_prob: float | None = None) -> TrainedPolicyReport:
    """Pick the candidate with the highest validation IPS (first in grid order on ties)."""
    if not candidates:
        raise LearningError("no candidate models")
    scores = validation_ips(candidates, validate)
    best = int(np.argmax(scores))
    c = candidates[best]
    policy = c.policy()
    return TrainedPolicyReport(c.method, policy, dict(c.params), float(scores[best]),
                               evaluate_policy(test, policy, label=c.method))


def reference_report(name: str, policy: Policy, validate: LoggedData,
                     test: LoggedData) -> TrainedPolicyReport:
    val = evaluate_policy(validate, policy).ips
    return TrainedPolicyReport(name, policy, {}, val, evaluate_policy(test, policy, label=name))


@dataclass
class BenchmarkResult:
    reports: list
    splits: tuple = field(repr=False, default=())

    def by_method(self) -> dict:
        return {r.method: r for r in self.reports}

    def table(self, fmt: str = "tsv") -> str:
        if fmt == "jsonl":
            return format_jsonl([{"method": r.method, "hyperparams": r.chosen,
                                  "validation_ips": r.validation_ips, **r.test.as_dict()}
                                 for r in self.reports])
        return format_tsv(REPORT_COLUMNS, [r.row() for r in self.reports])


def run_benchmark(data: LoggedData, logging_policy: Policy, policy_featurizer: Featurizer,
                  regression_featurizer: Featurizer | None = None, grid: HyperGrid = HyperGrid(),
                  split_seed: int = 0, methods: Sequence[str] = METHODS) -> BenchmarkResult:
    """Split, train every method, select on validation and report on test.

    Rows: random, logging, then the learners in ``methods`` order.
    """
    train, validate, test = split_log(data, seed=split_seed)
    reports = [reference_report("random", UniformPolicy(), validate, test),
               reference_report("logging", logging_policy, validate, test)]
    reg_fz = regression_featurizer or policy_featurizer
    reg_model = None
    if "regression" in methods or "dro" in methods:
        cands = train_regression(train, reg_fz, grid)
        scores = validation_ips(cands, validate)
        reg_model = cands[int(np.argmax(scores))]
        if "regression" in methods:
            reports.append(select_and_evaluate(cands, validate, test))
    if "ips" in methods:
        reports.append(select_and_evaluate(train_ips(train, policy_featurizer, grid), validate, test))
    if "dro" in methods:
        reports.append(select_and_evaluate(
            train_dro(train, policy_featurizer, grid, regression=reg_model), validate, test))
    if "poem" in methods:
        reports.append(select_and_evaluate(train_poem(train, policy_featurizer, grid), validate,
                                           test))
    return BenchmarkResult(reports, (train, validate, test))

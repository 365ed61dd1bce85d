"""Synthetic propensity-logged banner impressions.

Each impression draws a context with a candidate pool, lets the logging
policy (Plackett-Luce over ``exp(T * <theta_log, phi>)``) fill ``nb_slots``
positions, draws per-slot clicks and finally drops unclicked impressions
with probability ``1 - subsample_keep_prob``.

The true click model is known, so the value of any policy can be computed
exactly by enumerating rankings (:func:`true_policy_value`).
"""
from __future__ import annotations

import dataclasses
import math
from dataclasses import dataclass, field
from typing import IO, Callable, Sequence

import numpy as np

from .data import ContextSample, Contexts, LoggedData
from .features import _BIAS, _CROSS, Featurizer, FeatureBlock, _key, _mix, parse_crosses
from .logformat import (MAX_SLOTS, NUM_FEATURES, CandidateRecord, ImpressionRecord,
                        write_impressions)
from .policies import LinearRankingPolicy, Policy
from .ranking import enumerate_rankings, perm_count, plackett_luce_prob, sample_plackett_luce

CHUNK = 8192


class ConfigError(ValueError):
    pass


@dataclass(frozen=True)
class WorldConfig:
    """Synthetic environment settings.

    Display features are ids 1-2 (numeric) and the first
    ``display_categorical_count`` categorical ids starting at 3; candidate
    features take the following ids.  ``latent_crosses`` lists
    (display id, candidate id) interactions that the world's scorer and click
    model see but that are not written to the log unless ``emit_interactions``.
    """

    seed: int
    nb_slots: int = 1
    pool_size_min: int = 8
    pool_size_max: int = 12
    impression_count: int = 10000
    numeric_feature_count: int = 2
    categorical_feature_count: int = 8
    display_categorical_count: int = 3
    display_vocabulary: int = 4
    product_vocabulary: int = 20
    multi_valued_feature: int = 7
    multi_valued_max: int = 3
    logging_temperature: float = 1.0
    subsample_keep_prob: float = 0.1
    base_click_rate: float = 0.05
    position_bias_decay: float = 0.5
    logging_weight_scale: float = 0.5
    click_weight_scale: float = 0.5
    logging_alignment: float = 0.5
    click_cross_scale: float = 1.0
    latent_crosses: str = "3x6"
    emit_interactions: bool = False
    world_hash_bits: int = 16

    def __post_init__(self):
        self.validate()

    def validate(self) -> None:
        if not 1 <= self.nb_slots <= MAX_SLOTS:
            raise ConfigError(f"nb_slots must be in 1..{MAX_SLOTS}")
        if self.pool_size_min < self.nb_slots or self.pool_size_max < self.pool_size_min:
            raise ConfigError("need nb_slots <= pool_size_min <= pool_size_max")
        if self.numeric_feature_count != 2:
            raise ConfigError("exactly two numeric features (ids 1 and 2) are supported")
        if not 0 < self.display_categorical_count < self.categorical_feature_count:
            raise ConfigError("need 0 < display_categorical_count < categorical_feature_count")
        last = 2 + self.categorical_feature_count + int(self.emit_interactions)
        if last > NUM_FEATURES:
            raise ConfigError(f"feature ids would exceed {NUM_FEATURES}")
        if self.multi_valued_feature and self.multi_valued_feature not in self.product_feature_ids:
            raise ConfigError("multi_valued_feature must be a candidate feature id (or 0)")
        if not 0 < self.subsample_keep_prob <= 1:
            raise ConfigError("subsample_keep_prob must lie in (0, 1]")
        if not 0 < self.base_click_rate < 1:
            raise ConfigError("base_click_rate must lie in (0, 1)")
        if self.logging_temperature < 0:
            raise ConfigError("logging_temperature must be non-negative")
        if self.impression_count < 0:
            raise ConfigError("impression_count must be non-negative")
        if min(self.display_vocabulary, self.product_vocabulary) < 1 or self.multi_valued_max < 1:
            raise ConfigError("vocabulary sizes and multi_valued_max must be positive")
        if not -1 <= self.logging_alignment <= 1:
            raise ConfigError("logging_alignment must lie in [-1, 1]")
        for a, b in self.crosses:
            if a not in self.display_feature_ids or b not in self.product_feature_ids:
                raise ConfigError(f"cross {a}x{b} must pair a display id with a candidate id")
        if self.emit_interactions and not self.crosses:
            raise ConfigError("emit_interactions needs at least one latent cross")

    @property
    def display_feature_ids(self) -> tuple:
        return tuple(range(3, 3 + self.display_categorical_count))

    @property
    def product_feature_ids(self) -> tuple:
        return tuple(range(3 + self.display_categorical_count, 3 + self.categorical_feature_count))

    @property
    def interaction_feature_id(self) -> int | None:
        return 3 + self.categorical_feature_count if self.emit_interactions else None

    @property
    def crosses(self) -> tuple:
        return parse_crosses(self.latent_crosses)

    def replace(self, **changes) -> "WorldConfig":
        return dataclasses.replace(self, **changes)

    # flat key=value files

    def to_text(self) -> str:
        return "".join(f"{f.name}={_fmt(getattr(self, f.name))}\n" for f in dataclasses.fields(self))

    @classmethod
    def from_mapping(cls, kv: dict) -> "WorldConfig":
        if "seed" not in kv:
            raise ConfigError("seed is mandatory")
        kwargs = {}
        for f in dataclasses.fields(cls):
            if f.name in kv:
                kwargs[f.name] = _coerce(f.type, kv[f.name], f.name)
        return cls(**kwargs)


def _fmt(v) -> str:
    if isinstance(v, bool):
        return str(int(v))
    if isinstance(v, float):
        return repr(v)
    return str(v)


def _coerce(typ, raw, name):
    if not isinstance(raw, str):
        return raw
    try:
        if typ in (bool, "bool"):
            if raw.lower() in ("1", "true", "yes", "on"):
                return True
            if raw.lower() in ("0", "false", "no", "off"):
                return False
            raise ValueError(raw)
        if typ in (int, "int"):
            return int(raw)
        if typ in (float, "float"):
            return float(raw)
    except ValueError:
        raise ConfigError(f"{name}: cannot parse {raw!r}") from None
    return raw


def read_key_values(path) -> dict:
    """Flat ``key=value`` file with ``#`` comments."""
    kv = {}
    with open(path, encoding="utf-8") as fh:
        for n, raw in enumerate(fh, 1):
            line = raw.split("#", 1)[0].strip()
            if not line:
                continue
            key, sep, value = line.partition("=")
            if not sep:
                raise ConfigError(f"{path}:{n}: expected key=value")
            kv[key.strip()] = value.strip()
    return kv


# ---------------------------------------------------------------------------
# ground truth


@dataclass(frozen=True, eq=False)
class GroundTruthModel:
    featurizer: Featurizer
    logging_weights: np.ndarray
    true_click_weights: np.ndarray
    position_bias: np.ndarray
    base_click_rate: float

    def __post_init__(self):
        pb = np.asarray(self.position_bias)
        if np.any(pb < 0) or np.any(pb > 1) or np.any(np.diff(pb) > 0):
            raise ValueError("position bias must lie in [0, 1] and be non-increasing")

    @classmethod
    def from_config(cls, config: WorldConfig) -> "GroundTruthModel":
        rng = np.random.default_rng(np.random.SeedSequence([config.seed, 0]))
        fz = Featurizer(dim=2 ** config.world_hash_bits, crosses=config.crosses)
        z1 = rng.standard_normal(fz.dim)
        z2 = rng.standard_normal(fz.dim)
        rho = config.logging_alignment
        logging = config.logging_weight_scale * z1
        click = config.click_weight_scale * (rho * z1 + math.sqrt(1 - rho * rho) * z2)
        # the click level is set by base_click_rate alone
        bias = int(_key(_BIAS, 0, 0) % np.uint64(fz.dim))
        logging[bias] = click[bias] = 0.0
        cross_idx = _cross_indices(config, fz)
        if len(cross_idx):
            # the logging scorer ignores interactions; the click model leans on them
            logging[cross_idx] = 0.0
            click[cross_idx] = config.click_cross_scale * rng.standard_normal(len(cross_idx))
        pb = np.arange(1, MAX_SLOTS + 1, dtype=float) ** -config.position_bias_decay
        return cls(fz, logging, click, pb[: config.nb_slots].copy(), config.base_click_rate)

    def logging_policy(self, temperature: float) -> LinearRankingPolicy:
        """The logging replica pi_0, recomputed from the model's scorer."""
        return LinearRankingPolicy(self.featurizer, self.logging_weights, temperature,
                                   "stochastic", "logging")

    def click_propensity(self, block: FeatureBlock) -> np.ndarray:
        """sigmoid(<theta_true, phi> + logit(base rate)) per candidate, before position bias."""
        logit = math.log(self.base_click_rate / (1 - self.base_click_rate))
        return np.where(block.mask, 1.0 / (1.0 + np.exp(-(block.scores(self.true_click_weights)
                                                          + logit))), 0.0)


def _cross_indices(config: WorldConfig, fz: Featurizer) -> np.ndarray:
    out = []
    dim = np.uint64(fz.dim)
    for a, b in config.crosses:
        da = np.arange(config.display_vocabulary)
        pb_ = np.arange(config.product_vocabulary)
        inner = _key(_CROSS, a, da)[:, None] ^ _key(_CROSS, b, pb_)[None, :]
        out.append((_mix(inner) % dim).astype(np.int64).ravel())
    return np.unique(np.concatenate(out)) if out else np.zeros(0, np.int64)


# ---------------------------------------------------------------------------
# contexts


def _sample_contexts(rng: np.random.Generator, config: WorldConfig, n: int) -> Contexts:
    M = config.pool_size_max
    pool = rng.integers(config.pool_size_min, config.pool_size_max + 1, size=n)
    numeric = rng.standard_normal((n, 2))
    disp_ids = np.array(config.display_feature_ids)
    disp_code = rng.integers(0, config.display_vocabulary, size=(n, len(disp_ids)))
    disp_fid = np.broadcast_to(disp_ids, (n, len(disp_ids))).copy()

    fids, codes = [], []
    for fid in config.product_feature_ids:
        if fid == config.multi_valued_feature:
            raw = np.sort(rng.integers(0, config.product_vocabulary,
                                       size=(n, M, config.multi_valued_max)), axis=2)
            count = rng.integers(1, config.multi_valued_max + 1, size=(n, M))
            keep = np.arange(config.multi_valued_max)[None, None, :] < count[:, :, None]
            dup = np.zeros_like(keep)
            dup[:, :, 1:] = raw[:, :, 1:] == raw[:, :, :-1]
            keep &= ~dup
            fids.append(np.where(keep, fid, 0))
            codes.append(np.where(keep, raw, 0))
        else:
            fids.append(np.full((n, M, 1), fid))
            codes.append(rng.integers(0, config.product_vocabulary, size=(n, M, 1)))
    cand_fid = np.concatenate(fids, axis=2)
    cand_code = np.concatenate(codes, axis=2)
    if config.emit_interactions:
        a, b = config.crosses[0]
        da = disp_code[:, list(config.display_feature_ids).index(a)]
        col = list(config.product_feature_ids).index(b)
        if b == config.multi_valued_feature:
            raise ConfigError("interaction feature needs a single-valued candidate feature")
        col = sum(config.multi_valued_max if f == config.multi_valued_feature else 1
                  for f in config.product_feature_ids[:col])
        inter = da[:, None] * config.product_vocabulary + cand_code[:, :, col]
        cand_fid = np.concatenate([cand_fid, np.full((n, M, 1), config.interaction_feature_id)], 2)
        cand_code = np.concatenate([cand_code, inter[:, :, None]], axis=2)
    real = np.arange(M)[None, :] < pool[:, None]
    cand_fid = np.where(real[:, :, None], cand_fid, 0)
    cand_code = np.where(real[:, :, None], cand_code, 0)
    return Contexts(pool.astype(np.int64), np.full(n, config.nb_slots, dtype=np.int64), numeric,
                    disp_fid.astype(np.int64), disp_code.astype(np.int64),
                    np.full((n, M, 2), np.nan), cand_fid.astype(np.int64),
                    cand_code.astype(np.int64))


def sample_context(rng: np.random.Generator, config: WorldConfig) -> ContextSample:
    return _sample_contexts(rng, config, 1).sample(0)


def logging_scores(ctx: ContextSample, model: GroundTruthModel, temperature: float) -> np.ndarray:
    """Plackett-Luce weights f_p of the logging policy for one context."""
    batch = Contexts.from_samples([ctx], 1)
    return model.logging_policy(temperature).plackett_luce_weights(batch)[0, : len(ctx.candidates)]


def propensity_of(scores: Sequence[float], ranking: Sequence[int]) -> float:
    f = np.asarray(scores, dtype=float)
    ranking = list(ranking)
    if len(set(ranking)) != len(ranking):
        raise ValueError(f"ranking {ranking} repeats a candidate")
    if any(not 0 <= r < len(f) for r in ranking):
        raise ValueError(f"ranking {ranking} out of range")
    if np.any(f <= 0):
        raise ValueError("scores must be positive")
    return float(plackett_luce_prob(f[None, :], np.array([ranking]))[0])


def sample_ranking(scores: Sequence[float], k: int, rng: np.random.Generator) -> tuple:
    f = np.asarray(scores, dtype=float)
    if k > len(f):
        raise ValueError(f"cannot fill {k} slots from {len(f)} candidates")
    if np.any(f <= 0) or not np.all(np.isfinite(f)):
        raise ValueError("scores must be positive and finite")
    ranking = sample_plackett_luce(np.log(f)[None, :], k, rng)[0]
    return tuple(int(i) for i in ranking), propensity_of(f, ranking)


def _slot_click_probs(model: GroundTruthModel, cp: np.ndarray, rankings: np.ndarray) -> np.ndarray:
    """Per-slot click probabilities, shape of ``rankings``; 0 on unused slots."""
    K = rankings.shape[-1]
    pb = np.zeros(K)
    pb[: min(K, len(model.position_bias))] = model.position_bias[:K]
    active = rankings >= 0
    gathered = np.take_along_axis(cp, np.where(active, rankings, 0).reshape(len(cp), -1), axis=1)
    return np.where(active, pb * gathered.reshape(rankings.shape), 0.0)


def sample_clicks(ctx: ContextSample, ranking: Sequence[int], model: GroundTruthModel,
                  rng: np.random.Generator) -> tuple:
    batch = Contexts.from_samples([ctx], len(ranking))
    cp = model.click_propensity(model.featurizer.transform(batch))
    p = _slot_click_probs(model, cp, np.array([list(ranking)]))[0]
    return tuple(int(c) for c in rng.random(len(p)) < p)


def subsample(impression: ImpressionRecord, keep_prob: float, rng: np.random.Generator):
    """Keep clicked impressions; keep unclicked ones with probability ``keep_prob``."""
    if not 0 < keep_prob <= 1:
        raise ValueError("keep_prob must lie in (0, 1]")
    if impression.was_ad_clicked or rng.random() < keep_prob:
        return impression
    return None


# ---------------------------------------------------------------------------
# bulk simulation


@dataclass(frozen=True, eq=False)
class SimChunk:
    contexts: Contexts
    rankings: np.ndarray
    propensity: np.ndarray
    slot_clicks: np.ndarray
    clicked: np.ndarray
    kept: np.ndarray
    ex_id: np.ndarray
    hash_id: np.ndarray

    def logged(self, keep_prob: float, subsampled: bool = True) -> LoggedData:
        rows = np.flatnonzero(self.kept) if subsampled else np.arange(len(self.kept))
        return LoggedData(self.contexts.take(rows), self.rankings[rows], self.propensity[rows],
                          self.clicked[rows].astype(np.int64), self.ex_id[rows],
                          keep_prob if subsampled else 1.0)

    def records(self) -> list:
        """ImpressionRecords of the kept impressions, displayed candidates first."""
        out = []
        for i in np.flatnonzero(self.kept):
            sample = self.contexts.sample(i)
            k = int(self.contexts.nb_slots[i])
            shown = [int(j) for j in self.rankings[i, :k]]
            rest = [j for j in range(len(sample.candidates)) if j not in set(shown)]
            cands = [CandidateRecord(int(self.slot_clicks[i, s]), sample.candidates[j])
                     for s, j in enumerate(shown)]
            cands += [CandidateRecord(0, sample.candidates[j]) for j in rest]
            out.append(ImpressionRecord(int(self.ex_id[i]), str(int(self.hash_id[i])),
                                        int(self.clicked[i]), float(self.propensity[i]), k,
                                        sample.display_features, tuple(cands)))
        return out


class Simulator:
    """Sequential generator of impression chunks for one (config, model) pair."""

    def __init__(self, config: WorldConfig, model: GroundTruthModel | None = None,
                 replication: int = 0):
        self.config = config
        self.model = model or GroundTruthModel.from_config(config)
        self.logging = self.model.logging_policy(config.logging_temperature)
        # the world (model) depends on config.seed only; ``replication`` varies the draws
        self.rng = np.random.default_rng(np.random.SeedSequence([config.seed, 1, replication]))
        self.next_ex_id = 0

    def chunk(self, n: int) -> SimChunk:
        cfg, rng = self.config, self.rng
        ctx = _sample_contexts(rng, cfg, n)
        hash_id = rng.integers(0, 2 ** 63, size=n, dtype=np.int64)
        block = self.model.featurizer.transform(ctx)
        t = cfg.logging_temperature * block.scores(self.model.logging_weights)
        t = np.where(ctx.candidate_mask, t, -np.inf)
        t = t - t.max(axis=1, keepdims=True)
        rankings = sample_plackett_luce(t, ctx.nb_slots, rng)
        f = np.where(ctx.candidate_mask, np.exp(t), 0.0)
        q = plackett_luce_prob(f, rankings)
        p = _slot_click_probs(self.model, self.model.click_propensity(block), rankings)
        slot_clicks = (rng.random(p.shape) < p).astype(np.int64)
        clicked = slot_clicks.any(axis=1).astype(np.int64)
        kept = (clicked == 1) | (rng.random(n) < cfg.subsample_keep_prob)
        ex_id = np.arange(self.next_ex_id, self.next_ex_id + n, dtype=np.int64)
        self.next_ex_id += n
        return SimChunk(ctx, rankings, q, slot_clicks, clicked, kept, ex_id, hash_id)

    def chunks(self, total: int, size: int = CHUNK):
        done = 0
        while done < total:
            n = min(size, total - done)
            yield self.chunk(n)
            done += n


@dataclass
class LogSummary:
    n_total: int = 0
    n_kept: int = 0
    n_clicked: int = 0
    slot_counts: dict = field(default_factory=dict)
    seed: int = 0

    def to_text(self) -> str:
        lines = [f"n_total={self.n_total}", f"n_kept={self.n_kept}",
                 f"n_clicked={self.n_clicked}", f"model_seed={self.seed}"]
        lines += [f"kept_slots_{k}={v}" for k, v in sorted(self.slot_counts.items())]
        return "\n".join(lines) + "\n"


def generate_log(config: WorldConfig, model: GroundTruthModel | None, sink: IO[str] | Callable
                 ) -> LogSummary:
    """Simulate ``config.impression_count`` impressions and write the kept ones to ``sink``.

    ``sink`` is a text stream or a callable receiving lists of records.
    """
    sim = Simulator(config, model)
    summary = LogSummary(seed=config.seed)
    for ch in sim.chunks(config.impression_count):
        recs = ch.records()
        if callable(sink):
            sink(recs)
        else:
            write_impressions(recs, sink)
        summary.n_total += len(ch.kept)
        summary.n_kept += len(recs)
        summary.n_clicked += int(ch.clicked.sum())
        for r in recs:
            summary.slot_counts[r.nb_slots] = summary.slot_counts.get(r.nb_slots, 0) + 1
    return summary


@dataclass
class SimulationResult:
    data: LoggedData | None
    n_total: int
    n_clicked: int
    truths: list
    accumulators: list
    full_accumulators: list


def simulate(config: WorldConfig, model: GroundTruthModel | None = None, *,
             keep_data: bool = True, oracle: Sequence[Policy] = (),
             evaluate: Sequence[Policy] = (), evaluate_full: bool = False,
             replication: int = 0) -> SimulationResult:
    """Array-level simulation without going through the text format.

    ``oracle`` policies get their exact value averaged over *all* simulated
    contexts (kept or not).  ``evaluate`` policies are accumulated chunk by
    chunk into estimator accumulators on the sub-sampled log and, with
    ``evaluate_full``, on the complete log as well.
    """
    from .estimators import EstimatorAccumulator

    sim = Simulator(config, model, replication)
    kp = config.subsample_keep_prob
    parts = []
    truth_sums = [0.0] * len(oracle)
    accs = [EstimatorAccumulator(kp) for _ in evaluate]
    full = [EstimatorAccumulator(1.0) for _ in evaluate] if evaluate_full else []
    n_clicked = 0
    for ch in sim.chunks(config.impression_count):
        n_clicked += int(ch.clicked.sum())
        kept = ch.logged(kp)
        if keep_data:
            parts.append(kept)
        for j, pol in enumerate(oracle):
            truth_sums[j] += float(np.sum(policy_values(pol, sim.model, ch.contexts)))
        for j, pol in enumerate(evaluate):
            accs[j].add_logged(kept, pol)
            if evaluate_full:
                full[j].add_logged(ch.logged(1.0, subsampled=False), pol)
    n = config.impression_count
    data = LoggedData.concat(parts) if keep_data and any(len(p) for p in parts) else None
    return SimulationResult(data, n, n_clicked, [s / n if n else math.nan for s in truth_sums],
                            accs, full)


# ---------------------------------------------------------------------------
# exact oracle


def expected_reward(model: GroundTruthModel, ctx: Contexts, rankings: np.ndarray,
                    block: FeatureBlock | None = None) -> np.ndarray:
    """E[banner click | x, y] = 1 - prod_s (1 - pb_s * c(y_s)); rankings (n, K) or (n, P, K)."""
    block = block if block is not None else model.featurizer.transform(ctx)
    cp = model.click_propensity(block)
    p = _slot_click_probs(model, cp, rankings)
    return 1.0 - np.prod(1.0 - p, axis=-1)


def policy_values(policy: Policy, model: GroundTruthModel, ctx: Contexts,
                  max_rows: int = 1 << 16) -> np.ndarray:
    """Exact per-context value sum_y pi(y|x) E[click | x, y] by enumeration."""
    out = np.empty(len(ctx))
    block = model.featurizer.transform(ctx)
    cp = model.click_propensity(block)
    keys = np.stack([ctx.pool_size, ctx.nb_slots], axis=1)
    for m, k in np.unique(keys, axis=0):
        rows = np.flatnonzero((ctx.pool_size == m) & (ctx.nb_slots == k))
        perms = enumerate_rankings(int(m), int(k))
        P = len(perms)
        step = max(1, max_rows // P)
        for s in range(0, len(rows), step):
            r = rows[s: s + step]
            sub = ctx.take(r)
            ranks = np.broadcast_to(perms, (len(r), P, int(k)))
            probs = policy.prob(sub, ranks)
            p = _slot_click_probs(model, cp[r], ranks)
            value = 1.0 - np.prod(1.0 - p, axis=-1)
            out[r] = np.sum(probs * value, axis=1)
    return out


def population_value(policy: Policy, config: WorldConfig, model: GroundTruthModel,
                     n_contexts: int = 200_000, seed: int = 0) -> float:
    """Exact value averaged over a fresh, independent sample of contexts.

    The remaining error is pure context sampling noise (the per-context values
    are exact), so a large ``n_contexts`` approximates the population value.
    """
    rng = np.random.default_rng(np.random.SeedSequence([config.seed, 2, seed]))
    total, done = 0.0, 0
    while done < n_contexts:
        n = min(CHUNK, n_contexts - done)
        total += float(np.sum(policy_values(policy, model, _sample_contexts(rng, config, n))))
        done += n
    return total / n_contexts


def true_policy_value(policy: Policy, config: WorldConfig, model: GroundTruthModel,
                      contexts) -> float:
    """Average exact value of ``policy`` over ``contexts`` (no sampling noise)."""
    if not isinstance(contexts, Contexts):
        contexts = Contexts.from_samples(list(contexts), config.nb_slots)
    if not len(contexts):
        raise ValueError("no contexts")
    return float(np.sum(policy_values(policy, model, contexts)) / len(contexts))

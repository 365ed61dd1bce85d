"""Ranking policies pi(y | x) over candidate pools.

All policies are immutable and evaluate whole batches: ``prob(ctx, rankings)``
accepts rankings of shape (n, K) -- one ranking per context -- or (n, P, K)
for P rankings per context (used by the enumeration oracle).
"""
from __future__ import annotations

from abc import ABC, abstractmethod
from dataclasses import dataclass, field

import numpy as np

from .data import ContextSample, Contexts
from .features import Featurizer, parse_crosses
from .logformat import ImpressionRecord
from .ranking import perm_count, plackett_luce_prob, sample_plackett_luce, top_k


class Policy(ABC):
    name = "policy"

    def prob(self, ctx: Contexts, rankings) -> np.ndarray:
        rankings = np.asarray(rankings, dtype=np.int64)
        if rankings.ndim == 2:
            return self._prob(ctx, rankings[:, None, :])[:, 0]
        return self._prob(ctx, rankings)

    @abstractmethod
    def _prob(self, ctx: Contexts, rankings: np.ndarray) -> np.ndarray:
        """rankings (n, P, K) -> probabilities (n, P)."""

    @abstractmethod
    def sample(self, ctx: Contexts, rng: np.random.Generator) -> np.ndarray:
        """One ranking per context, shape (n, max nb_slots)."""

    def support_size(self, ctx: Contexts) -> np.ndarray:
        return perm_count(ctx.pool_size, ctx.nb_slots)

    # single-context conveniences

    def probability(self, sample: ContextSample, ranking, nb_slots: int | None = None) -> float:
        ranking = list(ranking)
        ctx = Contexts.from_samples([sample], nb_slots or len(ranking))
        _check_ranking(ranking, len(sample.candidates))
        return float(self.prob(ctx, np.array([ranking]))[0])

    def sample_one(self, sample: ContextSample, nb_slots: int, rng) -> tuple:
        ctx = Contexts.from_samples([sample], nb_slots)
        return tuple(int(i) for i in self.sample(ctx, rng)[0])


def _check_ranking(ranking, m: int) -> None:
    if len(set(ranking)) != len(ranking):
        raise ValueError(f"ranking {ranking} repeats a candidate")
    if any(not 0 <= r < m for r in ranking):
        raise ValueError(f"ranking {ranking} references a candidate outside 0..{m - 1}")


def _slot_mask(ctx: Contexts, K: int) -> np.ndarray:
    return np.arange(K)[None, :] < ctx.nb_slots[:, None]


class UniformPolicy(Policy):
    """Every ranking of nb_slots distinct candidates is equally likely."""

    name = "uniform"

    def _prob(self, ctx, rankings):
        p = 1.0 / perm_count(ctx.pool_size, ctx.nb_slots)
        return np.broadcast_to(p[:, None], rankings.shape[:2]).copy()

    def sample(self, ctx, rng):
        log_f = np.where(ctx.candidate_mask, 0.0, -np.inf)
        return sample_plackett_luce(log_f, ctx.nb_slots, rng)


def uniform_probability(ctx: ContextSample, ranking) -> float:
    """1 / (M (M-1) ... (M-k+1)) for a pool of M candidates and k slots."""
    _check_ranking(list(ranking), len(ctx.candidates))
    return float(1.0 / perm_count(len(ctx.candidates), len(ranking)))


@dataclass(frozen=True, eq=False)
class LinearRankingPolicy(Policy):
    """Score candidates by ``<weights, phi(c, p)>``.

    Stochastic mode samples a Plackett-Luce ranking over
    ``exp(temperature * score)``; deterministic mode returns the top-k
    candidates by score, lowest index first among ties.
    """

    featurizer: Featurizer
    weights: np.ndarray
    temperature: float = 1.0
    mode: str = "stochastic"
    name: str = "linear"

    def __post_init__(self):
        if self.mode not in ("stochastic", "deterministic"):
            raise ValueError(f"unknown mode {self.mode!r}")
        if not self.temperature >= 0:
            raise ValueError("temperature must be non-negative")
        if len(self.weights) != self.featurizer.dim:
            raise ValueError("weight vector length differs from the featurizer dimension")

    def scores(self, ctx: Contexts) -> np.ndarray:
        return self.featurizer.transform(ctx).scores(self.weights)

    def plackett_luce_weights(self, ctx: Contexts) -> np.ndarray:
        """exp(T * score - max) over real candidates, 0 for padding."""
        return _exp_weights(self.temperature * self.scores(ctx), ctx.candidate_mask)

    def _prob(self, ctx, rankings):
        n, P, K = rankings.shape
        if self.mode == "deterministic":
            top = top_k(self.scores(ctx), ctx.candidate_mask, ctx.nb_slots)
            top = _pad_to(top, K)
            return np.all(rankings == top[:, None, :], axis=2).astype(float)
        f = self.plackett_luce_weights(ctx)
        if P == 1:
            return plackett_luce_prob(f, rankings[:, 0, :])[:, None]
        return plackett_luce_prob(np.repeat(f, P, axis=0), rankings.reshape(n * P, K)).reshape(n, P)

    def sample(self, ctx, rng):
        s = self.scores(ctx)
        if self.mode == "deterministic":
            return top_k(s, ctx.candidate_mask, ctx.nb_slots)
        t = np.where(ctx.candidate_mask, self.temperature * s, -np.inf)
        return sample_plackett_luce(t - t.max(axis=1, keepdims=True), ctx.nb_slots, rng)


def _pad_to(r: np.ndarray, K: int) -> np.ndarray:
    if r.shape[1] >= K:
        return r[:, :K]
    out = np.full((r.shape[0], K), -1, dtype=r.dtype)
    out[:, : r.shape[1]] = r
    return out


def _exp_weights(t: np.ndarray, mask: np.ndarray) -> np.ndarray:
    t = np.where(mask, t, -np.inf)
    return np.where(mask, np.exp(t - t.max(axis=1, keepdims=True)), 0.0)


@dataclass(frozen=True, eq=False)
class EpsilonMixturePolicy(Policy):
    """Uniform with probability epsilon, otherwise the base policy."""

    epsilon: float
    base: Policy
    name: str = field(default="epsilon_mixture")

    def __post_init__(self):
        if not 0.0 <= self.epsilon <= 1.0:
            raise ValueError(f"epsilon must lie in [0, 1], got {self.epsilon}")

    def _prob(self, ctx, rankings):
        u = UniformPolicy()._prob(ctx, rankings)
        b = self.base._prob(ctx, rankings)
        return self.epsilon * u + (1.0 - self.epsilon) * b

    def sample(self, ctx, rng):
        explore = rng.random(len(ctx)) < self.epsilon
        a = UniformPolicy().sample(ctx, rng)
        b = self.base.sample(ctx, rng)
        return np.where(explore[:, None], a, b)


def epsilon_mixture_probability(policy: EpsilonMixturePolicy, ctx: ContextSample, ranking) -> float:
    return policy.probability(ctx, ranking)


def linear_policy_probability(policy: LinearRankingPolicy, ctx: ContextSample, ranking) -> float:
    return policy.probability(ctx, ranking)


def record_context(r: ImpressionRecord) -> ContextSample:
    return ContextSample(r.display_features, tuple(c.features for c in r.candidates))


def importance_weight(policy: Policy, impression: ImpressionRecord) -> float:
    """pi(y | x) / q for the impression's displayed ranking."""
    if not impression.propensity > 0:
        raise ValueError("logged propensity must be positive")
    ranking = list(range(impression.nb_slots))
    return policy.probability(record_context(impression), ranking, impression.nb_slots) \
        / impression.propensity


# ---------------------------------------------------------------------------
# flat text serialization


def policy_to_lines(policy: Policy, prefix: str = "") -> list:
    if isinstance(policy, UniformPolicy):
        return [f"{prefix}kind=uniform"]
    if isinstance(policy, EpsilonMixturePolicy):
        return [f"{prefix}kind=epsilon_mixture", f"{prefix}epsilon={policy.epsilon!r}"] + \
            policy_to_lines(policy.base, prefix + "base.")
    if isinstance(policy, LinearRankingPolicy):
        fz = policy.featurizer
        lines = [
            f"{prefix}kind=linear",
            f"{prefix}name={policy.name}",
            f"{prefix}mode={policy.mode}",
            f"{prefix}temperature={float(policy.temperature)!r}",
            f"{prefix}dim={fz.dim}",
            f"{prefix}bias={int(fz.bias)}",
            f"{prefix}crosses={','.join(f'{a}x{b}' for a, b in fz.crosses)}",
        ]
        nz = np.flatnonzero(policy.weights)
        lines += [f"{prefix}w.{i}={float(policy.weights[i])!r}" for i in nz]
        return lines
    raise TypeError(f"cannot serialize {type(policy).__name__}")


def policy_to_text(policy: Policy) -> str:
    return "\n".join(policy_to_lines(policy)) + "\n"


def policy_from_text(text: str) -> Policy:
    kv = {}
    for raw in text.splitlines():
        line = raw.strip()
        if not line or line.startswith("#"):
            continue
        key, sep, value = line.partition("=")
        if not sep:
            raise ValueError(f"malformed policy line {raw!r}")
        kv[key.strip()] = value.strip()
    return _policy_from_kv(kv, "")


def _policy_from_kv(kv: dict, prefix: str) -> Policy:
    kind = kv.get(prefix + "kind")
    if kind == "uniform":
        return UniformPolicy()
    if kind == "epsilon_mixture":
        return EpsilonMixturePolicy(float(kv[prefix + "epsilon"]), _policy_from_kv(kv, prefix + "base."))
    if kind == "linear":
        fz = Featurizer(dim=int(kv[prefix + "dim"]), bias=bool(int(kv.get(prefix + "bias", "1"))),
                        crosses=parse_crosses(kv.get(prefix + "crosses", "")))
        w = np.zeros(fz.dim)
        wp = prefix + "w."
        for key, value in kv.items():
            if key.startswith(wp):
                w[int(key[len(wp):])] = float(value)
        return LinearRankingPolicy(fz, w, float(kv.get(prefix + "temperature", "1.0")),
                                   kv.get(prefix + "mode", "stochastic"),
                                   kv.get(prefix + "name", "linear"))
    raise ValueError(f"unknown policy kind {kind!r}")

import io
import math

import numpy as np
import pytest

import oracles
from blbf.data import Contexts, LoggedData
from blbf.logformat import read_log, stream_impressions
from blbf.policies import EpsilonMixturePolicy, LinearRankingPolicy, UniformPolicy
from blbf.ranking import enumerate_rankings, plackett_luce_prob, sample_plackett_luce
from blbf.simulator import (ConfigError, GroundTruthModel, Simulator, WorldConfig,
                            expected_reward, generate_log, logging_scores, population_value,
                            propensity_of, sample_clicks, sample_context, sample_ranking,
                            simulate, subsample, true_policy_value)

SMALL = dict(pool_size_min=4, pool_size_max=6, world_hash_bits=10)


# ---------------------------------------------------------------------------
# Plackett-Luce


def test_propensity_hand_values():
    assert propensity_of([1.0, 2.0, 3.0], (2, 0)) == pytest.approx(3 / 6 * 1 / 3, rel=1e-15)
    assert propensity_of([1.0, 2.0, 3.0], (1,)) == pytest.approx(2 / 6, rel=1e-15)
    assert propensity_of([5.0], (0,)) == 1.0


@pytest.mark.parametrize("m,k", [(3, 1), (4, 2), (5, 3), (6, 6)])
def test_propensity_sums_to_one_and_matches_oracle(m, k):
    f = np.random.default_rng(m * 10 + k).gamma(1.0, size=m) + 1e-3
    total = []
    for y in oracles.all_rankings(m, k):
        p = propensity_of(f, y)
        assert p == pytest.approx(oracles.pl_probability(list(f), y), rel=1e-12)
        total.append(p)
    assert math.fsum(total) == pytest.approx(1.0, abs=1e-12)


def test_propensity_rejects_bad_input():
    with pytest.raises(ValueError):
        propensity_of([1.0, 2.0], (0, 0))
    with pytest.raises(ValueError):
        propensity_of([1.0, 2.0], (2,))
    with pytest.raises(ValueError):
        propensity_of([1.0, 0.0], (0,))
    with pytest.raises(ValueError):
        sample_ranking([1.0, 2.0], 3, np.random.default_rng(0))


def test_propensity_invariant_to_order_and_padding():
    rng = np.random.default_rng(4)
    f = rng.gamma(0.5, size=7) + 1e-6
    y = np.array([5, 1, 3])
    base = plackett_luce_prob(f[None], y[None])[0]
    for _ in range(20):
        perm = rng.permutation(7)
        inv = np.argsort(perm)
        padded = np.concatenate([f[perm], np.zeros(rng.integers(0, 4))])
        got = plackett_luce_prob(padded[None], inv[y][None])[0]
        assert got == base  # bitwise


def test_sample_ranking_frequencies():
    f = [0.5, 1.0, 2.0, 4.0]
    rng = np.random.default_rng(0)
    counts = {}
    n = 20000
    for _ in range(n):
        y, q = sample_ranking(f, 2, rng)
        counts[y] = counts.get(y, 0) + 1
        assert q == propensity_of(f, y)
    l1 = sum(abs(counts.get(y, 0) / n - oracles.pl_probability(f, y))
             for y in oracles.all_rankings(4, 2))
    assert l1 < 0.04


def test_logging_scores_are_positive_weights():
    cfg = WorldConfig(seed=1, **SMALL)
    model = GroundTruthModel.from_config(cfg)
    ctx = sample_context(np.random.default_rng(0), cfg)
    f = logging_scores(ctx, model, 1.0)
    assert len(f) == len(ctx.candidates) and np.all(f > 0) and f.max() == 1.0
    flat = logging_scores(ctx, model, 0.0)
    assert np.all(flat == 1.0)


# ---------------------------------------------------------------------------
# clicks and sub-sampling


def test_zero_position_bias_blocks_clicks():
    cfg = WorldConfig(seed=2, nb_slots=2, base_click_rate=0.9, **SMALL)
    m = GroundTruthModel.from_config(cfg)
    model = GroundTruthModel(m.featurizer, m.logging_weights, m.true_click_weights,
                             np.array([1.0, 0.0]), 0.9)
    ctx = sample_context(np.random.default_rng(1), cfg)
    rng = np.random.default_rng(2)
    clicks = np.array([sample_clicks(ctx, (0, 1), model, rng) for _ in range(300)])
    assert clicks[:, 1].sum() == 0 and clicks[:, 0].sum() > 0


def test_position_bias_validation():
    m = GroundTruthModel.from_config(WorldConfig(seed=0, **SMALL))
    with pytest.raises(ValueError):
        GroundTruthModel(m.featurizer, m.logging_weights, m.true_click_weights,
                         np.array([0.5, 0.8]), 0.1)


def test_subsample_keeps_every_click():
    sim = Simulator(WorldConfig(seed=3, impression_count=0, **SMALL))
    ch = sim.chunk(5000)
    recs = ch.records()
    rng = np.random.default_rng(0)
    for r in recs:
        if r.was_ad_clicked:
            assert subsample(r, 0.01, rng) is r
    unclicked = [r for r in recs if not r.was_ad_clicked]
    kept = sum(subsample(r, 0.3, rng) is not None for r in unclicked * 20)
    assert kept / (20 * len(unclicked)) == pytest.approx(0.3, abs=0.02)
    with pytest.raises(ValueError):
        subsample(recs[0], 0.0, rng)


def test_keep_rate_of_unclicked_impressions():
    sim = Simulator(WorldConfig(seed=4, subsample_keep_prob=0.2, **SMALL))
    ch = sim.chunk(40000)
    assert np.all(ch.kept[ch.clicked == 1])
    assert ch.kept[ch.clicked == 0].mean() == pytest.approx(0.2, abs=0.01)


# ---------------------------------------------------------------------------
# logged propensities and records


def test_logged_propensity_equals_replica_bitwise():
    cfg = WorldConfig(seed=5, nb_slots=3, logging_temperature=1.7, **SMALL)
    sim = Simulator(cfg)
    ch = sim.chunk(3000)
    replica = sim.model.logging_policy(cfg.logging_temperature)
    assert np.array_equal(replica.prob(ch.contexts, ch.rankings), ch.propensity)


def test_records_recompute_same_propensity():
    cfg = WorldConfig(seed=6, nb_slots=2, **SMALL)
    sim = Simulator(cfg)
    ch = sim.chunk(2000)
    recs = ch.records()
    data = LoggedData.from_records(recs, cfg.subsample_keep_prob)
    q = sim.logging.prob(data.contexts, data.rankings)
    assert np.array_equal(q, data.propensity)
    for r in recs:
        assert sum(c.clicked for c in r.candidates[r.nb_slots:]) == 0
        assert r.was_ad_clicked == int(any(c.clicked for c in r.candidates[: r.nb_slots]))


def test_world_depends_on_seed_only_and_runs_are_reproducible():
    a = WorldConfig(seed=7, **SMALL)
    b = a.replace(impression_count=123, subsample_keep_prob=0.5)
    ma, mb = GroundTruthModel.from_config(a), GroundTruthModel.from_config(b)
    assert np.array_equal(ma.true_click_weights, mb.true_click_weights)
    assert np.array_equal(ma.logging_weights, mb.logging_weights)
    c1, c2 = Simulator(a).chunk(500), Simulator(a).chunk(500)
    assert np.array_equal(c1.rankings, c2.rankings) and np.array_equal(c1.clicked, c2.clicked)
    c3 = Simulator(a, replication=1).chunk(500)
    assert not np.array_equal(c1.contexts.cand_code, c3.contexts.cand_code)


def test_generate_log_round_trips(tmp_path):
    cfg = WorldConfig(seed=8, nb_slots=2, impression_count=3000, **SMALL)
    buf = io.StringIO()
    summary = generate_log(cfg, None, buf)
    path = tmp_path / "log.txt"
    path.write_text(buf.getvalue())
    recs = read_log(path)
    assert len(recs) == summary.n_kept
    assert sum(r.was_ad_clicked for r in recs) == summary.n_clicked
    assert summary.slot_counts == {2: summary.n_kept}
    ids = [r.ex_id for r in recs]
    assert ids == sorted(ids) and len(set(ids)) == len(ids)
    again = io.StringIO()
    generate_log(cfg, None, again)
    assert again.getvalue() == buf.getvalue()
    assert len(list(stream_impressions(io.BytesIO(buf.getvalue().encode())))) == len(recs)


def test_interaction_feature_emitted():
    cfg = WorldConfig(seed=9, emit_interactions=True, **SMALL)
    recs = Simulator(cfg).chunk(200).records()
    fid = cfg.interaction_feature_id
    assert all(fid in c.features for r in recs for c in r.candidates)


@pytest.mark.parametrize("changes", [
    dict(nb_slots=0), dict(nb_slots=7), dict(pool_size_min=1, nb_slots=2),
    dict(subsample_keep_prob=0.0), dict(base_click_rate=1.0), dict(logging_alignment=2.0),
    dict(latent_crosses="6x3"), dict(numeric_feature_count=3),
])
def test_config_validation(changes):
    with pytest.raises(ConfigError):
        WorldConfig(seed=0, **changes)


def test_config_text_round_trip():
    cfg = WorldConfig(seed=11, nb_slots=3, logging_temperature=0.25, emit_interactions=True)
    kv = dict(line.split("=", 1) for line in cfg.to_text().splitlines())
    assert WorldConfig.from_mapping(kv) == cfg
    with pytest.raises(ConfigError):
        WorldConfig.from_mapping({"nb_slots": "2"})
    with pytest.raises(ConfigError):
        WorldConfig.from_mapping({"seed": "1", "nb_slots": "two"})


# ---------------------------------------------------------------------------
# exact values against the loop oracle


def _oracle_context_value(model, cfg, sample, policy_prob):
    logit = math.log(cfg.base_click_rate / (1 - cfg.base_click_rate))
    cp = []
    for c in sample.candidates:
        phi = oracles.featurize(sample.display_features, c, model.featurizer.dim,
                                model.featurizer.crosses)
        cp.append(oracles.sigmoid(oracles.linear_score(phi, model.true_click_weights) + logit))
    pb = [(s + 1) ** -cfg.position_bias_decay for s in range(cfg.nb_slots)]
    return oracles.context_value(policy_prob, cp, cfg.nb_slots, pb)


def _oracle_logging_prob(model, cfg, sample):
    t = [cfg.logging_temperature * oracles.linear_score(
        oracles.featurize(sample.display_features, c, model.featurizer.dim,
                          model.featurizer.crosses), model.logging_weights)
         for c in sample.candidates]
    f = [math.exp(x - max(t)) for x in t]
    return lambda y: oracles.pl_probability(f, y)


@pytest.mark.parametrize("nb_slots", [1, 2, 3])
def test_true_value_matches_oracle(nb_slots):
    cfg = WorldConfig(seed=12, nb_slots=nb_slots, logging_temperature=1.3, **SMALL)
    model = GroundTruthModel.from_config(cfg)
    rng = np.random.default_rng(0)
    samples = [sample_context(rng, cfg) for _ in range(6)]
    logging = model.logging_policy(cfg.logging_temperature)
    want_log = math.fsum(_oracle_context_value(model, cfg, s, _oracle_logging_prob(model, cfg, s))
                         for s in samples) / 6
    assert true_policy_value(logging, cfg, model, samples) == pytest.approx(want_log, rel=1e-10)
    want_uni = math.fsum(_oracle_context_value(
        model, cfg, s, lambda y, m=len(s.candidates): 1 / oracles.n_rankings(m, nb_slots))
        for s in samples) / 6
    assert true_policy_value(UniformPolicy(), cfg, model, samples) == \
        pytest.approx(want_uni, rel=1e-10)


def test_value_is_linear_in_mixture_weight():
    cfg = WorldConfig(seed=13, nb_slots=2, **SMALL)
    model = GroundTruthModel.from_config(cfg)
    ctx = Simulator(cfg).chunk(300).contexts
    base = model.logging_policy(1.0)
    v0 = true_policy_value(base, cfg, model, ctx)
    v1 = true_policy_value(UniformPolicy(), cfg, model, ctx)
    v = true_policy_value(EpsilonMixturePolicy(0.3, base), cfg, model, ctx)
    assert v == pytest.approx(0.3 * v1 + 0.7 * v0, rel=1e-12)


def test_expected_reward_matches_oracle():
    cfg = WorldConfig(seed=14, nb_slots=2, **SMALL)
    model = GroundTruthModel.from_config(cfg)
    s = sample_context(np.random.default_rng(3), cfg)
    ctx = Contexts.from_samples([s], 2)
    perms = enumerate_rankings(len(s.candidates), 2)
    got = expected_reward(model, ctx, perms[None])[0]
    logit = math.log(cfg.base_click_rate / (1 - cfg.base_click_rate))
    cp = [oracles.sigmoid(oracles.linear_score(oracles.featurize(
        s.display_features, c, model.featurizer.dim, model.featurizer.crosses),
        model.true_click_weights) + logit) for c in s.candidates]
    want = [oracles.expected_click(cp, y, model.position_bias) for y in map(tuple, perms)]
    assert np.allclose(got, want, rtol=1e-12)


def test_click_frequency_matches_exact_value():
    cfg = WorldConfig(seed=15, nb_slots=2, subsample_keep_prob=1.0, impression_count=40000,
                      **SMALL)
    model = GroundTruthModel.from_config(cfg)
    res = simulate(cfg, model, oracle=[model.logging_policy(1.0)])
    rate = res.n_clicked / res.n_total
    se = math.sqrt(rate * (1 - rate) / res.n_total)
    assert abs(rate - res.truths[0]) < 4 * se


def test_population_value_is_reproducible():
    cfg = WorldConfig(seed=16, **SMALL)
    model = GroundTruthModel.from_config(cfg)
    a = population_value(UniformPolicy(), cfg, model, 5000, seed=1)
    assert a == population_value(UniformPolicy(), cfg, model, 5000, seed=1)
    assert a != population_value(UniformPolicy(), cfg, model, 5000, seed=2)


# ---------------------------------------------------------------------------
# documented examples


def test_sample_context_examples():
    cfg = WorldConfig(seed=0)
    a = sample_context(np.random.default_rng(3), cfg)
    b = sample_context(np.random.default_rng(3), cfg)
    assert a == b
    five = WorldConfig(seed=0, pool_size_min=5, pool_size_max=5)
    rng = np.random.default_rng(0)
    assert all(len(sample_context(rng, five).candidates) == 5 for _ in range(50))
    ctx = Simulator(cfg).chunk(10000).contexts
    assert set(ctx.pool_size.tolist()) == set(range(8, 13))


def test_logging_scores_with_zero_weights():
    cfg = WorldConfig(seed=0, **SMALL)
    m = GroundTruthModel.from_config(cfg)
    flat = GroundTruthModel(m.featurizer, np.zeros_like(m.logging_weights),
                            m.true_click_weights, m.position_bias, m.base_click_rate)
    ctx = sample_context(np.random.default_rng(0), cfg)
    assert np.all(logging_scores(ctx, flat, 1.0) == 1.0)


def test_sample_ranking_symmetric_scores():
    rng = np.random.default_rng(1)
    for _ in range(50):
        _, q = sample_ranking([1.0] * 4, 2, rng)
        assert q == pytest.approx(1 / 12, rel=1e-15)
    assert propensity_of([1.0] * 6, (5, 0, 2)) == pytest.approx(1 / (6 * 5 * 4), rel=1e-15)


def test_sample_ranking_100k_draws_match_enumeration():
    # 100k draws through the same Gumbel-top-k kernel sample_ranking calls, batched
    f = np.array([1.0, 2.0, 3.0])
    draws = sample_plackett_luce(np.log(np.broadcast_to(f, (100000, 3))), 2,
                                 np.random.default_rng(5))
    keys, counts = np.unique(draws, axis=0, return_counts=True)
    freq = {tuple(k): c / 100000 for k, c in zip(keys.tolist(), counts)}
    l1 = sum(abs(freq.get(y, 0.0) - oracles.pl_probability(list(f), y))
             for y in oracles.all_rankings(3, 2))
    assert l1 < 0.02


def test_sample_clicks_examples():
    cfg = WorldConfig(seed=0, nb_slots=2, **SMALL)
    m = GroundTruthModel.from_config(cfg)
    ctx = sample_context(np.random.default_rng(0), cfg)
    rng = np.random.default_rng(1)
    dead = GroundTruthModel(m.featurizer, m.logging_weights, m.true_click_weights,
                            np.zeros(2), 0.5)
    assert all(sum(sample_clicks(ctx, (0, 1), dead, rng)) == 0 for _ in range(200))
    hot = GroundTruthModel(m.featurizer, m.logging_weights, np.zeros_like(m.true_click_weights),
                           np.ones(2), 1 - 1e-9)
    clicks = np.array([sample_clicks(ctx, (2, 0), hot, rng) for _ in range(200)])
    assert clicks.mean() > 0.99


def test_subsample_examples():
    cfg = WorldConfig(seed=0, **SMALL)
    recs = Simulator(cfg).chunk(3000).records()
    rng = np.random.default_rng(0)
    assert all(subsample(r, 1.0, rng) is r for r in recs)
    unclicked = next(r for r in recs if not r.was_ad_clicked)
    kept = sum(subsample(unclicked, 0.1, rng) is not None for _ in range(100000))
    assert abs(kept - 10000) <= 3 * math.sqrt(100000 * 0.1 * 0.9)


def test_generate_empty_log():
    buf = io.StringIO()
    summary = generate_log(WorldConfig(seed=0, impression_count=0), None, buf)
    assert buf.getvalue() == "" and summary.n_total == 0 and summary.n_kept == 0


def test_point_mass_policy_value():
    cfg = WorldConfig(seed=17, nb_slots=2, **SMALL)
    model = GroundTruthModel.from_config(cfg)
    ctx = Simulator(cfg).chunk(200).contexts
    point = LinearRankingPolicy(model.featurizer, np.zeros(model.featurizer.dim),
                                mode="deterministic")  # always ranks (0, 1)
    want = float(np.mean(expected_reward(model, ctx, np.tile([0, 1], (len(ctx), 1)))))
    assert true_policy_value(point, cfg, model, ctx) == pytest.approx(want, rel=1e-12)

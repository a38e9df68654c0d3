from __future__ import annotations

import numpy as np
import pytest
from scipy import stats

from loopclosure.consistency import ConsistencyMatrix
from loopclosure.hypotheses import HypothesisEngine
from loopclosure.ledger import ConstraintLedger
from loopclosure.sampler import (
    GuidedSampler,
    StrategyMix,
    diagonal_neighbors,
    format_ratio,
    parse_ratio,
    uniform_unverified,
)
from loopclosure.world import RetrievalCandidate

from conftest import line_trajectory, make_hypothesis


def _diagonal_ledger(start: int = 10, stop: int = 31) -> ConstraintLedger:
    """Two constraint streams (t, t-8) and (t, t-5), forming diagonals in the (i, j) plane."""
    ledger = ConstraintLedger()
    for t in range(start, stop):
        ledger.ingest(t, [RetrievalCandidate(t, t - 8, 0.6), RetrievalCandidate(t, t - 5, 0.4)])
    return ledger


def _setup(mix: StrategyMix, *, n_hyps: int = 3, traj_len: int = 40):
    ledger = _diagonal_ledger()
    engine = HypothesisEngine(10, np.eye(3), np.eye(3))
    matrix = ConsistencyMatrix(10.0)
    for c in ledger.constraints:
        matrix.add_constraint_row(c)
    for k in range(n_hyps):
        h = make_hypothesis(k, np.zeros((traj_len, 3)), window_id=k)
        engine.hypotheses.append(h)
        matrix.add_hypothesis_column(h)
    return GuidedSampler(mix), engine, ledger, matrix


def test_parse_ratio():
    assert parse_ratio("1:0:1") == (0.5, 0.0, 0.5)
    assert parse_ratio(" 1:1:2 ") == (0.25, 0.25, 0.5)
    assert format_ratio(*parse_ratio("0:0:1")) == "0:0:1"
    for bad in ("1:1", "a:b:c", "0:0:0", "-1:1:1", "inf:1:1"):
        with pytest.raises(ValueError):
            parse_ratio(bad)


def test_strategy_mix_validation():
    mix = StrategyMix.from_ratios("2:1:1", "1:0:1", rng_seed=4)
    assert (mix.p_us_constraint, mix.p_ns, mix.p_ts) == (0.5, 0.25, 0.25)
    assert mix.p_df == 0.0 and mix.p_us_hypothesis == 0.5
    assert mix.label == "0.5:0.25:0.25@0.5:0:0.5"
    with pytest.raises(ValueError):
        StrategyMix(p_ts=0.7, p_ns=0.7)
    with pytest.raises(ValueError):
        StrategyMix(p_bf=0.6, p_df=0.5)
    with pytest.raises(ValueError):
        StrategyMix(p_ts=-0.1)


def test_constraint_mix_reads_uniform_neighbor_trajectory():
    ts = StrategyMix.from_ratios("0:0:1", "0:0:1")
    assert (ts.p_ts, ts.p_ns, ts.p_us_constraint) == (1.0, 0.0, 0.0)
    us = StrategyMix.from_ratios("1:0:0", "0:0:1")
    assert (us.p_ts, us.p_ns, us.p_us_constraint) == (0.0, 0.0, 1.0)
    ns = StrategyMix.from_ratios("0:1:0", "0:0:1")
    assert ns.p_ns == 1.0
    bf = StrategyMix.from_ratios("0:0:1", "1:0:0")
    assert (bf.p_bf, bf.p_df, bf.p_us_hypothesis) == (1.0, 0.0, 0.0)


def test_select_hypothesis_without_hypotheses_fails():
    sampler = GuidedSampler(StrategyMix())
    with pytest.raises(ValueError):
        sampler.select_hypothesis(HypothesisEngine(10, np.eye(3), np.eye(3)))


def test_bf_picks_least_sampled_lowest_id():
    engine = HypothesisEngine(10, np.eye(3), np.eye(3))
    engine.hypotheses += [
        make_hypothesis(k, np.zeros((5, 3)), times_sampled=n) for k, n in enumerate((3, 1, 2, 1))
    ]
    sampler = GuidedSampler(StrategyMix(p_bf=1.0))
    h, tag = sampler.select_hypothesis(engine)
    assert (h.id, tag) == (1, "BF")
    assert h.times_sampled == 2
    assert sampler.select_hypothesis(engine)[0].id == 3


def test_single_hypothesis_always_chosen():
    engine = HypothesisEngine(10, np.eye(3), np.eye(3))
    engine.hypotheses.append(make_hypothesis(0, np.zeros((5, 3))))
    for mix in (StrategyMix(p_bf=1.0), StrategyMix(p_df=1.0), StrategyMix()):
        sampler = GuidedSampler(mix)
        for r in range(20):
            sampler.round_index = r
            assert sampler.select_hypothesis(engine)[0].id == 0


def test_bf_balances_counts():
    engine = HypothesisEngine(10, np.eye(3), np.eye(3))
    engine.hypotheses += [make_hypothesis(k, np.zeros((5, 3)), times_sampled=0) for k in range(7)]
    sampler = GuidedSampler(StrategyMix(p_bf=1.0))
    for r in range(10_000):
        sampler.round_index = r
        sampler.select_hypothesis(engine)
    counts = [h.times_sampled for h in engine.hypotheses]
    assert max(counts) - min(counts) <= 1
    assert sum(counts) == 10_000


def test_uniform_hypothesis_draws_pass_chi_square():
    engine = HypothesisEngine(10, np.eye(3), np.eye(3))
    engine.hypotheses += [make_hypothesis(k, np.zeros((5, 3))) for k in range(5)]
    sampler = GuidedSampler(StrategyMix(rng_seed=11))
    for r in range(10_000):
        sampler.round_index = r
        sampler.select_hypothesis(engine)
    counts = [h.times_sampled for h in engine.hypotheses]
    assert stats.chisquare(counts).pvalue > 0.001


def test_uniform_sampling_favors_older_hypotheses():
    rhos = []
    for seed in range(20):
        engine = HypothesisEngine(10, np.eye(3), np.eye(3))
        sampler = GuidedSampler(StrategyMix(rng_seed=seed))
        for step in range(100):
            if step % 10 == 0:
                engine.hypotheses.append(make_hypothesis(len(engine.hypotheses), np.zeros((5, 3))))
            for _ in range(10):
                sampler.select_hypothesis(engine)
                sampler.round_index += 1
        ages = [-h.id for h in engine.hypotheses]
        counts = [h.times_sampled for h in engine.hypotheses]
        rhos.append(stats.spearmanr(ages, counts).statistic)
    assert np.mean(rhos) > 0.5


def test_df_draws_from_upper_half():
    engine = HypothesisEngine(10, np.eye(3), np.eye(3))
    engine.hypotheses += [
        make_hypothesis(k, np.zeros((5, 3)), importance_weight=w) for k, w in enumerate((5, 1, 4, 0, 4))
    ]
    sampler = GuidedSampler(StrategyMix(p_df=1.0, rng_seed=2))
    seen = set()
    for r in range(300):
        sampler.round_index = r
        h, tag = sampler.select_hypothesis(engine)
        assert tag == "DF"
        seen.add(h.id)
    assert seen == {0, 2, 4}


def test_strategy_draw_frequencies():
    sampler, engine, ledger, matrix = _setup(StrategyMix(p_ts=0.5, p_ns=0.3, p_bf=0.2, p_df=0.3, rng_seed=5))
    n = 10_000
    for r in range(n):
        sampler.round_index = r
        h, _ = sampler.select_hypothesis(engine)
        sampler.select_constraint(h, ledger, matrix)
    assert sampler.constraint_draws["TS"] / n == pytest.approx(0.5, abs=0.02)
    assert sampler.constraint_draws["NS"] / n == pytest.approx(0.3, abs=0.02)
    assert sampler.constraint_draws["US"] / n == pytest.approx(0.2, abs=0.02)
    assert sampler.hypothesis_draws["BF"] / n == pytest.approx(0.2, abs=0.02)
    assert sampler.hypothesis_draws["DF"] / n == pytest.approx(0.3, abs=0.02)
    assert sampler.hypothesis_draws["US"] / n == pytest.approx(0.5, abs=0.02)


def test_ts_returns_consistent_unverified_constraints():
    ledger = _diagonal_ledger()
    matrix = ConsistencyMatrix(10.0)
    for c in ledger.constraints:
        matrix.add_constraint_row(c)
    # spacing 1.5 keeps only the (t, t-5) stream consistent
    h = make_hypothesis(0, line_trajectory(40, 1.5))
    matrix.add_hypothesis_column(h)
    consistent_ids = set(matrix.constraints_consistent_with(h))
    assert consistent_ids == {c.id for c in ledger.constraints if c.i - c.j == 5}

    for cid in sorted(consistent_ids)[:5]:
        ledger.record_verification(cid, 0.2, 0.5, "US")
    sampler = GuidedSampler(StrategyMix(p_ts=1.0, rng_seed=1))
    for r in range(200):
        sampler.round_index = r
        c, tag = sampler.select_constraint(h, ledger, matrix)
        assert tag == "TS"
        assert c.id in consistent_ids
        assert not ledger.is_verified(c.id, 0.5)


def test_ts_with_empty_column_falls_back_to_uniform():
    ledger = _diagonal_ledger()
    matrix = ConsistencyMatrix(10.0)
    for c in ledger.constraints:
        matrix.add_constraint_row(c)
    engine = HypothesisEngine(10, np.eye(3), np.eye(3))
    h = make_hypothesis(0, line_trajectory(40, 100.0))
    engine.hypotheses.append(h)
    matrix.add_hypothesis_column(h)

    sampler = GuidedSampler(StrategyMix(p_ts=1.0))
    assert sampler.select_constraint(h, ledger, matrix) == (None, "TS")
    rec = sampler.sampling_round(engine, ledger, matrix, oracle=lambda c: 0.1)
    assert rec is not None and rec.strategy_tag == "US"
    assert sampler.fallbacks == 1


def test_diagonal_neighbors():
    ledger = _diagonal_ledger()
    c = ledger.find_pair(20, 12)
    assert {n.pair for n in diagonal_neighbors(c, ledger, 0.5)} == {(19, 11), (21, 13)}
    ledger.record_verification(ledger.find_pair(21, 13).id, 0.9, 0.5, "US")
    assert [n.pair for n in diagonal_neighbors(c, ledger, 0.5)] == [(19, 11)]
    assert diagonal_neighbors(ledger.find_pair(10, 2), ledger, 0.5)[0].pair == (11, 3)


def test_ns_picks_diagonal_neighbor_of_verified_match():
    sampler, engine, ledger, matrix = _setup(StrategyMix(p_ns=1.0, rng_seed=9), n_hyps=1)
    seed = ledger.find_pair(20, 12)
    ledger.record_verification(seed.id, 0.9, 0.5, "US")
    h = engine.hypotheses[0]

    for r in range(50):
        sampler.round_index = r
        c, tag = sampler.select_constraint(h, ledger, matrix)
        assert tag == "NS"
        assert c.pair in {(19, 11), (21, 13)}
    assert all(seed_id == seed.id for _, seed_id in sampler.ns_trace)
    assert len(sampler.ns_trace) == 50


@pytest.mark.parametrize(("rule", "expect_empty"), [("usable", False), ("any", True)])
def test_ns_seed_rules(rule, expect_empty):
    _, engine, ledger, matrix = _setup(StrategyMix(p_ns=1.0), n_hyps=1)
    live = ledger.find_pair(20, 12)
    exhausted = ledger.find_pair(30, 22)
    ledger.record_verification(live.id, 0.9, 0.5, "US")
    ledger.record_verification(exhausted.id, 0.9, 0.5, "US")
    ledger.record_verification(ledger.find_pair(29, 21).id, 0.1, 0.5, "US")
    assert diagonal_neighbors(exhausted, ledger, 0.5) == []

    sampler = GuidedSampler(StrategyMix(p_ns=1.0, rng_seed=13), ns_seed_rule=rule)
    picks = []
    for r in range(40):
        sampler.round_index = r
        picks.append(sampler.select_constraint(engine.hypotheses[0], ledger, matrix)[0])
    chosen = [c.pair for c in picks if c is not None]
    assert set(chosen) <= {(19, 11), (21, 13)}
    assert chosen
    assert (None in picks) == expect_empty
    assert {seed_id for _, seed_id in sampler.ns_trace} == {live.id}


def test_unknown_ns_seed_rule_fails():
    with pytest.raises(ValueError, match="ns_seed_rule"):
        GuidedSampler(StrategyMix(), ns_seed_rule="nearest")


def test_ns_without_matches_returns_none():
    sampler, engine, ledger, matrix = _setup(StrategyMix(p_ns=1.0), n_hyps=1)
    assert sampler.select_constraint(engine.hypotheses[0], ledger, matrix) == (None, "NS")


def test_sampling_round_without_hypotheses_is_uniform():
    ledger = ConstraintLedger()
    ledger.ingest(5, [RetrievalCandidate(5, 1, 0.5)])
    matrix = ConsistencyMatrix()
    matrix.add_constraint_row(ledger.constraints[0])
    engine = HypothesisEngine(10, np.eye(3), np.eye(3))
    sampler = GuidedSampler(StrategyMix(p_ts=1.0, p_bf=1.0))

    rec = sampler.sampling_round(engine, ledger, matrix, oracle=lambda c: 0.7)
    assert (rec.constraint_id, rec.strategy_tag, rec.verdict) == (0, "US", 1)
    assert sampler.sampling_round(engine, ledger, matrix, oracle=lambda c: 0.7) is None
    assert sampler.skips == 1
    assert sampler.round_index == 2


def test_verified_match_raises_importance_of_consistent_hypotheses():
    sampler, engine, ledger, matrix = _setup(StrategyMix(p_ts=1.0, p_bf=1.0), n_hyps=2)
    far = make_hypothesis(2, line_trajectory(40, 100.0))
    engine.hypotheses.append(far)
    matrix.add_hypothesis_column(far)

    rec = sampler.sampling_round(engine, ledger, matrix, oracle=lambda c: 0.9)
    assert rec.verdict == 1
    assert [h.importance_weight for h in engine.hypotheses] == [1, 1, 0]


def test_register_hypothesis_counts_consistent_matches():
    sampler, engine, ledger, matrix = _setup(StrategyMix(), n_hyps=0)
    for pair in ((20, 12), (25, 20), (30, 22)):
        ledger.record_verification(ledger.find_pair(*pair).id, 0.9, 0.5, "US")
    ledger.record_verification(ledger.find_pair(15, 7).id, 0.1, 0.5, "US")

    h = make_hypothesis(0, line_trajectory(40, 1.5))  # only the (t, t-5) stream stays within 10 m
    engine.hypotheses.append(h)
    matrix.add_hypothesis_column(h)
    assert sampler.register_hypothesis(h, engine, ledger, matrix) == 1
    assert h.importance_weight == 1


def test_rounds_replay_identically():
    def run():
        sampler, engine, ledger, matrix = _setup(StrategyMix(p_ts=0.4, p_ns=0.3, p_bf=0.3, p_df=0.3, rng_seed=21))
        oracle = lambda c: ((c.i * 31 + c.j * 17) % 100) / 100.0
        return [sampler.sampling_round(engine, ledger, matrix, oracle) for _ in range(30)], engine

    a, engine_a = run()
    b, engine_b = run()
    assert a == b
    assert [h.times_sampled for h in engine_a.hypotheses] == [h.times_sampled for h in engine_b.hypotheses]


def test_uniform_unverified_frequencies():
    ledger = ConstraintLedger()
    ledger.ingest(20, [RetrievalCandidate(20, j, 0.5) for j in range(10)])
    for cid in (0, 3, 5, 9):
        ledger.record_verification(cid, 0.1, 0.5, "US")
    counts = np.zeros(10)
    n = 6000
    for k in range(n):
        counts[uniform_unverified(ledger, 0.5, np.random.default_rng(k)).id] += 1
    assert counts[[0, 3, 5, 9]].sum() == 0
    np.testing.assert_allclose(counts[[1, 2, 4, 6, 7, 8]] / n, 1 / 6, atol=0.02)

    for cid in (1, 2, 4, 6, 7, 8):
        ledger.record_verification(cid, 0.1, 0.5, "US")
    assert uniform_unverified(ledger, 0.5, np.random.default_rng(0)) is None

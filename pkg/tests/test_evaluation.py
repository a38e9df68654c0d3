from __future__ import annotations

import math

import numpy as np
import pandas as pd
import pytest

from loopclosure.consistency import ConsistencyMatrix
from loopclosure.evaluation import (
    DEFAULT_THRESHOLDS,
    PRPoint,
    correct_mask,
    guided_vs_uniform_trial,
    is_correct,
    label_hypotheses,
    paired_bootstrap_ci,
    per_window_ratios,
    pr_area,
    pr_frame,
    pr_sweep,
    pr_sweep_from_frame,
    window_ratios_from_frame,
)
from loopclosure.ledger import ConstraintLedger
from loopclosure.world import OracleConfig, eligible_queries, retrieve, verify_oracle

from conftest import make_hypothesis


@pytest.fixture(scope="module")
def populated(loop_world):
    """Ledger with ten retrieved candidates per query over the second half of the loop."""
    ledger = ConstraintLedger()
    for q in range(400, len(loop_world)):
        ledger.ingest(q, retrieve(loop_world, q, 10, min_gap=100.0))
    return ledger


def _frame(**columns) -> pd.DataFrame:
    return pd.DataFrame(columns)


def test_is_correct_matches_distance_rule(loop_world, populated):
    gt = loop_world.ground_truth
    for c in populated.constraints[::5]:
        d = math.hypot(gt[c.i, 0] - gt[c.j, 0], gt[c.i, 1] - gt[c.j, 1])
        assert is_correct(loop_world, c) == (d < loop_world.revisit_radius)
    mask = correct_mask(loop_world, populated)
    assert 0 < mask.sum() < len(mask)


def test_pr_points_from_frame():
    frame = _frame(i=[10, 10, 11, 12], oracle_score=[0.9, 0.6, 0.4, 0.2], correct=[1, 0, 1, 0])
    p30, p50, p95 = pr_sweep_from_frame(frame, [0.3, 0.5, 0.95], n_eligible=4, n_correct_total=3)

    assert (p50.n_verified, p50.n_correct) == (2, 1)
    assert p50.precision == 0.5 and p50.recall == 0.25
    assert p50.recall_constraint == pytest.approx(1 / 3)
    assert p30.precision == pytest.approx(2 / 3) and p30.recall == 0.5
    # nothing matched above the top score
    assert (p95.n_verified, p95.precision, p95.recall) == (0, 1.0, 0.0)


def test_recall_counts_queries_not_constraints():
    frame = _frame(i=[10, 10, 10], oracle_score=[0.9, 0.8, 0.7], correct=[1, 1, 1])
    (p,) = pr_sweep_from_frame(frame, [0.5], n_eligible=2, n_correct_total=3)
    assert p.recall == 0.5
    assert p.recall_constraint == 1.0


def test_perfect_oracle_gives_full_precision(loop_world):
    perfect = OracleConfig(p_true_accept=1.0, p_false_accept=0.0)
    # separate ledger so the shared fixture stays unverified
    fresh = ConstraintLedger()
    for q in range(400, len(loop_world)):
        fresh.ingest(q, retrieve(loop_world, q, 10, min_gap=100.0))
    for c in fresh.constraints:
        fresh.record_verification(c.id, verify_oracle(loop_world, perfect, c.pair, 0), 0.5, "US")

    points = pr_sweep(loop_world, fresh, DEFAULT_THRESHOLDS)
    assert all(p.precision == 1.0 for p in points)
    assert len({p.recall for p in points}) == 1
    covered = {c.i for c in fresh.constraints if is_correct(loop_world, c)}
    assert points[0].recall == len(covered) / len(eligible_queries(loop_world))


def test_verified_count_is_non_increasing_in_threshold(loop_world):
    ledger = ConstraintLedger()
    for q in range(400, 600):
        ledger.ingest(q, retrieve(loop_world, q, 5, min_gap=100.0))
    for c in ledger.constraints[::2]:
        ledger.record_verification(c.id, verify_oracle(loop_world, OracleConfig(), c.pair, 1), 0.5, "US")
    counts = [p.n_verified for p in pr_sweep(loop_world, ledger)]
    assert counts == sorted(counts, reverse=True)
    assert counts[0] > counts[-1]


def test_pr_recomputes_from_written_ledger(tmp_path, loop_world):
    ledger = ConstraintLedger()
    for q in range(400, 500):
        ledger.ingest(q, retrieve(loop_world, q, 5, min_gap=100.0))
    for c in ledger.constraints[::3]:
        ledger.record_verification(c.id, verify_oracle(loop_world, OracleConfig(), c.pair, 2), 0.5, "TS")
    path = tmp_path / "ledger.csv"
    ledger.dump_csv(path, correct=lambda c: is_correct(loop_world, c))

    direct = pr_sweep(loop_world, ledger)
    n_correct = int(correct_mask(loop_world, ledger).sum())
    recomputed = pr_sweep_from_frame(
        pd.read_csv(path), DEFAULT_THRESHOLDS, len(eligible_queries(loop_world)), n_correct
    )
    assert recomputed == direct


def test_pr_frame_and_area():
    points = [PRPoint(0.9, 1.0, 0.0, 0, 0), PRPoint(0.5, 1.0, 0.5, 2, 2), PRPoint(0.1, 0.5, 1.0, 8, 4)]
    assert pr_area(points) == pytest.approx(0.5 * 1.0 + 0.5 * 0.75)
    assert pr_area(points[:1]) == 0.0
    frame = pr_frame(points)
    assert frame.columns.tolist() == ["threshold", "precision", "recall", "n_verified", "n_correct", "recall_constraint"]
    assert len(frame) == 3


def test_window_ratios_share_window_denominator():
    frame = _frame(
        executed_at=[9, 9, 9, 10, 15, 15],
        strategy=["TS", "US", "TS", "NS", "US", "US"],
        verdict=[1, 1, 0, 1, 0, 1],
        correct=[1, 0, 0, 1, 0, 1],
    )
    out = window_ratios_from_frame(frame, 10)
    assert sorted(out["window_id"].unique()) == [0, 1]

    w0 = out[out["window_id"] == 0].set_index("strategy")
    assert w0.loc["ALL", "n_verified"] == 3
    assert w0.loc["TS", "verified_ratio"] == pytest.approx(1 / 3)
    assert w0.loc["TS", "correct_ratio"] == pytest.approx(1 / 3)
    assert w0.loc["US", "correct_ratio"] == 0.0
    assert w0.loc["NS", "n_verified"] == 0
    for col in ("n_verified", "n_matched", "n_matched_correct"):
        assert w0.loc[["TS", "NS", "US"], col].sum() == w0.loc["ALL", col]

    w1 = out[out["window_id"] == 1].set_index("strategy")
    assert w1.loc["ALL", "verified_ratio"] == pytest.approx(2 / 3)
    assert w1.loc["ALL", "correct_ratio"] == pytest.approx(2 / 3)

    assert window_ratios_from_frame(frame.iloc[:0], 10).empty


def test_per_window_ratios_on_all_correct_window(loop_world):
    ledger = ConstraintLedger()
    for q in range(400, 430):
        ledger.ingest(q, retrieve(loop_world, q, 5, min_gap=100.0))
    correct = [c for c in ledger.constraints if is_correct(loop_world, c)]
    assert correct
    for c in correct:
        ledger.record_verification(c.id, 0.9, 0.5, "TS", executed_at=425)
    out = per_window_ratios(ledger, loop_world, 10).set_index("strategy")
    assert out.loc["ALL", "verified_ratio"] == 1.0
    assert out.loc["ALL", "correct_ratio"] == 1.0
    assert out.loc["TS", "n_verified"] == len(correct)


def test_label_hypotheses(loop_world, populated):
    matrix = ConsistencyMatrix(10.0)
    for c in populated.constraints:
        matrix.add_constraint_row(c)
    exact = make_hypothesis(0, loop_world.ground_truth)
    matrix.add_hypothesis_column(exact)
    labels = label_hypotheses(loop_world, [exact], matrix, populated)
    row = labels.iloc[0]
    assert row["rmse"] == 0.0
    assert row["n_consistent"] == row["n_consistent_correct"] > 0
    assert row["consistent_precision"] == 1.0


def _trial_setup(loop_world, populated, trajectories):
    matrix = ConsistencyMatrix(10.0)
    for c in populated.constraints:
        matrix.add_constraint_row(c)
    hyps = []
    for k, traj in enumerate(trajectories):
        h = make_hypothesis(k, traj)
        matrix.add_hypothesis_column(h)
        hyps.append(h)
    return matrix, hyps


def test_guided_beats_uniform_for_exact_hypothesis(loop_world, populated):
    shifted = loop_world.ground_truth + np.array([100.0, 0.0, 0.0])
    matrix, hyps = _trial_setup(loop_world, populated, [loop_world.ground_truth, shifted])
    out = guided_vs_uniform_trial(loop_world, populated, matrix, hyps, 20_000, seed=4).set_index("bucket")

    assert out.index.tolist() == ["<5", "5-10", "10-20", "20-50", ">50"]
    assert out.loc["<5", "n_hypotheses"] == 1 and out.loc[">50", "n_hypotheses"] == 1
    assert math.isnan(out.loc["5-10", "guided_ratio"])

    mask = correct_mask(loop_world, populated)
    baseline = mask[populated.unverified_ids(0.5)].mean()
    assert out.loc["<5", "uniform_ratio"] == pytest.approx(baseline, abs=0.02)
    # a rigid shift keeps every pairwise distance, so the column is the correct set
    assert out.loc["<5", "guided_ratio"] == 1.0
    assert out.loc[">50", "guided_ratio"] >= 0.99
    assert out.loc["<5", "guided_ratio"] >= 2 * out.loc["<5", "uniform_ratio"]


def test_empty_column_falls_back_to_unverified_pool(loop_world, populated):
    matrix, hyps = _trial_setup(loop_world, populated, [loop_world.ground_truth[:2]])
    assert matrix.constraints_consistent_with(hyps[0]) == []
    out = guided_vs_uniform_trial(loop_world, populated, matrix, hyps, 5000, seed=1).set_index("bucket")
    assert out.loc["<5", "guided_ratio"] == pytest.approx(out.loc["<5", "uniform_ratio"], abs=0.04)


def test_trial_rejects_empty_bins(loop_world, populated):
    matrix, hyps = _trial_setup(loop_world, populated, [])
    with pytest.raises(ValueError):
        guided_vs_uniform_trial(loop_world, populated, matrix, hyps, 10, error_bins=())


def test_paired_bootstrap_ci():
    assert paired_bootstrap_ci([0.2, 0.2, 0.2]) == pytest.approx((0.2, 0.2, 0.2))
    assert paired_bootstrap_ci([0.3]) == (0.3, 0.3, 0.3)
    with pytest.raises(ValueError):
        paired_bootstrap_ci([])

    deltas = np.random.default_rng(0).normal(1.0, 0.5, size=40)
    mean, low, high = paired_bootstrap_ci(deltas, seed=3)
    assert low < mean < high
    assert low > 0.5 and high < 1.5
    assert paired_bootstrap_ci(deltas, seed=3) == (mean, low, high)

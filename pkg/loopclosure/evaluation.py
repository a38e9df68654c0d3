"""
評估：PR 曲線、各時間窗比例、引導 vs 均勻實驗、假設標記

所有指標都可以只靠帳本 CSV（加上真值計數）重算。
Recall 的分母為「有真值回環的查詢位置數」；另附約束層級的 recall 欄位。
"""

from __future__ import annotations

from collections.abc import Sequence
from dataclasses import asdict, dataclass

import numpy as np
import pandas as pd

from loopclosure.consistency import ConsistencyMatrix
from loopclosure.hypotheses import TrajectoryHypothesis
from loopclosure.ledger import ConstraintLedger, LoopConstraint
from loopclosure.pose_graph import rmse
from loopclosure.world import WorldModel, eligible_queries, is_pair_correct

DEFAULT_THRESHOLDS: tuple[float, ...] = (0.1, 0.2, 0.3, 0.4, 0.5, 0.6, 0.7, 0.8, 0.9)
DEFAULT_ERROR_BINS: tuple[float, ...] = (5.0, 10.0, 20.0, 50.0)
PR_COLUMNS = ["threshold", "precision", "recall", "n_verified", "n_correct", "recall_constraint"]
STRATEGY_ROWS = ("TS", "NS", "US", "ALL")


@dataclass(frozen=True)
class PRPoint:
    threshold: float
    precision: float
    recall: float
    n_verified: int
    n_correct: int
    recall_constraint: float = 0.0


def is_correct(world: WorldModel, c: LoopConstraint) -> bool:
    return is_pair_correct(world, c.i, c.j)


def correct_mask(world: WorldModel, ledger: ConstraintLedger) -> np.ndarray:
    return np.array([is_correct(world, c) for c in ledger.constraints], dtype=bool)


def pr_sweep_from_frame(
    frame: pd.DataFrame,
    thresholds: Sequence[float],
    n_eligible: int,
    n_correct_total: int = 0,
) -> list[PRPoint]:
    """從帳本表（ledger.csv 的欄位）重算 PR 點。

    每個門檻以儲存的 oracle 分數重新判定；n_verified 為判定為匹配的數量。
    """
    scores = frame["oracle_score"].to_numpy(dtype=float)
    correct = frame["correct"].to_numpy() == 1
    queries = frame["i"].to_numpy()
    points = []
    for th in thresholds:
        matched = scores >= th
        n_matched = int(matched.sum())
        hits = matched & correct
        n_hit = int(hits.sum())
        precision = n_hit / n_matched if n_matched else 1.0
        covered = len(np.unique(queries[hits]))
        recall = covered / n_eligible if n_eligible else 0.0
        recall_c = n_hit / n_correct_total if n_correct_total else 0.0
        points.append(PRPoint(float(th), precision, recall, n_matched, n_hit, recall_c))
    return points


def pr_sweep(
    world: WorldModel,
    ledger: ConstraintLedger,
    thresholds: Sequence[float] = DEFAULT_THRESHOLDS,
    run_threshold: float | None = None,
) -> list[PRPoint]:
    frame = ledger.to_frame(lambda c: is_correct(world, c))
    if run_threshold is not None:
        frame = frame[frame["threshold"] == run_threshold]
    n_correct_total = int(correct_mask(world, ledger).sum())
    return pr_sweep_from_frame(frame, thresholds, len(eligible_queries(world)), n_correct_total)


def pr_frame(points: Sequence[PRPoint]) -> pd.DataFrame:
    return pd.DataFrame([asdict(p) for p in points], columns=PR_COLUMNS)


def pr_area(points: Sequence[PRPoint]) -> float:
    """PR 曲線下面積（依 recall 排序的梯形積分）。"""
    if len(points) < 2:
        return 0.0
    pts = sorted(points, key=lambda p: (p.recall, -p.precision))
    recall = np.array([p.recall for p in pts])
    precision = np.array([p.precision for p in pts])
    return float(np.trapezoid(precision, recall))


def window_ratios_from_frame(frame: pd.DataFrame, window_size: int) -> pd.DataFrame:
    """各時間窗內執行的驗證中，判定匹配與匹配且正確的比例。

    分母一律是該窗的驗證總數，所以各策略的列相加等於 ALL 列；沒有驗證的窗不出現。
    """
    columns = ["window_id", "strategy", "n_verified", "n_matched", "n_matched_correct",
               "verified_ratio", "correct_ratio"]
    if frame.empty:
        return pd.DataFrame(columns=columns)
    df = frame.assign(
        window_id=frame["executed_at"] // window_size,
        matched_correct=(frame["verdict"] == 1) & (frame["correct"] == 1),
    )
    totals = df.groupby("window_id").size()
    rows = []
    for window_id, group in df.groupby("window_id", sort=True):
        total = int(totals[window_id])
        for tag in STRATEGY_ROWS:
            part = group if tag == "ALL" else group[group["strategy"] == tag]
            n_matched = int((part["verdict"] == 1).sum())
            n_mc = int(part["matched_correct"].sum())
            rows.append({
                "window_id": int(window_id),
                "strategy": tag,
                "n_verified": len(part),
                "n_matched": n_matched,
                "n_matched_correct": n_mc,
                "verified_ratio": n_matched / total,
                "correct_ratio": n_mc / total,
            })
    return pd.DataFrame(rows, columns=columns)


def per_window_ratios(ledger: ConstraintLedger, world: WorldModel, window_size: int) -> pd.DataFrame:
    return window_ratios_from_frame(ledger.to_frame(lambda c: is_correct(world, c)), window_size)


def label_hypotheses(
    world: WorldModel,
    hypotheses: Sequence[TrajectoryHypothesis],
    consistency: ConsistencyMatrix,
    ledger: ConstraintLedger,
) -> pd.DataFrame:
    """每個假設的 RMSE（對真值前綴）與一致約束中正確的比例。"""
    correct = correct_mask(world, ledger)
    rows = []
    for h in hypotheses:
        column = consistency.column(h.id)
        n_ok = int(correct[column].sum()) if len(column) else 0
        rows.append({
            "hyp_id": h.id,
            "window_id": h.window_id,
            "rmse": rmse(h.trajectory, world.ground_truth),
            "converged": h.converged,
            "n_consistent": len(column),
            "n_consistent_correct": n_ok,
            "consistent_precision": n_ok / len(column) if len(column) else float("nan"),
        })
    return pd.DataFrame(
        rows,
        columns=["hyp_id", "window_id", "rmse", "converged", "n_consistent",
                 "n_consistent_correct", "consistent_precision"],
    )


def _bucket_labels(edges: Sequence[float]) -> list[str]:
    labels = [f"<{edges[0]:g}"]
    labels += [f"{a:g}-{b:g}" for a, b in zip(edges[:-1], edges[1:])]
    labels.append(f">{edges[-1]:g}")
    return labels


def guided_vs_uniform_trial(
    world: WorldModel,
    ledger: ConstraintLedger,
    consistency: ConsistencyMatrix,
    hypotheses: Sequence[TrajectoryHypothesis],
    rounds: int,
    *,
    seed: int = 0,
    error_bins: Sequence[float] = DEFAULT_ERROR_BINS,
    threshold: float = 0.5,
) -> pd.DataFrame:
    """依 RMSE 把假設分桶，比較 TS 引導抽樣與均勻抽樣命中正確約束的比例。

    每個桶抽 rounds 次（先均勻選桶內假設，再從其一致且未驗證的約束抽一個；
    池為空時退回均勻）。只量測命中率，不寫入帳本。
    """
    edges = sorted(float(e) for e in error_bins)
    if not edges:
        raise ValueError("error_bins must not be empty")
    correct = correct_mask(world, ledger)
    unverified = ledger.unverified_ids(threshold)
    unverified_mask = ~ledger.verified_mask(threshold)
    errors = np.array([rmse(h.trajectory, world.ground_truth) for h in hypotheses])
    bucket_of = np.searchsorted(edges, errors, side="right")
    bounds = [0.0, *edges, float("inf")]

    rows = []
    for b, label in enumerate(_bucket_labels(edges)):
        members = [h for h, k in zip(hypotheses, bucket_of) if k == b]
        row = {
            "bucket": label,
            "lower": bounds[b],
            "upper": bounds[b + 1],
            "n_hypotheses": len(members),
            "guided_samples": 0,
            "guided_hits": 0,
            "guided_ratio": float("nan"),
            "uniform_samples": 0,
            "uniform_hits": 0,
            "uniform_ratio": float("nan"),
        }
        if members and rounds > 0 and len(unverified):
            rng = np.random.default_rng([seed, b])
            picks = np.bincount(rng.integers(len(members), size=rounds), minlength=len(members))
            guided_hits = 0
            for h, count in zip(members, picks.tolist()):
                if count == 0:
                    continue
                column = consistency.column(h.id)
                pool = column[unverified_mask[column]] if len(column) else column
                if len(pool) == 0:
                    pool = unverified
                guided_hits += int(correct[rng.choice(pool, size=count)].sum())
            uniform_hits = int(correct[rng.choice(unverified, size=rounds)].sum())
            row.update(
                guided_samples=rounds,
                guided_hits=guided_hits,
                guided_ratio=guided_hits / rounds,
                uniform_samples=rounds,
                uniform_hits=uniform_hits,
                uniform_ratio=uniform_hits / rounds,
            )
        rows.append(row)
    return pd.DataFrame(rows)


def paired_bootstrap_ci(
    deltas: Sequence[float], *, n_boot: int = 10_000, confidence: float = 0.95, seed: int = 0
) -> tuple[float, float, float]:
    """成對差值的平均與百分位 bootstrap 信賴區間 (mean, low, high)。"""
    d = np.asarray(deltas, dtype=float)
    if len(d) == 0:
        raise ValueError("need at least one paired difference")
    mean = float(d.mean())
    if len(d) == 1:
        return mean, mean, mean
    rng = np.random.default_rng(seed)
    boots = d[rng.integers(len(d), size=(n_boot, len(d)))].mean(axis=1)
    alpha = (1.0 - confidence) / 2.0
    low, high = np.quantile(boots, [alpha, 1.0 - alpha])
    return mean, float(low), float(high)

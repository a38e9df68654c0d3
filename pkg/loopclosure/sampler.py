"""
引導式抽樣（選擇下一個要驗證的回環約束）

假設層級：BF（最少被抽中者）、DF（重要度上半部）、均勻。
約束層級：TS（與假設一致且未驗證）、NS（已驗證匹配約束的對角鄰居）、均勻。
策略依 StrategyMix 的機率混合；候選池為空時退回均勻抽樣。
"""

from __future__ import annotations

import math
from collections import Counter
from collections.abc import Callable
from dataclasses import dataclass
from typing import Literal

import numpy as np

from loopclosure.consistency import ConsistencyMatrix
from loopclosure.hypotheses import HypothesisEngine, TrajectoryHypothesis
from loopclosure.ledger import ConstraintLedger, LoopConstraint, StrategyTag, VerificationRecord

HypothesisTag = Literal["BF", "DF", "US"]
# usable：只從還有未驗證鄰居的種子中抽；any：先均勻抽種子，沒有鄰居就退回均勻
NS_SEED_RULES = ("usable", "any")

# 每一輪內不同用途的亂數串流
_PURPOSE_HYP_STRATEGY = 0
_PURPOSE_HYP_PICK = 1
_PURPOSE_CON_STRATEGY = 2
_PURPOSE_CON_PICK = 3
_PURPOSE_NEIGHBOR = 4
_PURPOSE_FALLBACK = 5

_REJECTION_TRIES = 64
_NEIGHBOR_OFFSETS = ((-1, -1), (-1, 1), (1, -1), (1, 1))


def parse_ratio(text: str) -> tuple[float, float, float]:
    """'x:y:z' → 正規化的三個機率；例如 '1:0:1' → (0.5, 0, 0.5)。"""
    parts = text.strip().split(":")
    if len(parts) != 3:
        raise ValueError(f"mix '{text}' must have the form x:y:z")
    try:
        values = [float(p) for p in parts]
    except ValueError as e:
        raise ValueError(f"mix '{text}' has a non-numeric part") from e
    if any(v < 0 or not math.isfinite(v) for v in values):
        raise ValueError(f"mix '{text}' must be finite and non-negative")
    total = sum(values)
    if total <= 0:
        raise ValueError(f"mix '{text}' sums to zero")
    return values[0] / total, values[1] / total, values[2] / total


def format_ratio(a: float, b: float, c: float) -> str:
    return ":".join(f"{v:g}" for v in (a, b, c))


@dataclass(frozen=True)
class StrategyMix:
    p_ts: float = 0.0
    p_ns: float = 0.0
    p_bf: float = 0.0
    p_df: float = 0.0
    rng_seed: int = 0

    def __post_init__(self) -> None:
        for name in ("p_ts", "p_ns", "p_bf", "p_df"):
            p = getattr(self, name)
            if not 0.0 <= p <= 1.0:
                raise ValueError(f"{name} must lie in [0, 1], got {p}")
        if self.p_ts + self.p_ns > 1.0 + 1e-12:
            raise ValueError("p_ts + p_ns must not exceed 1")
        if self.p_bf + self.p_df > 1.0 + 1e-12:
            raise ValueError("p_bf + p_df must not exceed 1")

    @classmethod
    def from_ratios(cls, constraint_mix: str, hypothesis_mix: str, rng_seed: int = 0) -> StrategyMix:
        """constraint_mix 為 US:NS:TS（P_TS = z/(x+y+z)），hypothesis_mix 為 BF:DF:US。"""
        _, ns, ts = parse_ratio(constraint_mix)
        bf, df, _ = parse_ratio(hypothesis_mix)
        return cls(p_ts=ts, p_ns=ns, p_bf=bf, p_df=df, rng_seed=rng_seed)

    @property
    def p_us_constraint(self) -> float:
        return max(0.0, 1.0 - self.p_ts - self.p_ns)

    @property
    def p_us_hypothesis(self) -> float:
        return max(0.0, 1.0 - self.p_bf - self.p_df)

    @property
    def label(self) -> str:
        return (
            f"{format_ratio(self.p_us_constraint, self.p_ns, self.p_ts)}"
            f"@{format_ratio(self.p_bf, self.p_df, self.p_us_hypothesis)}"
        )


def _draw(rng: np.random.Generator, probabilities: tuple[float, float], labels: tuple[str, str, str]) -> str:
    u = rng.random()
    if u < probabilities[0]:
        return labels[0]
    if u < probabilities[0] + probabilities[1]:
        return labels[1]
    return labels[2]


def uniform_unverified(ledger: ConstraintLedger, threshold: float, rng: np.random.Generator) -> LoopConstraint | None:
    """所有未驗證約束中均勻抽一個；先拒絕抽樣，失敗時改用完整清單。"""
    n = len(ledger)
    if n == 0:
        return None
    mask = ledger.verified_mask(threshold)
    for _ in range(_REJECTION_TRIES):
        k = int(rng.integers(n))
        if not mask[k]:
            return ledger.constraints[k]
    pool = np.flatnonzero(~mask)
    if len(pool) == 0:
        return None
    return ledger.constraints[int(pool[rng.integers(len(pool))])]


def diagonal_neighbors(
    c: LoopConstraint, ledger: ConstraintLedger, threshold: float
) -> list[LoopConstraint]:
    """(i±1, j±1) 中存在於帳本且尚未驗證的約束。"""
    out = []
    for di, dj in _NEIGHBOR_OFFSETS:
        n = ledger.find_pair(c.i + di, c.j + dj)
        if n is not None and not ledger.is_verified(n.id, threshold):
            out.append(n)
    return out


class GuidedSampler:
    """One sampler per run; rounds are strictly sequential."""

    def __init__(self, mix: StrategyMix, threshold: float = 0.5, *, ns_seed_rule: str = "usable"):
        if ns_seed_rule not in NS_SEED_RULES:
            raise ValueError(f"ns_seed_rule must be one of {', '.join(NS_SEED_RULES)}, got {ns_seed_rule!r}")
        self.mix = mix
        self.ns_seed_rule = ns_seed_rule
        self.threshold = threshold
        self.round_index = 0
        self.hypothesis_draws: Counter[str] = Counter()
        self.constraint_draws: Counter[str] = Counter()
        self.fallbacks = 0
        self.skips = 0
        # 每個 NS 選擇的 (選中約束 id, 種子約束 id)
        self.ns_trace: list[tuple[int, int]] = []

    def _rng(self, purpose: int) -> np.random.Generator:
        return np.random.default_rng([self.mix.rng_seed, self.round_index, purpose])

    def select_hypothesis(self, engine: HypothesisEngine) -> tuple[TrajectoryHypothesis, HypothesisTag]:
        hyps = engine.hypotheses
        if not hyps:
            raise ValueError("no hypotheses to select from")
        tag: HypothesisTag = _draw(  # type: ignore[assignment]
            self._rng(_PURPOSE_HYP_STRATEGY), (self.mix.p_bf, self.mix.p_df), ("BF", "DF", "US")
        )
        pick = self._rng(_PURPOSE_HYP_PICK)
        if tag == "BF":
            h = min(hyps, key=lambda x: (x.times_sampled, x.id))
        elif tag == "DF":
            ranked = sorted(hyps, key=lambda x: (-x.importance_weight, x.id))
            upper = ranked[: math.ceil(len(ranked) / 2)]
            h = upper[int(pick.integers(len(upper)))]
        else:
            h = hyps[int(pick.integers(len(hyps)))]
        engine.bump_sampled(h)
        self.hypothesis_draws[tag] += 1
        return h, tag

    def select_constraint(
        self,
        h: TrajectoryHypothesis | None,
        ledger: ConstraintLedger,
        consistency: ConsistencyMatrix,
    ) -> tuple[LoopConstraint | None, StrategyTag]:
        """None 表示所選策略的候選池為空，由呼叫端退回均勻抽樣。"""
        if h is None:
            tag: StrategyTag = "US"
        else:
            tag = _draw(  # type: ignore[assignment]
                self._rng(_PURPOSE_CON_STRATEGY), (self.mix.p_ts, self.mix.p_ns), ("TS", "NS", "US")
            )
        self.constraint_draws[tag] += 1
        pick = self._rng(_PURPOSE_CON_PICK)

        if tag == "TS":
            column = consistency.column(h.id)
            if len(column) == 0:
                return None, tag
            pool = column[~ledger.verified_mask(self.threshold)[column]]
            if len(pool) == 0:
                return None, tag
            return ledger.constraints[int(pool[pick.integers(len(pool))])], tag

        if tag == "NS":
            matched = ledger.matched_ids(self.threshold)
            if not matched:
                return None, tag
            seeds = np.intersect1d(consistency.column(h.id), np.array(matched, dtype=np.int64))
            if self.ns_seed_rule == "any":
                if len(seeds) == 0:
                    return None, tag
                seed_id = int(seeds[pick.integers(len(seeds))])
                neighbors = diagonal_neighbors(ledger.constraints[seed_id], ledger, self.threshold)
                if not neighbors:
                    return None, tag
            else:
                usable = []
                for cid in seeds.tolist():
                    found = diagonal_neighbors(ledger.constraints[cid], ledger, self.threshold)
                    if found:
                        usable.append((cid, found))
                if not usable:
                    return None, tag
                seed_id, neighbors = usable[int(pick.integers(len(usable)))]
            chosen = neighbors[int(self._rng(_PURPOSE_NEIGHBOR).integers(len(neighbors)))]
            self.ns_trace.append((chosen.id, seed_id))
            return chosen, tag

        return uniform_unverified(ledger, self.threshold, pick), tag

    def register_hypothesis(
        self, h: TrajectoryHypothesis, engine: HypothesisEngine, ledger: ConstraintLedger, consistency: ConsistencyMatrix
    ) -> int:
        """新假設的初始重要度：已驗證匹配且與它一致的約束數。"""
        matched = ledger.matched_ids(self.threshold)
        if not matched:
            return h.importance_weight
        n = len(np.intersect1d(consistency.column(h.id), np.array(matched, dtype=np.int64)))
        return engine.bump_importance(h, n)

    def sampling_round(
        self,
        engine: HypothesisEngine,
        ledger: ConstraintLedger,
        consistency: ConsistencyMatrix,
        oracle: Callable[[LoopConstraint], float],
        executed_at: int | None = None,
    ) -> VerificationRecord | None:
        """一輪：選假設 → 選約束 → oracle 驗證 → 記錄；沒有任何未驗證約束時略過。"""
        try:
            h = self.select_hypothesis(engine)[0] if engine.hypotheses else None
            c, tag = self.select_constraint(h, ledger, consistency)
            if c is None:
                c = uniform_unverified(ledger, self.threshold, self._rng(_PURPOSE_FALLBACK))
                if c is None:
                    self.skips += 1
                    return None
                if tag != "US":
                    self.fallbacks += 1
                tag = "US"
            rec = ledger.record_verification(c.id, oracle(c), self.threshold, tag, executed_at)
            if rec.verdict:
                for hid in consistency.rows_consistent(c.id):
                    engine.bump_importance(engine.hypotheses[hid])
            return rec
        finally:
            self.round_index += 1

from __future__ import annotations

from collections.abc import Callable, Sequence
from dataclasses import dataclass
from pathlib import Path
from typing import Literal

import numpy as np
import pandas as pd

from loopclosure.world import RetrievalCandidate

StrategyTag = Literal["US", "TS", "NS"]

LEDGER_COLUMNS = [
    "constraint_id", "t", "rank", "i", "j", "retrieval_score",
    "oracle_score", "verdict", "strategy",
    "threshold", "sequence_index", "executed_at", "correct",
]


class LedgerError(ValueError):
    """Ledger contract violation (duplicate time step, double verification, unknown id)."""


@dataclass(frozen=True, slots=True)
class LoopConstraint:
    id: int
    time_step: int
    rank: int
    pair: tuple[int, int]
    retrieval_score: float

    @property
    def i(self) -> int:
        return self.pair[0]

    @property
    def j(self) -> int:
        return self.pair[1]


@dataclass(frozen=True, slots=True)
class VerificationRecord:
    constraint_id: int
    oracle_score: float
    verdict: int
    threshold_used: float
    sequence_index: int
    strategy_tag: StrategyTag
    executed_at: int = -1


class ConstraintLedger:
    """Append-only list of loop closure constraints and their verification records."""

    def __init__(self):
        self.constraints: list[LoopConstraint] = []
        self._records: list[VerificationRecord] = []
        self._by_key: dict[tuple[int, float], VerificationRecord] = {}
        self._by_pair: dict[tuple[int, int], int] = {}
        # threshold -> bool mask over constraint ids (grown lazily)
        self._verified: dict[float, np.ndarray] = {}
        self._matched: dict[float, list[int]] = {}
        self._last_t: int | None = None

    def __len__(self) -> int:
        return len(self.constraints)

    @property
    def records(self) -> list[VerificationRecord]:
        return self._records

    @property
    def last_time_step(self) -> int | None:
        return self._last_t

    def ingest(self, t: int, candidates: Sequence[RetrievalCandidate]) -> list[LoopConstraint]:
        """Append one time step's retrieval candidates in rank order."""
        if self._last_t is not None and t <= self._last_t:
            raise LedgerError(f"time step {t} already ingested (last was {self._last_t})")
        self._last_t = t
        new: list[LoopConstraint] = []
        for rank, cand in enumerate(candidates, start=1):
            pair = (cand.query, cand.match)
            if pair in self._by_pair:
                raise LedgerError(f"pair {pair} already in ledger")
            c = LoopConstraint(
                id=len(self.constraints),
                time_step=t,
                rank=rank,
                pair=pair,
                retrieval_score=float(cand.score),
            )
            self.constraints.append(c)
            self._by_pair[pair] = c.id
            new.append(c)
        return new

    def get(self, constraint_id: int) -> LoopConstraint:
        if not 0 <= constraint_id < len(self.constraints):
            raise LedgerError(f"unknown constraint id {constraint_id}")
        return self.constraints[constraint_id]

    def find_pair(self, i: int, j: int) -> LoopConstraint | None:
        cid = self._by_pair.get((i, j))
        return None if cid is None else self.constraints[cid]

    def _mask(self, threshold: float) -> np.ndarray:
        mask = self._verified.get(threshold)
        n = len(self.constraints)
        if mask is None or len(mask) < n:
            grown = np.zeros(max(n, 16) * 2, dtype=bool)
            if mask is not None:
                grown[: len(mask)] = mask
            self._verified[threshold] = grown
            mask = grown
        return mask

    def verified_mask(self, threshold: float) -> np.ndarray:
        """Bool array over constraint ids: verified at this threshold (matched or not)."""
        return self._mask(threshold)[: len(self.constraints)]

    def is_verified(self, constraint_id: int, threshold: float) -> bool:
        return (constraint_id, threshold) in self._by_key

    def record_verification(
        self,
        constraint_id: int,
        oracle_score: float,
        threshold: float,
        strategy_tag: StrategyTag,
        executed_at: int | None = None,
    ) -> VerificationRecord:
        self.get(constraint_id)
        key = (constraint_id, threshold)
        if key in self._by_key:
            raise LedgerError(f"constraint {constraint_id} already verified at threshold {threshold}")
        rec = VerificationRecord(
            constraint_id=constraint_id,
            oracle_score=float(oracle_score),
            verdict=int(oracle_score >= threshold),
            threshold_used=threshold,
            sequence_index=len(self._records),
            strategy_tag=strategy_tag,
            executed_at=self._last_t if executed_at is None else executed_at,
        )
        self._records.append(rec)
        self._by_key[key] = rec
        self._mask(threshold)[constraint_id] = True
        if rec.verdict:
            self._matched.setdefault(threshold, []).append(constraint_id)
        return rec

    def records_at(self, threshold: float) -> list[VerificationRecord]:
        return [r for r in self._records if r.threshold_used == threshold]

    def verified_matched(self, threshold: float) -> list[LoopConstraint]:
        """Constraints whose record at this threshold has verdict 1, in verification order."""
        return [self.constraints[cid] for cid in self._matched.get(threshold, [])]

    def matched_ids(self, threshold: float) -> list[int]:
        return list(self._matched.get(threshold, []))

    def unverified_ids(self, threshold: float) -> np.ndarray:
        return np.flatnonzero(~self.verified_mask(threshold))

    def to_frame(self, correct: Callable[[LoopConstraint], bool] | None = None) -> pd.DataFrame:
        """One row per verification record, LEDGER_COLUMNS order."""
        rows = []
        for r in self._records:
            c = self.constraints[r.constraint_id]
            rows.append({
                "constraint_id": c.id,
                "t": c.time_step,
                "rank": c.rank,
                "i": c.i,
                "j": c.j,
                "retrieval_score": c.retrieval_score,
                "oracle_score": r.oracle_score,
                "verdict": r.verdict,
                "strategy": r.strategy_tag,
                "threshold": r.threshold_used,
                "sequence_index": r.sequence_index,
                "executed_at": r.executed_at,
                "correct": int(correct(c)) if correct is not None else -1,
            })
        return pd.DataFrame(rows, columns=LEDGER_COLUMNS)

    def dump_csv(self, path: str | Path, correct: Callable[[LoopConstraint], bool] | None = None) -> None:
        self.to_frame(correct).to_csv(path, index=False, lineterminator="\n", float_format="%.17g")

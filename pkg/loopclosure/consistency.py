"""
一致性矩陣 C

列 = 回環約束，欄 = 軌跡假設；C_ij 為真代表約束 i 的兩端點在假設 j 之下距離 < T_p。
只儲存為真的項目，未定義的位置一律視為不一致。
距離比較使用平方距離，逐列與逐欄的計算在浮點上完全相同。
"""

from __future__ import annotations

from array import array
from collections.abc import Sequence
from pathlib import Path

import numpy as np
import pandas as pd

from loopclosure.hypotheses import TrajectoryHypothesis
from loopclosure.ledger import LoopConstraint

DEFAULT_CONSISTENCY_THRESHOLD = 10.0
# 每欄待併入的新列超過此數即封存成區塊
_TAIL_LIMIT = 4096


def consistent(c: LoopConstraint, h: TrajectoryHypothesis, t_p: float = DEFAULT_CONSISTENCY_THRESHOLD) -> bool:
    """|| p(i,h) − p(j,h) || < T_p；任一端點超出假設長度時為 False。"""
    i, j = c.pair
    n = len(h.trajectory)
    if i >= n or j >= n:
        return False
    dx = h.trajectory[i, 0] - h.trajectory[j, 0]
    dy = h.trajectory[i, 1] - h.trajectory[j, 1]
    return bool(dx * dx + dy * dy < t_p * t_p)


def _column_mask(pairs: np.ndarray, traj: np.ndarray, t_p: float) -> np.ndarray:
    n = len(traj)
    defined = (pairs[:, 0] < n) & (pairs[:, 1] < n)
    out = np.zeros(len(pairs), dtype=bool)
    if defined.any():
        p = pairs[defined]
        dx = traj[p[:, 0], 0] - traj[p[:, 1], 0]
        dy = traj[p[:, 0], 1] - traj[p[:, 1], 1]
        out[defined] = dx * dx + dy * dy < t_p * t_p
    return out


class ConsistencyMatrix:
    """可增長的稀疏布林表，列與欄都只能附加，寫入後不再變動。

    每欄以遞增的 int32 區塊保存為真的約束 id；假設的平面位置另存於一個
    (欄, 時間, 2) 緩衝區，逐列更新與列檢視都在其上向量化計算。
    """

    def __init__(self, t_p: float = DEFAULT_CONSISTENCY_THRESHOLD):
        self.t_p = float(t_p)
        self._pairs = np.zeros((1024, 2), dtype=np.int64)
        self._row_count = 0
        self._chunks: list[list[np.ndarray]] = []
        self._tails: list[array] = []
        self._xy = np.zeros((16, 256, 2))
        self._lengths = np.zeros(0, dtype=np.int64)
        self.evaluations = 0

    @property
    def row_count(self) -> int:
        return self._row_count

    @property
    def col_count(self) -> int:
        return len(self._chunks)

    def _pair_mask(self, cols: np.ndarray, i: int, j: int) -> np.ndarray:
        dx = self._xy[cols, i, 0] - self._xy[cols, j, 0]
        dy = self._xy[cols, i, 1] - self._xy[cols, j, 1]
        return dx * dx + dy * dy < self.t_p * self.t_p

    def _covering(self, i: int, j: int) -> np.ndarray:
        # 只有長度涵蓋兩端點的假設才可能一致
        return np.flatnonzero(self._lengths > max(i, j))

    def _seal(self, col: int) -> None:
        tail = self._tails[col]
        if tail:
            self._chunks[col].append(np.frombuffer(tail, dtype=np.int32).copy())
            self._tails[col] = array("i")

    def _reserve(self, cols: int, length: int) -> None:
        cap_cols, cap_len, _ = self._xy.shape
        if cols <= cap_cols and length <= cap_len:
            return
        new_cols = cap_cols if cols <= cap_cols else max(cols, cap_cols + cap_cols // 2)
        new_len = cap_len if length <= cap_len else max(length, cap_len + cap_len // 2)
        grown = np.zeros((new_cols, new_len, 2))
        grown[:cap_cols, :cap_len] = self._xy
        self._xy = grown

    def add_constraint_row(self, c: LoopConstraint) -> None:
        if c.id != self._row_count:
            raise ValueError(f"expected row {self._row_count}, got constraint {c.id}")
        if self._row_count == len(self._pairs):
            grown = np.zeros((2 * len(self._pairs), 2), dtype=np.int64)
            grown[: self._row_count] = self._pairs[: self._row_count]
            self._pairs = grown
        self._pairs[self._row_count] = c.pair
        self._row_count += 1

        self.evaluations += self.col_count
        i, j = c.pair
        cols = self._covering(i, j)
        if len(cols) == 0:
            return
        for col in cols[self._pair_mask(cols, i, j)].tolist():
            tail = self._tails[col]
            tail.append(c.id)
            if len(tail) >= _TAIL_LIMIT:
                self._seal(col)

    def add_hypothesis_column(self, h: TrajectoryHypothesis) -> None:
        if h.id != self.col_count:
            raise ValueError(f"expected column {self.col_count}, got hypothesis {h.id}")
        col = self.col_count
        traj = np.asarray(h.trajectory)
        hits = np.flatnonzero(_column_mask(self._pairs[: self._row_count], traj, self.t_p))
        first = hits.astype(np.int32)
        first.setflags(write=False)
        self._chunks.append([first])
        self._tails.append(array("i"))
        self._reserve(col + 1, len(traj))
        self._xy[col, : len(traj)] = traj[:, :2]
        self._lengths = np.append(self._lengths, len(traj))
        self.evaluations += self._row_count

    def column(self, hyp_id: int) -> np.ndarray:
        """假設 hyp_id 欄中為真的約束 id，遞增排序（唯讀）。"""
        self._seal(hyp_id)
        chunks = self._chunks[hyp_id]
        if len(chunks) != 1:
            merged = np.concatenate(chunks)
            merged.setflags(write=False)
            self._chunks[hyp_id] = [merged]
        return self._chunks[hyp_id][0]

    def constraints_consistent_with(self, h: TrajectoryHypothesis) -> list[int]:
        return self.column(h.id).tolist()

    def rows_consistent(self, constraint_id: int) -> list[int]:
        """與約束一致的假設 id，遞增排序。"""
        if not 0 <= constraint_id < self._row_count:
            return []
        i, j = (int(v) for v in self._pairs[constraint_id])
        cols = self._covering(i, j)
        if len(cols) == 0:
            return []
        return cols[self._pair_mask(cols, i, j)].tolist()

    def entry(self, constraint_id: int, hyp_id: int) -> bool:
        if not (0 <= constraint_id < self._row_count and 0 <= hyp_id < self.col_count):
            raise IndexError(f"entry ({constraint_id}, {hyp_id}) not defined")
        col = self.column(hyp_id)
        k = int(np.searchsorted(col, constraint_id))
        return k < len(col) and int(col[k]) == constraint_id

    def to_dense(self) -> np.ndarray:
        dense = np.zeros((self._row_count, self.col_count), dtype=bool)
        for col in range(self.col_count):
            dense[self.column(col), col] = True
        return dense

    def true_count(self) -> int:
        return sum(a.size for chunks in self._chunks for a in chunks) + sum(len(t) for t in self._tails)

    def nbytes(self) -> int:
        """目前保存的陣列所佔位元組數。"""
        entries = sum(a.nbytes for chunks in self._chunks for a in chunks)
        pending = sum(t.itemsize * len(t) for t in self._tails)
        return self._pairs.nbytes + self._xy.nbytes + self._lengths.nbytes + entries + pending

    def dump_triplets(self, path: str | Path) -> None:
        """只輸出為真的項目：constraint_id,hyp_id。"""
        pairs = sorted((int(r), c) for c in range(self.col_count) for r in self.column(c))
        pd.DataFrame(pairs, columns=["constraint_id", "hyp_id"]).to_csv(
            path, index=False, lineterminator="\n"
        )


def batch_rebuild(
    constraints: Sequence[LoopConstraint],
    hypotheses: Sequence[TrajectoryHypothesis],
    t_p: float = DEFAULT_CONSISTENCY_THRESHOLD,
) -> np.ndarray:
    """從頭重建完整矩陣（稠密），作為增量結果的對照。"""
    dense = np.zeros((len(constraints), len(hypotheses)), dtype=bool)
    if not constraints:
        return dense
    pairs = np.array([c.pair for c in constraints], dtype=np.int64)
    for col, h in enumerate(hypotheses):
        dense[:, col] = _column_mask(pairs, np.asarray(h.trajectory), t_p)
    return dense

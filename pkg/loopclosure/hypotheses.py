from __future__ import annotations

from collections.abc import Callable, Sequence
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import pandas as pd
from rich.console import Console

from loopclosure.g2o_io import write_trajectory
from loopclosure.geometry import Pose2, as_pose_array
from loopclosure.ledger import ConstraintLedger, LoopConstraint
from loopclosure.pose_graph import DEFAULT_MAX_ITERS, DEFAULT_TOL, Edge, PoseGraph, optimize


@dataclass(eq=False)
class TrajectoryHypothesis:
    """A frozen trajectory produced from one window's best loop constraint.

    The trajectory covers locations 0..created_at and never grows; the two
    counters are the only mutable state.
    """

    id: int
    window_id: int
    seed_constraint: int
    trajectory: np.ndarray
    created_at: int
    converged: bool = True
    times_sampled: int = 0
    importance_weight: int = 0

    def __post_init__(self) -> None:
        traj = np.array(self.trajectory, dtype=float).reshape(-1, 3)
        traj.setflags(write=False)
        self.trajectory = traj

    def __len__(self) -> int:
        return len(self.trajectory)


def position(h: TrajectoryHypothesis, t: int) -> Pose2 | None:
    """p(t, h)；t 超出假設長度時回傳 None。"""
    if 0 <= t < len(h.trajectory):
        return Pose2.from_array(h.trajectory[t])
    return None


class HypothesisEngine:
    """Spawns one trajectory hypothesis per time window and keeps its counters."""

    def __init__(
        self,
        window_size: int,
        odometry_info: np.ndarray,
        loop_info: np.ndarray,
        *,
        origin: Pose2 | None = None,
        max_iters: int = DEFAULT_MAX_ITERS,
        tol: float = DEFAULT_TOL,
        console: Console | None = None,
    ):
        if window_size < 1:
            raise ValueError(f"window size must be positive, got {window_size}")
        self.window_size = window_size
        self.odometry_info = np.asarray(odometry_info, dtype=float)
        self.loop_info = np.asarray(loop_info, dtype=float)
        self.origin = origin or Pose2.identity()
        self.max_iters = max_iters
        self.tol = tol
        self.console = console
        self.hypotheses: list[TrajectoryHypothesis] = []

    def _log(self, msg: str) -> None:
        if self.console:
            self.console.print(f"  [dim][hypotheses] {msg}[/dim]")

    def __len__(self) -> int:
        return len(self.hypotheses)

    def is_boundary(self, t: int) -> bool:
        """Location t closes a window when (t + 1) is a multiple of W."""
        return (t + 1) % self.window_size == 0

    def window_best(self, t: int, ledger: ConstraintLedger) -> LoopConstraint | None:
        """Highest retrieval score among constraints ingested in the window ending at t.

        Ties go to the lowest rank, then the lowest id.
        """
        start = t - self.window_size + 1
        best: LoopConstraint | None = None
        for c in reversed(ledger.constraints):
            if c.time_step < start:
                break
            if c.time_step > t:
                continue
            if best is None or (-c.retrieval_score, c.rank, c.id) < (-best.retrieval_score, best.rank, best.id):
                best = c
        return best

    def maybe_spawn(
        self,
        t: int,
        ledger: ConstraintLedger,
        odometry: Sequence[Pose2] | np.ndarray,
        measure: Callable[[LoopConstraint], Pose2],
    ) -> TrajectoryHypothesis | None:
        if not self.is_boundary(t):
            return None
        seed = self.window_best(t, ledger)
        if seed is None:
            return None

        odo = as_pose_array(odometry)[:t]
        i, j = seed.pair
        loop = Edge(j, i, measure(seed), self.loop_info)
        graph = PoseGraph.from_odometry(odo, self.odometry_info, origin=self.origin, loop_edges=[loop])
        solved, report = optimize(graph, max_iters=self.max_iters, tol=self.tol)
        trajectory = solved.poses
        if report.singular:
            self._log(f"window ending at t={t}: singular normal equations, keeping dead reckoning")
        elif not report.converged:
            self._log(f"window ending at t={t}: optimizer stopped after {report.iterations} iterations")

        h = TrajectoryHypothesis(
            id=len(self.hypotheses),
            window_id=(t + 1) // self.window_size - 1,
            seed_constraint=seed.id,
            trajectory=trajectory,
            created_at=t,
            converged=report.converged,
        )
        self.hypotheses.append(h)
        return h

    def bump_sampled(self, h: TrajectoryHypothesis) -> int:
        h.times_sampled += 1
        return h.times_sampled

    def bump_importance(self, h: TrajectoryHypothesis, n: int = 1) -> int:
        if n < 0:
            raise ValueError("importance weight cannot decrease")
        h.importance_weight += n
        return h.importance_weight

    def index_frame(self) -> pd.DataFrame:
        return pd.DataFrame(
            [
                {
                    "hyp_id": h.id,
                    "window_id": h.window_id,
                    "seed_constraint": h.seed_constraint,
                    "times_sampled": h.times_sampled,
                    "importance_weight": h.importance_weight,
                }
                for h in self.hypotheses
            ],
            columns=["hyp_id", "window_id", "seed_constraint", "times_sampled", "importance_weight"],
        )

    def dump(self, out_dir: str | Path) -> None:
        """hyp_XXXXX.g2o per hypothesis plus index.csv."""
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        for h in self.hypotheses:
            write_trajectory(out / f"hyp_{h.id:05d}.g2o", h.trajectory)
        self.index_frame().to_csv(out / "index.csv", index=False, lineterminator="\n")

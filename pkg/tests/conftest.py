from __future__ import annotations

import numpy as np
import pytest

from loopclosure.config import ExperimentConfig
from loopclosure.hypotheses import TrajectoryHypothesis
from loopclosure.world import WorldModel, generate_course


def make_hypothesis(
    hid: int,
    trajectory: np.ndarray,
    *,
    window_id: int = 0,
    times_sampled: int = 0,
    importance_weight: int = 0,
) -> TrajectoryHypothesis:
    traj = np.asarray(trajectory, dtype=float).reshape(-1, 3)
    return TrajectoryHypothesis(
        id=hid,
        window_id=window_id,
        seed_constraint=0,
        trajectory=traj,
        created_at=len(traj) - 1,
        times_sampled=times_sampled,
        importance_weight=importance_weight,
    )


def line_trajectory(n: int, spacing: float) -> np.ndarray:
    """n poses along the x axis, `spacing` meters apart."""
    traj = np.zeros((n, 3))
    traj[:, 0] = spacing * np.arange(n)
    return traj


@pytest.fixture(scope="session")
def loop_world() -> WorldModel:
    return generate_course("loop", 800, seed=7, n_clusters=4)


@pytest.fixture
def small_config() -> ExperimentConfig:
    return ExperimentConfig(
        course_kind="loop",
        course_length=800,
        n_clusters=4,
        n_candidates=10,
        window_size=10,
        verifications_per_step=2,
        trial_rounds=500,
        constraint_mix="1:1:1",
        hypothesis_mix="1:1:1",
        seed=3,
    )

from __future__ import annotations

import math

import numpy as np
import pytest

from loopclosure.geometry import (
    Pose2,
    as_pose_array,
    compose,
    compose_arrays,
    integrate_arrays,
    inverse,
    normalize_angle,
    planar_distance,
    relative,
    relative_arrays,
    wrap_angles,
)


def _random_poses(rng: np.random.Generator, n: int) -> list[Pose2]:
    return [
        Pose2(float(x), float(y), float(t))
        for x, y, t in zip(rng.uniform(-50, 50, n), rng.uniform(-50, 50, n), rng.uniform(-math.pi, math.pi, n))
    ]


def _close(a: Pose2, b: Pose2, tol: float = 1e-9) -> bool:
    return (
        abs(a.x - b.x) < tol
        and abs(a.y - b.y) < tol
        and abs(normalize_angle(a.theta - b.theta)) < tol
    )


@pytest.mark.parametrize(
    ("angle", "expected"),
    [(0.0, 0.0), (math.pi, math.pi), (-math.pi, math.pi), (0.5 + 2 * math.pi, 0.5), (-0.5 - 4 * math.pi, -0.5)],
)
def test_normalize_angle_range(angle, expected):
    assert normalize_angle(angle) == pytest.approx(expected, abs=1e-12)


def test_wrap_angles_matches_scalar_version():
    a = np.linspace(-10.0, 10.0, 101)
    expected = [normalize_angle(v) for v in a]
    np.testing.assert_allclose(wrap_angles(a), expected, atol=1e-12)
    assert np.all(wrap_angles(a) > -math.pi)


def test_pose_normalizes_theta_and_rejects_non_finite():
    assert Pose2(0.0, 0.0, 3 * math.pi / 2).theta == pytest.approx(-math.pi / 2)
    with pytest.raises(ValueError):
        Pose2(float("nan"), 0.0, 0.0)
    with pytest.raises(ValueError):
        Pose2(0.0, float("inf"), 0.0)


def test_compose_with_identity_and_inverse():
    rng = np.random.default_rng(0)
    for a in _random_poses(rng, 50):
        assert _close(compose(a, Pose2.identity()), a)
        assert _close(compose(Pose2.identity(), a), a)
        assert _close(compose(a, inverse(a)), Pose2.identity())


def test_compose_is_associative():
    rng = np.random.default_rng(1)
    poses = _random_poses(rng, 60)
    for a, b, c in zip(poses[0::3], poses[1::3], poses[2::3]):
        assert _close(compose(compose(a, b), c), compose(a, compose(b, c)))


def test_relative_matches_homogeneous_matrices():
    rng = np.random.default_rng(2)
    poses = _random_poses(rng, 40)
    for a, b in zip(poses[0::2], poses[1::2]):
        expected = Pose2.from_matrix(np.linalg.inv(a.to_matrix()) @ b.to_matrix())
        assert _close(relative(a, b), expected)
        assert _close(compose(a, relative(a, b)), b)


def test_planar_distance_ignores_heading():
    assert planar_distance(Pose2(0, 0, 0.3), Pose2(3, 4, -2.0)) == pytest.approx(5.0)
    assert planar_distance(Pose2(1, 1, 0), Pose2(1, 1, 3)) == 0.0


def test_array_versions_match_scalar_versions():
    rng = np.random.default_rng(3)
    a = _random_poses(rng, 30)
    b = _random_poses(rng, 30)
    arr_a, arr_b = as_pose_array(a), as_pose_array(b)
    composed = compose_arrays(arr_a, arr_b)
    rel = relative_arrays(arr_a, arr_b)
    for k in range(30):
        assert _close(Pose2.from_array(composed[k]), compose(a[k], b[k]))
        assert _close(Pose2.from_array(rel[k]), relative(a[k], b[k]))


def test_integrate_arrays_equals_sequential_compose():
    rng = np.random.default_rng(4)
    steps = np.column_stack([rng.uniform(0, 1, 200), rng.uniform(-0.2, 0.2, 200), rng.uniform(-0.3, 0.3, 200)])
    origin = Pose2(2.0, -1.0, 0.7)
    traj = integrate_arrays(steps, origin.as_array())
    assert traj.shape == (201, 3)
    pose = origin
    for k in range(200):
        pose = compose(pose, Pose2.from_array(steps[k]))
        assert _close(Pose2.from_array(traj[k + 1]), pose, tol=1e-8)

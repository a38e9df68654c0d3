"""
SE(2) 群運算

Pose2 以 (x, y, theta) 表示平面位姿，單位為公尺與弧度，theta 一律正規化到 (-π, π]。
純值語意：所有函式皆無副作用。陣列版本（*_arrays）供模擬器與最佳化器向量化使用，
陣列形狀為 (n, 3)。
"""

from __future__ import annotations

import math
from collections.abc import Sequence
from dataclasses import dataclass

import numpy as np

TWO_PI = 2.0 * math.pi


def normalize_angle(a: float) -> float:
    """將角度正規化到 (-π, π]。"""
    r = math.remainder(a, TWO_PI)
    return math.pi if r <= -math.pi else r


def wrap_angles(a: np.ndarray) -> np.ndarray:
    """normalize_angle 的向量化版本。"""
    r = np.asarray(a, dtype=float)
    r = r - TWO_PI * np.round(r / TWO_PI)
    r = np.where(r <= -np.pi, r + TWO_PI, r)
    return np.where(r > np.pi, r - TWO_PI, r)


@dataclass(frozen=True, slots=True)
class Pose2:
    x: float = 0.0
    y: float = 0.0
    theta: float = 0.0

    def __post_init__(self) -> None:
        if not (math.isfinite(self.x) and math.isfinite(self.y) and math.isfinite(self.theta)):
            raise ValueError(f"Pose2 fields must be finite, got ({self.x}, {self.y}, {self.theta})")
        object.__setattr__(self, "x", float(self.x))
        object.__setattr__(self, "y", float(self.y))
        object.__setattr__(self, "theta", normalize_angle(float(self.theta)))

    @classmethod
    def identity(cls) -> Pose2:
        return cls(0.0, 0.0, 0.0)

    @classmethod
    def from_array(cls, v: Sequence[float] | np.ndarray) -> Pose2:
        return cls(float(v[0]), float(v[1]), float(v[2]))

    def as_array(self) -> np.ndarray:
        return np.array([self.x, self.y, self.theta], dtype=float)

    def to_matrix(self) -> np.ndarray:
        """3x3 齊次矩陣。"""
        c, s = math.cos(self.theta), math.sin(self.theta)
        return np.array([[c, -s, self.x], [s, c, self.y], [0.0, 0.0, 1.0]])

    @classmethod
    def from_matrix(cls, m: np.ndarray) -> Pose2:
        return cls(float(m[0, 2]), float(m[1, 2]), math.atan2(m[1, 0], m[0, 0]))


def compose(a: Pose2, b: Pose2) -> Pose2:
    """a ⊕ b，b 表示於 a 的座標系中。"""
    c, s = math.cos(a.theta), math.sin(a.theta)
    return Pose2(
        a.x + c * b.x - s * b.y,
        a.y + s * b.x + c * b.y,
        a.theta + b.theta,
    )


def inverse(a: Pose2) -> Pose2:
    c, s = math.cos(a.theta), math.sin(a.theta)
    return Pose2(-(c * a.x + s * a.y), -(-s * a.x + c * a.y), -a.theta)


def relative(a: Pose2, b: Pose2) -> Pose2:
    """inverse(a) ⊕ b，即 b 在 a 座標系中的位姿。"""
    c, s = math.cos(a.theta), math.sin(a.theta)
    dx, dy = b.x - a.x, b.y - a.y
    return Pose2(c * dx + s * dy, -s * dx + c * dy, b.theta - a.theta)


def planar_distance(a: Pose2, b: Pose2) -> float:
    """只看 (x, y) 的歐氏距離，忽略航向。"""
    return math.hypot(b.x - a.x, b.y - a.y)


# ── 向量化版本 ────────────────────────────────────────────────────────────────


def as_pose_array(poses: Sequence[Pose2] | np.ndarray) -> np.ndarray:
    """把 Pose2 序列或 (n, 3) 陣列統一轉成 float 陣列（複本）。"""
    if isinstance(poses, np.ndarray):
        arr = np.array(poses, dtype=float)
        return arr.reshape(-1, 3)
    if len(poses) == 0:
        return np.zeros((0, 3))
    return np.array([(p.x, p.y, p.theta) for p in poses], dtype=float)


def to_poses(arr: np.ndarray) -> list[Pose2]:
    return [Pose2(float(r[0]), float(r[1]), float(r[2])) for r in np.asarray(arr).reshape(-1, 3)]


def compose_arrays(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """逐列 a ⊕ b。"""
    a = np.asarray(a, dtype=float).reshape(-1, 3)
    b = np.asarray(b, dtype=float).reshape(-1, 3)
    c, s = np.cos(a[:, 2]), np.sin(a[:, 2])
    out = np.empty(np.broadcast_shapes(a.shape, b.shape))
    out[:, 0] = a[:, 0] + c * b[:, 0] - s * b[:, 1]
    out[:, 1] = a[:, 1] + s * b[:, 0] + c * b[:, 1]
    out[:, 2] = wrap_angles(a[:, 2] + b[:, 2])
    return out


def relative_arrays(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """逐列 inverse(a) ⊕ b。"""
    a = np.asarray(a, dtype=float).reshape(-1, 3)
    b = np.asarray(b, dtype=float).reshape(-1, 3)
    c, s = np.cos(a[:, 2]), np.sin(a[:, 2])
    dx, dy = b[:, 0] - a[:, 0], b[:, 1] - a[:, 1]
    out = np.empty(np.broadcast_shapes(a.shape, b.shape))
    out[:, 0] = c * dx + s * dy
    out[:, 1] = -s * dx + c * dy
    out[:, 2] = wrap_angles(b[:, 2] - a[:, 2])
    return out


def integrate_arrays(steps: np.ndarray, origin: np.ndarray) -> np.ndarray:
    """由原點依序累積相對位移，回傳 (n + 1, 3) 軌跡。

    航向以累加後再正規化，平移以累積航向旋轉後累加，等價於逐步 compose。
    """
    steps = np.asarray(steps, dtype=float).reshape(-1, 3)
    origin = np.asarray(origin, dtype=float).reshape(3)
    n = len(steps)
    out = np.empty((n + 1, 3))
    out[0] = origin
    if n == 0:
        return out
    # 每一步平移是在前一個位姿的航向下表示
    headings = origin[2] + np.concatenate(([0.0], np.cumsum(steps[:, 2])))
    c, s = np.cos(headings[:-1]), np.sin(headings[:-1])
    dx = c * steps[:, 0] - s * steps[:, 1]
    dy = s * steps[:, 0] + c * steps[:, 1]
    out[1:, 0] = origin[0] + np.cumsum(dx)
    out[1:, 1] = origin[1] + np.cumsum(dy)
    out[1:, 2] = wrap_angles(headings[1:])
    return out

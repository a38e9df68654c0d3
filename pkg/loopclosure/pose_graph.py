"""
SE(2) 位姿圖最佳化

奇異時回報未收斂並原樣回傳輸入；位姿 0 固定（gauge），在最佳化前後逐位元相同。
誤差定義：e = vec(relative(z, relative(x_i, x_j)))，角度分量正規化到 (-π, π]。
解法：Gauss-Newton，步長被拒時以加性阻尼（Levenberg 形式）逐級放大。
法方程以 scipy.sparse 組裝，以對稱排序的 SuperLU 分解；200 個位姿以下改用稠密解。
"""

from __future__ import annotations

import math
import warnings
from collections.abc import Sequence
from dataclasses import dataclass, field, replace

import numpy as np
import scipy.linalg
import scipy.sparse as sp
import scipy.sparse.linalg as spla

from loopclosure.geometry import (
    Pose2,
    as_pose_array,
    integrate_arrays,
    relative_arrays,
    to_poses,
    wrap_angles,
)

DEFAULT_MAX_ITERS = 50
DEFAULT_TOL = 1e-6
DENSE_POSE_LIMIT = 200
# chi2 低於此值視為已精確滿足
CHI2_FLOOR = 1e-20
_DAMPING_START = 1e-6
_DAMPING_MAX = 1e8


def odometry_information(sigma_xy: float, sigma_theta: float) -> np.ndarray:
    """diag(1/σ_xy², 1/σ_xy², 1/σ_θ²)；σ 為 0 時以 1e-6 代替避免無窮大。"""
    sxy = max(float(sigma_xy), 1e-6)
    sth = max(float(sigma_theta), 1e-6)
    return np.diag([1.0 / sxy**2, 1.0 / sxy**2, 1.0 / sth**2])


def loop_information(odometry_info: np.ndarray, scale: float = 10.0) -> np.ndarray:
    """回環邊權重：相對於里程計資訊矩陣放大 scale 倍。"""
    return np.asarray(odometry_info, dtype=float) * float(scale)


def _check_information(info: np.ndarray) -> np.ndarray:
    info = np.asarray(info, dtype=float)
    if info.shape != (3, 3):
        raise ValueError(f"information matrix must be 3x3, got {info.shape}")
    if not np.allclose(info, info.T, atol=1e-12, rtol=0.0):
        raise ValueError("information matrix must be symmetric")
    try:
        np.linalg.cholesky(info)
    except np.linalg.LinAlgError as e:
        raise ValueError("information matrix must be positive definite") from e
    return info


@dataclass(frozen=True, eq=False)
class Edge:
    from_index: int
    to_index: int
    measurement: Pose2
    information: np.ndarray

    def __post_init__(self) -> None:
        if self.from_index == self.to_index:
            raise ValueError(f"edge must connect two different poses, got {self.from_index}")
        if self.from_index < 0 or self.to_index < 0:
            raise ValueError("edge indices must be non-negative")
        object.__setattr__(self, "information", _check_information(self.information))


@dataclass(frozen=True, eq=False)
class PoseGraph:
    """位姿鏈 0→1→…→n−1 加上稀疏回環邊。

    里程計邊以陣列儲存（odometry[t] 為 t→t+1 的量測），需要 Edge 物件時再展開。
    """

    poses: np.ndarray
    odometry: np.ndarray
    odometry_info: np.ndarray
    loop_edges: tuple[Edge, ...] = ()
    _stacked: dict = field(default_factory=dict, repr=False, compare=False)

    def __post_init__(self) -> None:
        poses = as_pose_array(self.poses)
        odometry = as_pose_array(self.odometry)
        if len(poses) < 1:
            raise ValueError("pose graph needs at least one pose")
        if len(odometry) != len(poses) - 1:
            raise ValueError(
                f"odometry chain must have {len(poses) - 1} edges, got {len(odometry)}"
            )
        info = np.asarray(self.odometry_info, dtype=float)
        if info.ndim == 2:
            info = np.broadcast_to(_check_information(info), (len(odometry), 3, 3))
        elif info.shape != (len(odometry), 3, 3):
            raise ValueError(f"odometry information must be 3x3 or ({len(odometry)}, 3, 3)")
        for e in self.loop_edges:
            self._check_bounds(e, len(poses))
        object.__setattr__(self, "poses", poses)
        object.__setattr__(self, "odometry", odometry)
        object.__setattr__(self, "odometry_info", info)
        object.__setattr__(self, "loop_edges", tuple(self.loop_edges))

    @staticmethod
    def _check_bounds(e: Edge, n: int) -> None:
        if e.from_index >= n or e.to_index >= n:
            raise IndexError(f"edge {e.from_index}->{e.to_index} out of bounds for {n} poses")

    @classmethod
    def from_odometry(
        cls,
        odometry: Sequence[Pose2] | np.ndarray,
        information: np.ndarray,
        *,
        origin: Pose2 | None = None,
        loop_edges: Sequence[Edge] = (),
        initial: np.ndarray | None = None,
    ) -> PoseGraph:
        """以航位推算軌跡作為初值建立位姿圖。"""
        odo = as_pose_array(odometry)
        start = (origin or Pose2.identity()).as_array()
        poses = integrate_arrays(odo, start) if initial is None else as_pose_array(initial)
        return cls(poses=poses, odometry=odo, odometry_info=information, loop_edges=tuple(loop_edges))

    def __len__(self) -> int:
        return len(self.poses)

    def pose(self, index: int) -> Pose2:
        return Pose2.from_array(self.poses[index])

    def with_poses(self, poses: np.ndarray) -> PoseGraph:
        return replace(self, poses=np.array(poses, dtype=float), _stacked={})

    @property
    def odometry_edges(self) -> list[Edge]:
        return [
            Edge(t, t + 1, Pose2.from_array(self.odometry[t]), np.array(self.odometry_info[t]))
            for t in range(len(self.odometry))
        ]

    @property
    def edges(self) -> list[Edge]:
        return self.odometry_edges + list(self.loop_edges)

    def stacked(self) -> tuple[np.ndarray, np.ndarray, np.ndarray, np.ndarray]:
        """(from, to, measurement, information) 的堆疊陣列，鏈邊在前。"""
        if not self._stacked:
            n_odo = len(self.odometry)
            src = np.arange(n_odo)
            dst = src + 1
            meas = self.odometry
            info = self.odometry_info
            if self.loop_edges:
                src = np.concatenate([src, [e.from_index for e in self.loop_edges]])
                dst = np.concatenate([dst, [e.to_index for e in self.loop_edges]])
                meas = np.vstack([meas, [e.measurement.as_array() for e in self.loop_edges]])
                info = np.concatenate([info, np.stack([e.information for e in self.loop_edges])])
            self._stacked.update(
                src=src.astype(np.int64),
                dst=dst.astype(np.int64),
                meas=np.asarray(meas, dtype=float).reshape(-1, 3),
                info=np.asarray(info, dtype=float).reshape(-1, 3, 3),
            )
        s = self._stacked
        return s["src"], s["dst"], s["meas"], s["info"]


@dataclass(frozen=True)
class OptimizeReport:
    iterations: int
    initial_chi2: float
    final_chi2: float
    converged: bool
    chi2_history: tuple[float, ...] = ()
    # 法方程無有限解；此時回傳的位姿圖即輸入本身
    singular: bool = False


# ── 殘差與 Jacobian ───────────────────────────────────────────────────────────


def _errors(x: np.ndarray, src: np.ndarray, dst: np.ndarray, meas: np.ndarray) -> np.ndarray:
    return relative_arrays(meas, relative_arrays(x[src], x[dst]))


def _jacobians(
    x: np.ndarray, src: np.ndarray, dst: np.ndarray, meas: np.ndarray
) -> tuple[np.ndarray, np.ndarray]:
    """de/dx_i 與 de/dx_j，對全域參數 (x, y, θ)。"""
    phi = x[src, 2] + meas[:, 2]
    c, s = np.cos(phi), np.sin(phi)
    dx = x[dst, 0] - x[src, 0]
    dy = x[dst, 1] - x[src, 1]
    n = len(src)
    a = np.zeros((n, 3, 3))
    b = np.zeros((n, 3, 3))
    a[:, 0, 0] = -c
    a[:, 0, 1] = -s
    a[:, 0, 2] = -s * dx + c * dy
    a[:, 1, 0] = s
    a[:, 1, 1] = -c
    a[:, 1, 2] = -c * dx - s * dy
    a[:, 2, 2] = -1.0
    b[:, 0, 0] = c
    b[:, 0, 1] = s
    b[:, 1, 0] = -s
    b[:, 1, 1] = c
    b[:, 2, 2] = 1.0
    return a, b


def _chi2(x: np.ndarray, src, dst, meas, info) -> float:
    e = _errors(x, src, dst, meas)
    return float(np.einsum("ei,eij,ej->", e, info, e))


def edge_error(graph: PoseGraph, e: Edge) -> np.ndarray:
    n = len(graph)
    if not (0 <= e.from_index < n and 0 <= e.to_index < n):
        raise IndexError(f"edge {e.from_index}->{e.to_index} out of bounds for {n} poses")
    return _errors(
        graph.poses,
        np.array([e.from_index]),
        np.array([e.to_index]),
        e.measurement.as_array().reshape(1, 3),
    )[0]


def edge_jacobians(graph: PoseGraph, e: Edge) -> tuple[np.ndarray, np.ndarray]:
    """回傳 (A, B) = (de/dx_from, de/dx_to)，各為 3x3。"""
    n = len(graph)
    if not (0 <= e.from_index < n and 0 <= e.to_index < n):
        raise IndexError(f"edge {e.from_index}->{e.to_index} out of bounds for {n} poses")
    a, b = _jacobians(
        graph.poses,
        np.array([e.from_index]),
        np.array([e.to_index]),
        e.measurement.as_array().reshape(1, 3),
    )
    return a[0], b[0]


def chi2(graph: PoseGraph) -> float:
    return _chi2(graph.poses, *graph.stacked())


def chi2_gradient(graph: PoseGraph) -> np.ndarray:
    """d(chi2)/dx，形狀 (n, 3)；即 2·Jᵀ Ω e。"""
    src, dst, meas, info = graph.stacked()
    _, b = _linearize(graph.poses, src, dst, meas, info)
    return 2.0 * b.reshape(-1, 3)


# ── 法方程 ─────────────────────────────────────────────────────────────────────

_R_OFF = np.repeat(np.arange(3), 3)
_C_OFF = np.tile(np.arange(3), 3)


def _linearize(x, src, dst, meas, info) -> tuple[sp.csc_matrix, np.ndarray]:
    n = len(x)
    e = _errors(x, src, dst, meas)
    a, b = _jacobians(x, src, dst, meas)
    at_o = np.einsum("eki,ekl->eil", a, info)
    bt_o = np.einsum("eki,ekl->eil", b, info)
    blocks = (
        (src, src, np.einsum("eil,elj->eij", at_o, a)),
        (src, dst, np.einsum("eil,elj->eij", at_o, b)),
        (dst, src, np.einsum("eil,elj->eij", bt_o, a)),
        (dst, dst, np.einsum("eil,elj->eij", bt_o, b)),
    )
    rows = np.concatenate([(3 * p)[:, None] + _R_OFF[None, :] for p, _, _ in blocks]).ravel()
    cols = np.concatenate([(3 * q)[:, None] + _C_OFF[None, :] for _, q, _ in blocks]).ravel()
    data = np.concatenate([h.reshape(-1, 9) for _, _, h in blocks]).ravel()
    hess = sp.coo_matrix((data, (rows, cols)), shape=(3 * n, 3 * n)).tocsc()

    g_src = np.einsum("eil,el->ei", at_o, e)
    g_dst = np.einsum("eil,el->ei", bt_o, e)
    idx = np.concatenate([(3 * src)[:, None] + np.arange(3), (3 * dst)[:, None] + np.arange(3)]).ravel()
    grad = np.bincount(idx, weights=np.concatenate([g_src, g_dst]).ravel(), minlength=3 * n)
    return hess, grad


def _solve(hess: sp.csc_matrix, rhs: np.ndarray, damping: float) -> np.ndarray | None:
    """解 (H + λI) dx = −b；失敗或出現非有限值時回傳 None。"""
    m = hess.shape[0]
    try:
        with warnings.catch_warnings():
            warnings.simplefilter("ignore")
            if m <= 3 * DENSE_POSE_LIMIT:
                dense = hess.toarray() + damping * np.eye(m)
                dx = scipy.linalg.solve(dense, -rhs, assume_a="sym")
            else:
                # H 對稱正定：A+Aᵀ 最小度排序，不選主元
                lu = spla.splu(
                    (hess + damping * sp.identity(m, format="csc")).tocsc(),
                    permc_spec="MMD_AT_PLUS_A",
                    diag_pivot_thresh=0.0,
                    options={"SymmetricMode": True},
                )
                dx = lu.solve(-rhs)
    except (np.linalg.LinAlgError, scipy.linalg.LinAlgError, RuntimeError, ValueError):
        return None
    dx = np.asarray(dx, dtype=float)
    if not np.all(np.isfinite(dx)):
        return None
    return dx


def _apply(x: np.ndarray, dx: np.ndarray) -> np.ndarray:
    out = x.copy()
    out[1:] += dx.reshape(-1, 3)
    out[1:, 2] = wrap_angles(out[1:, 2])
    return out


def optimize(
    graph: PoseGraph,
    max_iters: int = DEFAULT_MAX_ITERS,
    tol: float = DEFAULT_TOL,
) -> tuple[PoseGraph, OptimizeReport]:
    """Gauss-Newton；被拒步長時放大阻尼，chi2 在接受的迭代間不遞增。

    終止條件：chi2 相對下降 < tol、已低於 CHI2_FLOOR、無法再下降，或達 max_iters。
    """
    src, dst, meas, info = graph.stacked()
    x = graph.poses.copy()
    chi = _chi2(x, src, dst, meas, info)
    initial = chi
    history = [chi]

    if len(x) < 2:
        return graph, OptimizeReport(0, initial, chi, True, tuple(history))

    converged = False
    iterations = 0
    damping = 0.0
    for _ in range(max_iters):
        if chi <= CHI2_FLOOR:
            converged = True
            break
        hess, grad = _linearize(x, src, dst, meas, info)
        hess = hess[3:, 3:]
        grad = grad[3:]
        scale = float(np.mean(hess.diagonal()))
        if not (math.isfinite(chi) and math.isfinite(scale)):
            return graph, OptimizeReport(iterations, initial, initial, False, (initial,), singular=True)
        scale = max(scale, 1.0)

        accepted = False
        saw_finite = False
        x_try, chi_try = x, chi
        while True:
            dx = _solve(hess, grad, damping)
            if dx is not None:
                saw_finite = True
                x_try = _apply(x, dx)
                chi_try = _chi2(x_try, src, dst, meas, info)
                if chi_try <= chi:
                    accepted = True
                    break
            if damping >= _DAMPING_MAX * scale:
                break
            damping = _DAMPING_START * scale if damping == 0.0 else damping * 10.0
        iterations += 1

        if not accepted:
            if not saw_finite:
                return graph, OptimizeReport(iterations, initial, initial, False, (initial,), singular=True)
            # 有限步長卻無法再下降：已在駐點
            converged = True
            break

        decrease = (chi - chi_try) / chi if chi > 0.0 else 0.0
        x, chi = x_try, chi_try
        history.append(chi)
        damping = damping / 10.0 if damping > _DAMPING_START * scale else 0.0
        if decrease < tol:
            converged = True
            break

    return graph.with_poses(x), OptimizeReport(iterations, initial, chi, converged, tuple(history))


def dead_reckon(odometry: Sequence[Pose2] | np.ndarray, origin: Pose2 | None = None) -> list[Pose2]:
    """pose_0 = origin，pose_{t+1} = compose(pose_t, u_{t+1})。"""
    start = (origin or Pose2.identity()).as_array()
    return to_poses(integrate_arrays(as_pose_array(odometry), start))


def rmse(estimate: np.ndarray, truth: np.ndarray) -> float:
    """共同長度上的平面位置均方根誤差（公尺）。"""
    est = as_pose_array(estimate)
    ref = as_pose_array(truth)
    n = min(len(est), len(ref))
    if n == 0:
        return 0.0
    d = est[:n, :2] - ref[:n, :2]
    return math.sqrt(float(np.mean(np.sum(d * d, axis=1))))

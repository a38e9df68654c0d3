"""
合成世界模擬器

取代立體視覺前端：產生真值軌跡、帶雜訊的里程計、檢索候選（帶感知混淆）、
以及驗證 oracle。所有抽樣都由明確的種子決定，相同種子輸出逐位元相同。
"""

from __future__ import annotations

import math
from collections.abc import Sequence
from dataclasses import dataclass, field
from pathlib import Path
from typing import Literal, get_args

import numpy as np
from scipy.special import ndtr, ndtri

from loopclosure.geometry import (
    Pose2,
    compose_arrays,
    relative,
    relative_arrays,
    to_poses,
)

CourseKind = Literal["loop", "figure_eight", "campus_multi_loop"]
COURSE_KINDS: tuple[str, ...] = get_args(CourseKind)

STEP_LENGTH = 0.25
DEFAULT_REVISIT_RADIUS = 10.0
DEFAULT_MIN_TRAVEL = 100.0
ORACLE_CALIBRATION_THRESHOLD = 0.5

# 亂數串流編號：同一個種子下不同用途互不干擾
_STREAM_COURSE = 0
_STREAM_CLUSTERS = 1
_STREAM_ODOMETRY = 2
_STREAM_RETRIEVE = 3
_STREAM_ORACLE = 4
_STREAM_MEASURE = 5

_LAPS = 2
_CLUSTER_SEGMENT = 12


@dataclass(frozen=True)
class ScoreModel:
    """檢索分數的三個常態族群（截斷到 [0, 1]）。"""

    true_mean: float = 0.7
    aliased_mean: float = 0.5
    distractor_mean: float = 0.3
    sigma: float = 0.15

    def __post_init__(self) -> None:
        if self.sigma < 0:
            raise ValueError(f"score sigma must be non-negative, got {self.sigma}")


@dataclass(frozen=True)
class OracleConfig:
    p_true_accept: float = 0.8
    p_false_accept: float = 0.1
    score_noise_sigma: float = 1.0

    def __post_init__(self) -> None:
        for name in ("p_true_accept", "p_false_accept"):
            p = getattr(self, name)
            if not 0.0 <= p <= 1.0:
                raise ValueError(f"{name} must lie in [0, 1], got {p}")
        if not self.p_true_accept > self.p_false_accept:
            raise ValueError("p_true_accept must exceed p_false_accept")
        if not self.score_noise_sigma > 0:
            raise ValueError(f"score_noise_sigma must be positive, got {self.score_noise_sigma}")


@dataclass(frozen=True)
class RetrievalCandidate:
    query: int
    match: int
    score: float

    def __post_init__(self) -> None:
        if not self.match < self.query:
            raise ValueError(f"match {self.match} must precede query {self.query}")
        if not math.isfinite(self.score):
            raise ValueError("retrieval score must be finite")


@dataclass(frozen=True, eq=False)
class WorldModel:
    ground_truth: np.ndarray
    aliasing_clusters: tuple[frozenset[int], ...] = ()
    revisit_radius: float = DEFAULT_REVISIT_RADIUS
    rng_seed: int = 0
    min_travel: float = DEFAULT_MIN_TRAVEL
    kind: str = "loop"
    score_model: ScoreModel = field(default_factory=ScoreModel)
    travel: np.ndarray = field(init=False, repr=False)
    cluster_of: np.ndarray = field(init=False, repr=False)
    _ranges: dict = field(default_factory=dict, init=False, repr=False)

    def __post_init__(self) -> None:
        gt = np.array(self.ground_truth, dtype=float).reshape(-1, 3)
        if len(gt) < 2:
            raise ValueError("ground truth needs at least two poses")
        gt.setflags(write=False)
        cluster_of = np.full(len(gt), -1, dtype=np.int64)
        for cid, members in enumerate(self.aliasing_clusters):
            for idx in members:
                if not 0 <= idx < len(gt):
                    raise ValueError(f"aliasing cluster index {idx} out of range")
                if cluster_of[idx] != -1:
                    raise ValueError(f"aliasing clusters overlap at index {idx}")
                cluster_of[idx] = cid
        steps = np.hypot(np.diff(gt[:, 0]), np.diff(gt[:, 1]))
        travel = np.concatenate(([0.0], np.cumsum(steps)))
        travel.setflags(write=False)
        cluster_of.setflags(write=False)
        object.__setattr__(self, "ground_truth", gt)
        object.__setattr__(self, "travel", travel)
        object.__setattr__(self, "cluster_of", cluster_of)

    def __len__(self) -> int:
        return len(self.ground_truth)

    def pose(self, t: int) -> Pose2:
        return Pose2.from_array(self.ground_truth[t])

    @property
    def total_travel(self) -> float:
        return float(self.travel[-1])


def travel_distance(world: WorldModel, a: int, b: int) -> float:
    """位置 a 與 b 之間沿路線的行駛距離（公尺）。"""
    return abs(float(world.travel[b] - world.travel[a]))


# ── 路線產生 ───────────────────────────────────────────────────────────────────


def _base_loop(rng: np.random.Generator, n: int) -> np.ndarray:
    psi = np.linspace(0.0, 2.0 * np.pi * _LAPS, n)
    a2, a3 = rng.uniform(0.0, 0.15, size=2)
    p2, p3 = rng.uniform(0.0, 2.0 * np.pi, size=2)
    r = 1.0 + a2 * np.cos(2 * psi + p2) + a3 * np.cos(3 * psi + p3)
    return np.column_stack([r * np.cos(psi), r * np.sin(psi)])


def _base_figure_eight(rng: np.random.Generator, n: int) -> np.ndarray:
    psi = np.linspace(0.0, 2.0 * np.pi * _LAPS, n)
    b = rng.uniform(0.6, 0.9)
    return np.column_stack([np.sin(psi), b * np.sin(psi) * np.cos(psi)])


def _chaikin(points: np.ndarray, iterations: int = 3) -> np.ndarray:
    """Chaikin 切角，讓格狀路線在路口轉彎平滑。"""
    pts = points
    for _ in range(iterations):
        q = 0.75 * pts[:-1] + 0.25 * pts[1:]
        r = 0.25 * pts[:-1] + 0.75 * pts[1:]
        inner = np.empty((2 * len(q), 2))
        inner[0::2] = q
        inner[1::2] = r
        pts = np.vstack([pts[:1], inner, pts[-1:]])
    return pts


def _manhattan(a: tuple[int, int], b: tuple[int, int]) -> list[tuple[int, int]]:
    path = []
    x, y = a
    while x != b[0]:
        x += 1 if b[0] > x else -1
        path.append((x, y))
    while y != b[1]:
        y += 1 if b[1] > y else -1
        path.append((x, y))
    return path


def _base_campus(rng: np.random.Generator, n_loops: int = 3, nx: int = 4, ny: int = 3) -> np.ndarray:
    """在 nx×ny 街廓的格網上串接數個矩形迴圈，迴圈之間共用街道。"""
    route: list[tuple[int, int]] = [(0, 0)]
    for _ in range(n_loops):
        x0 = int(rng.integers(0, nx - 1))
        y0 = int(rng.integers(0, ny - 1))
        x1 = int(rng.integers(x0 + 1, nx + 1))
        y1 = int(rng.integers(y0 + 1, ny + 1))
        route += _manhattan(route[-1], (x0, y0))
        ring = [(x0, y0), (x1, y0), (x1, y1), (x0, y1), (x0, y0)]
        if rng.random() < 0.5:
            ring = ring[::-1]
        for a, b in zip(ring[:-1], ring[1:]):
            route += _manhattan(a, b)
    pts = np.array(route, dtype=float)
    keep = np.concatenate(([True], np.any(np.diff(pts, axis=0) != 0, axis=1)))
    return _chaikin(pts[keep])


def _arc_length(points: np.ndarray) -> np.ndarray:
    seg = np.hypot(np.diff(points[:, 0]), np.diff(points[:, 1]))
    return np.concatenate(([0.0], np.cumsum(seg)))


def _lateral_drift(rng: np.random.Generator, points: np.ndarray, amplitude_m: float, scale: float) -> np.ndarray:
    """沿法向加上緩慢變化的側向偏移，讓每一圈不完全重合。"""
    tangent = np.gradient(points, axis=0)
    norm = np.hypot(tangent[:, 0], tangent[:, 1])
    norm[norm == 0] = 1.0
    normal = np.column_stack([-tangent[:, 1], tangent[:, 0]]) / norm[:, None]
    u = np.linspace(0.0, 1.0, len(points))
    phase = rng.uniform(0.0, 2.0 * np.pi)
    offset = (amplitude_m / scale) * np.sin(2.0 * np.pi * u + phase)
    return points + normal * offset[:, None]


def _resample(points: np.ndarray, length: int) -> np.ndarray:
    """依弧長等距重取樣成 length 個位姿，步長 STEP_LENGTH，航向取切線方向。"""
    s = _arc_length(points)
    total = STEP_LENGTH * (length - 1)
    pts = points * (total / s[-1])
    s = s * (total / s[-1])
    target = np.linspace(0.0, total, length)
    x = np.interp(target, s, pts[:, 0])
    y = np.interp(target, s, pts[:, 1])
    heading = np.arctan2(np.gradient(y), np.gradient(x))
    return np.column_stack([x - x[0], y - y[0], heading])


def _aliasing_clusters(
    rng: np.random.Generator, gt: np.ndarray, n_clusters: int, radius: float
) -> tuple[frozenset[int], ...]:
    """每個群集由 2–3 段相隔遙遠（> 2·radius）的連續索引組成。"""
    n = len(gt)
    used = np.zeros(n, dtype=bool)
    clusters = []
    attempts = 0
    while len(clusters) < n_clusters and attempts < 50 * max(n_clusters, 1):
        attempts += 1
        size = int(rng.integers(2, 4))
        anchors: list[int] = []
        for _ in range(20):
            if len(anchors) == size:
                break
            a = int(rng.integers(0, max(n - _CLUSTER_SEGMENT, 1)))
            seg = slice(a, min(a + _CLUSTER_SEGMENT, n))
            if used[seg].any():
                continue
            far = all(
                math.hypot(*(gt[a, :2] - gt[b, :2])) > 2.0 * radius for b in anchors
            )
            if far:
                anchors.append(a)
        if len(anchors) < 2:
            continue
        members: set[int] = set()
        for a in anchors:
            seg = slice(a, min(a + _CLUSTER_SEGMENT, n))
            used[seg] = True
            members.update(range(seg.start, seg.stop))
        clusters.append(frozenset(members))
    return tuple(clusters)


def generate_course(
    kind: str,
    length: int,
    seed: int,
    *,
    revisit_radius: float = DEFAULT_REVISIT_RADIUS,
    min_travel: float = DEFAULT_MIN_TRAVEL,
    n_clusters: int = 8,
    score_model: ScoreModel | None = None,
) -> WorldModel:
    """產生可重現的真值路線；步長約 0.25 m，路線會回到先前走過的位置。"""
    if kind not in COURSE_KINDS:
        raise ValueError(f"Unsupported course kind: {kind}. Supported: {', '.join(COURSE_KINDS)}")
    if length < 10:
        raise ValueError(f"course length must be at least 10, got {length}")

    rng = np.random.default_rng([seed, _STREAM_COURSE])
    n_dense = max(4 * length, 2000)
    if kind == "loop":
        base = _base_loop(rng, n_dense)
    elif kind == "figure_eight":
        base = _base_figure_eight(rng, n_dense)
    else:
        base = _base_campus(rng)

    if kind != "campus_multi_loop":
        scale = STEP_LENGTH * (length - 1) / _arc_length(base)[-1]
        base = _lateral_drift(rng, base, rng.uniform(0.5, 2.0), scale)
    gt = _resample(base, length)

    cluster_rng = np.random.default_rng([seed, _STREAM_CLUSTERS])
    clusters = _aliasing_clusters(cluster_rng, gt, n_clusters, revisit_radius)
    return WorldModel(
        ground_truth=gt,
        aliasing_clusters=clusters,
        revisit_radius=revisit_radius,
        rng_seed=seed,
        min_travel=min_travel,
        kind=kind,
        score_model=score_model or ScoreModel(),
    )


# ── 里程計 ─────────────────────────────────────────────────────────────────────


def sample_odometry_array(world: WorldModel, noise: tuple[float, float], seed: int) -> np.ndarray:
    sigma_xy, sigma_theta = noise
    if sigma_xy < 0 or sigma_theta < 0:
        raise ValueError("odometry noise sigmas must be non-negative")
    gt = world.ground_truth
    rel = relative_arrays(gt[:-1], gt[1:])
    rng = np.random.default_rng([seed, _STREAM_ODOMETRY])
    perturb = rng.standard_normal((len(rel), 3)) * np.array([sigma_xy, sigma_xy, sigma_theta])
    return compose_arrays(rel, perturb)


def sample_odometry(world: WorldModel, noise: tuple[float, float], seed: int) -> list[Pose2]:
    """u_{t+1} = relative(gt_t, gt_{t+1}) ⊕ 高斯擾動。"""
    return to_poses(sample_odometry_array(world, noise, seed))


# ── 真值 ───────────────────────────────────────────────────────────────────────


def _true_mask(world: WorldModel, query: int) -> np.ndarray:
    gt = world.ground_truth
    d = np.hypot(gt[:query, 0] - gt[query, 0], gt[:query, 1] - gt[query, 1])
    far_enough = (world.travel[query] - world.travel[:query]) >= world.min_travel
    return (d < world.revisit_radius) & far_enough


def ground_truth_range(world: WorldModel, query: int) -> list[tuple[int, int]]:
    """query 之前、距離 < revisit_radius 且行駛距離 ≥ min_travel 的所有極大連續區間。

    回傳閉區間 (j_begin, j_end) 的清單；空清單代表該位置沒有回環。
    """
    if query in world._ranges:
        return world._ranges[query]
    if not 0 <= query < len(world):
        raise IndexError(f"query {query} out of range for {len(world)} locations")
    mask = _true_mask(world, query)
    ranges: list[tuple[int, int]] = []
    if mask.any():
        padded = np.concatenate(([False], mask, [False])).astype(np.int8)
        edges = np.flatnonzero(np.diff(padded))
        ranges = [(int(b), int(e) - 1) for b, e in zip(edges[0::2], edges[1::2])]
    world._ranges[query] = ranges
    return ranges


def is_pair_correct(world: WorldModel, i: int, j: int) -> bool:
    """(i, j) 且 j < i；j 落在 i 的任一真值區間內即為正確。"""
    if j > i:
        i, j = j, i
    return any(b <= j <= e for b, e in ground_truth_range(world, i))


def eligible_queries(world: WorldModel) -> np.ndarray:
    """具有非空真值區間的查詢位置。"""
    return np.array([q for q in range(len(world)) if ground_truth_range(world, q)], dtype=np.int64)


# ── 檢索 ───────────────────────────────────────────────────────────────────────


def retrieve(
    world: WorldModel, query: int, n_candidates: int, *, min_gap: float = 0.0
) -> list[RetrievalCandidate]:
    """模擬影像檢索，依分數遞減回傳前 n_candidates 個過去位置。

    候選池為 0..query−2 中行駛距離 ≥ min_gap 的位置；min_gap=0 時大小為 query−1。
    真回訪（真值距離 < revisit_radius）取高分族群，與 query 或其真回訪同群集的位置取中分，
    其餘取低分；三個族群重疊，所以排序會出錯。
    """
    if query < 1 or n_candidates <= 0:
        return []
    gt = world.ground_truth
    pool = np.flatnonzero(world.travel[query] - world.travel[: query - 1] >= min_gap)
    if len(pool) == 0:
        return []

    d = np.hypot(gt[pool, 0] - gt[query, 0], gt[pool, 1] - gt[query, 1])
    true = d < world.revisit_radius
    cid = world.cluster_of
    groups = {int(cid[query])} | {int(c) for c in cid[pool[true]]}
    groups.discard(-1)
    aliased = np.isin(cid[pool], list(groups)) & ~true if groups else np.zeros(len(pool), dtype=bool)

    sm = world.score_model
    mean = np.full(len(pool), sm.distractor_mean)
    mean[aliased] = sm.aliased_mean
    mean[true] = sm.true_mean
    rng = np.random.default_rng([world.rng_seed, _STREAM_RETRIEVE, query])
    scores = np.clip(mean + sm.sigma * rng.standard_normal(len(pool)), 0.0, 1.0)

    order = np.lexsort((pool, -scores))[:n_candidates]
    return [RetrievalCandidate(query, int(pool[k]), float(scores[k])) for k in order]


# ── 驗證 oracle 與回環量測 ─────────────────────────────────────────────────────


def verify_oracle(world: WorldModel, config: OracleConfig, constraint: tuple[int, int], seed: int) -> float:
    """回傳 [0, 1] 的驗證分數，門檻由呼叫端套用。

    score = Φ(σ·(z + Φ⁻¹(p)))，z ~ N(0, 1)；因此 P(score ≥ 0.5) = p，
    p 依真值正確與否取 p_true_accept 或 p_false_accept。同一 (seed, i, j) 永遠得到同一分數。
    """
    i, j = constraint
    if i == j:
        raise ValueError(f"constraint endpoints must differ, got ({i}, {j})")
    if j > i:
        i, j = j, i
    p = config.p_true_accept if is_pair_correct(world, i, j) else config.p_false_accept
    z = np.random.default_rng([seed, _STREAM_ORACLE, i, j]).standard_normal()
    with np.errstate(invalid="ignore"):
        return float(ndtr(config.score_noise_sigma * (z + ndtri(p))))


def loop_measurement(
    world: WorldModel, i: int, j: int, sigma: tuple[float, float], seed: int
) -> Pose2:
    """回環邊 j→i 的相對位姿量測（j < i）。

    真的近距離配對給出真值相對位姿加高斯雜訊；混淆或錯誤配對給出一個
    確定性的偽造近距離位姿（平移 < radius/2），因此錯誤假設在幾何上看似合理。
    """
    if j > i:
        i, j = j, i
    rng = np.random.default_rng([seed, _STREAM_MEASURE, i, j])
    gt_i, gt_j = world.pose(i), world.pose(j)
    sigma_xy, sigma_theta = sigma
    if math.hypot(gt_i.x - gt_j.x, gt_i.y - gt_j.y) < world.revisit_radius:
        rel = relative(gt_j, gt_i)
        n = rng.standard_normal(3)
        return Pose2(rel.x + sigma_xy * n[0], rel.y + sigma_xy * n[1], rel.theta + sigma_theta * n[2])
    r = rng.uniform(0.0, world.revisit_radius / 2.0)
    bearing, heading = rng.uniform(-math.pi, math.pi, size=2)
    return Pose2(r * math.cos(bearing), r * math.sin(bearing), heading)


def write_world(out_dir: str | Path, world: WorldModel, candidates: Sequence[RetrievalCandidate]) -> None:
    from loopclosure.g2o_io import write_candidates, write_trajectory

    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    write_trajectory(out / "ground_truth.g2o", world.ground_truth)
    write_candidates(out / "candidates.txt", candidates)

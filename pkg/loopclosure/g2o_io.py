"""g2o text format subset (VERTEX_SE2 / EDGE_SE2) and the CAND candidate list."""

from __future__ import annotations

from collections.abc import Iterable, Sequence
from pathlib import Path

import numpy as np

from loopclosure.geometry import Pose2, as_pose_array
from loopclosure.pose_graph import Edge, PoseGraph

_UPPER = [(0, 0), (0, 1), (0, 2), (1, 1), (1, 2), (2, 2)]


def _num(v: float) -> str:
    return f"{float(v):.17g}"


def format_vertex(index: int, pose: np.ndarray | Pose2) -> str:
    p = pose.as_array() if isinstance(pose, Pose2) else np.asarray(pose, dtype=float)
    return f"VERTEX_SE2 {index} {_num(p[0])} {_num(p[1])} {_num(p[2])}"


def format_edge(src: int, dst: int, measurement: np.ndarray | Pose2, information: np.ndarray) -> str:
    z = measurement.as_array() if isinstance(measurement, Pose2) else np.asarray(measurement, dtype=float)
    info = np.asarray(information, dtype=float)
    upper = " ".join(_num(info[r, c]) for r, c in _UPPER)
    return f"EDGE_SE2 {src} {dst} {_num(z[0])} {_num(z[1])} {_num(z[2])} {upper}"


def write_g2o(
    path: str | Path,
    poses: Sequence[Pose2] | np.ndarray,
    edges: Iterable[tuple[int, int, np.ndarray, np.ndarray]] = (),
) -> None:
    """寫出頂點與邊；邊為 (from, to, measurement, information)。"""
    lines = [format_vertex(i, p) for i, p in enumerate(as_pose_array(poses))]
    lines += [format_edge(s, d, z, info) for s, d, z, info in edges]
    Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8", newline="\n")


def write_graph(path: str | Path, graph: PoseGraph) -> None:
    src, dst, meas, info = graph.stacked()
    write_g2o(path, graph.poses, zip(src.tolist(), dst.tolist(), meas, info))


def write_trajectory(path: str | Path, poses: Sequence[Pose2] | np.ndarray) -> None:
    write_g2o(path, poses)


def read_g2o(path: str | Path) -> tuple[np.ndarray, list[Edge]]:
    """讀取頂點（依 id 排序）與邊；未知記錄類型略過。"""
    vertices: dict[int, list[float]] = {}
    edges: list[Edge] = []
    for lineno, line in enumerate(Path(path).read_text(encoding="utf-8").splitlines(), start=1):
        parts = line.split()
        if not parts:
            continue
        tag = parts[0]
        try:
            if tag == "VERTEX_SE2":
                vertices[int(parts[1])] = [float(v) for v in parts[2:5]]
            elif tag == "EDGE_SE2":
                vals = [float(v) for v in parts[3:12]]
                info = np.zeros((3, 3))
                for (r, c), v in zip(_UPPER, vals[3:]):
                    info[r, c] = v
                    info[c, r] = v
                edges.append(Edge(int(parts[1]), int(parts[2]), Pose2(*vals[:3]), info))
        except (IndexError, ValueError) as e:
            raise ValueError(f"{path}:{lineno}: malformed {tag} record: {e}") from e
    poses = np.array([vertices[k] for k in sorted(vertices)], dtype=float).reshape(-1, 3)
    return poses, edges


def write_candidates(path: str | Path, candidates: Iterable) -> None:
    """每行 `CAND query match score`。"""
    lines = [f"CAND {c.query} {c.match} {_num(c.score)}" for c in candidates]
    Path(path).write_text("".join(line + "\n" for line in lines), encoding="utf-8", newline="\n")


def read_candidates(path: str | Path) -> list[tuple[int, int, float]]:
    out = []
    for line in Path(path).read_text(encoding="utf-8").splitlines():
        parts = line.split()
        if parts and parts[0] == "CAND":
            out.append((int(parts[1]), int(parts[2]), float(parts[3])))
    return out

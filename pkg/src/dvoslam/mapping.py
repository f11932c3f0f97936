"""Keyframe pose graph with Sim(3) edges and Gauss-Newton relaxation."""

from __future__ import annotations

from collections import deque
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .geometry import SimTransform, quaternion_to_rotation, rotation_angle, rotation_to_quaternion
from .trajectory import TrajectoryFormatError, format_number, parse_trajectory_lines


class GraphError(ValueError):
    pass


@dataclass(frozen=True)
class KeyframePolicy:
    w_t: float = 1.0
    w_r: float = 1.0
    threshold: float = 0.15

    def __post_init__(self):
        if min(self.w_t, self.w_r, self.threshold) <= 0:
            raise ValueError("keyframe policy weights and threshold must be positive")


def should_create_keyframe(rel_pose, mean_inv_depth: float, policy: KeyframePolicy | None = None):
    """Return (flag, score); score mixes depth-relative distance and rotation angle."""
    policy = policy or KeyframePolicy()
    score = policy.w_t * float(np.linalg.norm(rel_pose.t)) * mean_inv_depth + policy.w_r * rotation_angle(rel_pose.R)
    return score > policy.threshold, score


@dataclass(frozen=True)
class Edge:
    a: int
    b: int
    measurement: SimTransform  # pose_b = pose_a @ measurement
    weight: float = 1.0


@dataclass
class PoseGraph:
    poses: dict = field(default_factory=dict)
    timestamps: dict = field(default_factory=dict)
    edges: list = field(default_factory=list)

    @property
    def root(self):
        return next(iter(self.poses), None)

    def __len__(self):
        return len(self.poses)

    def __contains__(self, kf_id):
        return kf_id in self.poses

    def copy(self) -> "PoseGraph":
        return PoseGraph(dict(self.poses), dict(self.timestamps), list(self.edges))

    def neighbors(self, kf_id) -> set:
        out = set()
        for e in self.edges:
            if e.a == kf_id:
                out.add(e.b)
            elif e.b == kf_id:
                out.add(e.a)
        return out


def add_keyframe(graph: PoseGraph, kf_id, edge_to_parent: SimTransform | None = None, parent=None,
                 timestamp: float = 0.0, weight: float = 1.0) -> PoseGraph:
    """Insert a vertex. The first vertex is the root at identity.

    Later vertices need ``parent`` (default: last inserted) and the
    parent-to-child edge; their pose is ``pose_parent @ edge``.
    """
    if kf_id in graph.poses:
        raise GraphError(f"keyframe {kf_id} already in graph")
    if not graph.poses:
        graph.poses[kf_id] = SimTransform()
        graph.timestamps[kf_id] = float(timestamp)
        return graph
    if edge_to_parent is None:
        raise GraphError("non-root keyframe needs an edge to its parent")
    if parent is None:
        parent = next(reversed(graph.poses))
    if parent not in graph.poses:
        raise GraphError(f"parent {parent} not in graph")
    graph.poses[kf_id] = graph.poses[parent] @ edge_to_parent
    graph.timestamps[kf_id] = float(timestamp)
    graph.edges.append(Edge(parent, kf_id, edge_to_parent, float(weight)))
    return graph


def add_constraint(graph: PoseGraph, id_a, id_b, measured: SimTransform, weight: float = 1.0) -> PoseGraph:
    if id_a == id_b:
        raise GraphError("self-loop constraint")
    for k in (id_a, id_b):
        if k not in graph.poses:
            raise GraphError(f"keyframe {k} not in graph")
    if not weight > 0:
        raise GraphError("constraint weight must be positive")
    graph.edges.append(Edge(id_a, id_b, measured, float(weight)))
    return graph


def find_constraint_candidates(graph: PoseGraph, kf_id, radius: float, k_max: int = 3) -> list:
    """Nearest non-adjacent keyframes within ``radius`` times the keyframe's scale."""
    if not graph.poses:
        raise GraphError("graph is empty")
    if kf_id not in graph.poses:
        raise GraphError(f"keyframe {kf_id} not in graph")
    ref = graph.poses[kf_id]
    limit = radius * ref.s
    skip = graph.neighbors(kf_id) | {kf_id}
    found = []
    for other, pose in graph.poses.items():
        if other in skip:
            continue
        dist = float(np.linalg.norm(pose.t - ref.t))
        if dist < limit:
            found.append((dist, other))
    found.sort(key=lambda x: x[0])
    return [k for _, k in found[:k_max]]


def edge_error(graph: PoseGraph, edge: Edge, poses=None) -> np.ndarray:
    poses = poses or graph.poses
    return (edge.measurement.inverse() @ poses[edge.a].inverse() @ poses[edge.b]).log()


def graph_residual(graph: PoseGraph, poses=None) -> float:
    return float(sum(e.weight * np.sum(edge_error(graph, e, poses) ** 2) for e in graph.edges))


def _check_connected(graph: PoseGraph) -> None:
    root = graph.root
    seen = {root}
    adj: dict = {k: [] for k in graph.poses}
    for e in graph.edges:
        adj[e.a].append(e.b)
        adj[e.b].append(e.a)
    todo = deque([root])
    while todo:
        for nb in adj[todo.popleft()]:
            if nb not in seen:
                seen.add(nb)
                todo.append(nb)
    if len(seen) != len(graph.poses):
        missing = sorted(set(graph.poses) - seen, key=str)
        raise GraphError(f"graph is disconnected; unreachable: {missing}")


def relax_graph(graph: PoseGraph, iterations: int = 10, eps: float = 1e-6, tol: float = 1e-14,
                max_halvings: int = 20):
    """Gauss-Newton over vertex poses (right increments), root fixed.

    Returns ``(graph, history)`` where history lists the residual before the
    first step and after every accepted step.
    """
    if not graph.poses:
        return graph, []
    _check_connected(graph)
    ids = list(graph.poses)
    index = {k: i - 1 for i, k in enumerate(ids)}  # root -> -1
    n = len(ids) - 1
    cost = graph_residual(graph)
    history = [cost]
    if n == 0 or iterations <= 0:
        return graph, history
    poses = dict(graph.poses)
    for _ in range(iterations):
        if cost <= tol:
            break
        H = np.zeros((7 * n, 7 * n))
        g = np.zeros(7 * n)
        for e in graph.edges:
            r = edge_error(graph, e, poses)
            blocks = []
            for k in (e.a, e.b):
                i = index[k]
                if i < 0:
                    continue
                J = np.zeros((7, 7))
                for c in range(7):
                    d = np.zeros(7)
                    d[c] = eps
                    trial = dict(poses)
                    trial[k] = poses[k] @ SimTransform.exp(d)
                    rp = edge_error(graph, e, trial)
                    trial[k] = poses[k] @ SimTransform.exp(-d)
                    rm = edge_error(graph, e, trial)
                    J[:, c] = (rp - rm) / (2 * eps)
                blocks.append((i, J))
            for i, Ji in blocks:
                g[7 * i : 7 * i + 7] += e.weight * Ji.T @ r
                for j, Jj in blocks:
                    H[7 * i : 7 * i + 7, 7 * j : 7 * j + 7] += e.weight * Ji.T @ Jj
        H += 1e-12 * np.eye(7 * n)
        try:
            delta = -np.linalg.solve(H, g)
        except np.linalg.LinAlgError:
            delta = -np.linalg.lstsq(H, g, rcond=None)[0]
        step, accepted = 1.0, False
        for _ in range(max_halvings + 1):
            cand = dict(poses)
            for k, i in index.items():
                if i >= 0:
                    cand[k] = poses[k] @ SimTransform.exp(step * delta[7 * i : 7 * i + 7])
            new_cost = graph_residual(graph, cand)
            if new_cost <= cost:
                accepted = True
                break
            step *= 0.5
        if not accepted:
            break
        improvement = cost - new_cost
        poses, cost = cand, new_cost
        history.append(cost)
        if improvement <= 1e-12 * max(cost, 1e-300):
            break
    graph.poses.update(poses)
    return graph, history


# --- map file -----------------------------------------------------------------------------


@dataclass(frozen=True)
class MapRecord:
    timestamp: float
    translation: np.ndarray
    quaternion: np.ndarray
    scale: float

    def transform(self) -> SimTransform:
        return SimTransform(quaternion_to_rotation(self.quaternion), self.translation, self.scale)


def export_map(graph: PoseGraph) -> list[MapRecord]:
    out = []
    for k, pose in graph.poses.items():
        out.append(MapRecord(graph.timestamps.get(k, 0.0), pose.t.copy(), rotation_to_quaternion(pose.R), pose.s))
    return out


def format_map_record(rec: MapRecord) -> str:
    vals = [*rec.translation, *rec.quaternion, rec.scale]
    return f"{rec.timestamp:.9f} " + " ".join(format_number(v) for v in vals)


def write_map(graph_or_records, path) -> None:
    recs = export_map(graph_or_records) if isinstance(graph_or_records, PoseGraph) else graph_or_records
    Path(path).write_text("".join(format_map_record(r) + "\n" for r in recs))


def parse_map(lines, source="<map>") -> list[MapRecord]:
    out = []
    for lineno, vals in parse_trajectory_lines(lines, source, columns=9):
        if len(vals) != 9:
            raise TrajectoryFormatError(f"{source}:{lineno}: expected 9 columns, got {len(vals)}")
        q = np.array(vals[4:8])
        nq = np.linalg.norm(q)
        if abs(nq - 1.0) > 1e-6 or not vals[8] > 0:
            raise TrajectoryFormatError(f"{source}:{lineno}: bad quaternion or scale")
        out.append(MapRecord(vals[0], np.array(vals[1:4]), q / nq, vals[8]))
    return out


def read_map(path) -> list[MapRecord]:
    return parse_map(Path(path).read_text().splitlines(), str(path))

"""Trajectory records, the plain-text trajectory format, and ATE evaluation."""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .geometry import RigidPose, quaternion_to_rotation, rotation_to_quaternion
from .registration import procrustes_align


class TrajectoryFormatError(ValueError):
    pass


class InsufficientDataError(ValueError):
    pass


@dataclass(frozen=True)
class TrajectoryRecord:
    timestamp: float
    translation: np.ndarray
    quaternion: np.ndarray  # (qx, qy, qz, qw)

    def __post_init__(self):
        object.__setattr__(self, "translation", np.asarray(self.translation, dtype=float).reshape(3))
        q = np.asarray(self.quaternion, dtype=float).reshape(4)
        if abs(np.linalg.norm(q) - 1.0) > 1e-9:
            raise TrajectoryFormatError(f"quaternion norm {np.linalg.norm(q)!r} is not 1")
        object.__setattr__(self, "quaternion", q)
        object.__setattr__(self, "timestamp", float(self.timestamp))

    @classmethod
    def from_pose(cls, timestamp: float, pose) -> "TrajectoryRecord":
        return cls(timestamp, pose.t, rotation_to_quaternion(pose.R))

    def pose(self) -> RigidPose:
        return RigidPose(quaternion_to_rotation(self.quaternion), self.translation)


def format_number(x: float) -> str:
    s = f"{x:.12g}"
    return "0" if s == "-0" else s


def format_record(rec: TrajectoryRecord) -> str:
    vals = [*rec.translation, *rec.quaternion]
    return f"{rec.timestamp:.9f} " + " ".join(format_number(v) for v in vals)


def write_trajectory(records, path) -> None:
    text = "".join(format_record(r) + "\n" for r in records)
    Path(path).write_text(text)


def parse_trajectory_lines(lines, source="<trajectory>", columns: int = 8):
    """Yield numeric rows; blank and '#' lines are skipped."""
    for lineno, raw in enumerate(lines, 1):
        line = raw.strip()
        if not line or line.startswith("#"):
            continue
        parts = line.split()
        if len(parts) < columns:
            raise TrajectoryFormatError(f"{source}:{lineno}: expected {columns} columns, got {len(parts)}")
        try:
            yield lineno, [float(p) for p in parts]
        except ValueError as exc:
            raise TrajectoryFormatError(f"{source}:{lineno}: {exc}") from None


def read_trajectory(path) -> list[TrajectoryRecord]:
    out = []
    for lineno, vals in parse_trajectory_lines(Path(path).read_text().splitlines(), str(path)):
        if len(vals) != 8:
            raise TrajectoryFormatError(f"{path}:{lineno}: expected 8 columns, got {len(vals)}")
        q = np.array(vals[4:8])
        n = np.linalg.norm(q)
        if not np.isfinite(n) or abs(n - 1.0) > 1e-6:
            raise TrajectoryFormatError(f"{path}:{lineno}: quaternion is not unit length")
        out.append(TrajectoryRecord(vals[0], vals[1:4], q / n))
    return out


@dataclass
class ATEResult:
    rmse: float
    errors: np.ndarray
    alignment: object


def evaluate_ate(estimated, ground_truth, with_scale: bool = False, tolerance: float = 1e-6) -> ATEResult:
    """Absolute trajectory error after aligning ``estimated`` onto ``ground_truth``."""
    gt = {round(r.timestamp / tolerance): r for r in ground_truth}
    pairs = [(r, gt[round(r.timestamp / tolerance)]) for r in estimated if round(r.timestamp / tolerance) in gt]
    if len(pairs) < 3:
        raise InsufficientDataError(f"only {len(pairs)} matched records, need 3")
    E = np.array([p[0].translation for p in pairs])
    G = np.array([p[1].translation for p in pairs])
    res = procrustes_align(E, G, with_scale=with_scale, allow_degenerate=True)
    aligned = res.transform.apply(E)
    errors = np.linalg.norm(aligned - G, axis=1)
    return ATEResult(float(np.sqrt(np.mean(errors**2))), errors, res.transform)


def trajectory_length(records) -> float:
    t = np.array([r.translation for r in records])
    if len(t) < 2:
        return 0.0
    return float(np.sum(np.linalg.norm(np.diff(t, axis=0), axis=1)))

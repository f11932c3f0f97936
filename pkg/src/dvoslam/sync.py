"""Virtual-camera synchronization from tracker poses.

Mirrors the render-loop update: the tracker rotation is converted to the
renderer's convention, and tracker translation drives a thresholded,
scaled walk of the virtual head camera.
"""

from __future__ import annotations

import math
import threading
from dataclasses import dataclass, field, replace

import numpy as np

from .geometry import convert_rotation_convention

DEG = 0.0174532925  # degrees to radians, truncated as in the original renderer code


@dataclass(frozen=True)
class SyncConfig:
    threshold: float = 0.0
    scale_factor: float = 1.0
    use_translation: bool = True
    use_rotation: bool = True
    strict_paper_sync: bool = True

    def __post_init__(self):
        if self.threshold < 0:
            raise ValueError("threshold must be >= 0")
        if not self.scale_factor > 0:
            raise ValueError("scale_factor must be > 0")


@dataclass(frozen=True)
class VirtualCameraState:
    position: tuple = (0.0, 0.0, 0.0)
    rotation: np.ndarray = field(default_factory=lambda: np.eye(3))
    reference: tuple | None = None
    move_direction_deg: float = 0.0
    initialized: bool = False


def sync_rotation(state: VirtualCameraState, tracker_rotation) -> VirtualCameraState:
    """New state holding the converted rotation; raises on a non-rotation."""
    R = convert_rotation_convention(tracker_rotation)
    R.setflags(write=False)
    return replace(state, rotation=R)


def sync_position(state: VirtualCameraState, tracker_pos, cfg: SyncConfig) -> VirtualCameraState:
    """One position update; returns the new state.

    With ``strict_paper_sync`` the strafe branches start from the position
    read at the top of the call, so they overwrite a forward/backward x
    update and only touch z when it was not already changed.
    """
    x, y, z = (float(v) for v in tracker_pos)
    if not state.initialized:
        # first call only stores the origin reference
        return replace(state, reference=(x, y, z), initialized=True)
    rx, ry, rz = state.reference
    th, k = cfg.threshold, cfg.scale_factor
    cx, cy, cz = state.position
    nx, ny, nz = cx, cy, cz
    md = state.move_direction_deg * DEG
    x_changed = y_changed = z_changed = False

    if z > rz + th:  # forward
        d = z - rz
        nx = cx + math.sin(md) * (d * k)
        nz = cz + math.cos(md) * (d * k)
        x_changed = z_changed = True
    elif z < rz - th:  # backward
        d = rz - z
        nx = cx - math.sin(md) * (d * k)
        nz = cz - math.cos(md) * (d * k)
        x_changed = z_changed = True

    bx, bz = (cx, cz) if cfg.strict_paper_sync else (nx, nz)
    if x > rx + th:  # strafe right
        d = x - rx
        sx = bx + math.cos(md) * (d * k)
        sz = bz + math.sin(md) * (d * k)
        nx = sx
        if not z_changed or not cfg.strict_paper_sync:
            nz = sz
        x_changed = z_changed = True
    elif x < rx - th:  # strafe left
        d = rx - x
        sx = bx - math.cos(md) * (d * k)
        sz = bz - math.sin(md) * (d * k)
        nx = sx
        if not z_changed or not cfg.strict_paper_sync:
            nz = sz
        x_changed = z_changed = True

    if y > ry + th:  # down
        ny = cy - (y - ry) * k
        y_changed = True
    elif y < ry - th:  # up
        ny = cy + (ry - y) * k
        y_changed = True

    if not (x_changed or y_changed or z_changed):
        return state
    ref = (x if x_changed else rx, y if y_changed else ry, z if z_changed else rz)
    return replace(state, position=(nx, ny, nz), reference=ref)


class SyncCell:
    """Shared virtual-camera state: one writer at a time, readers get whole snapshots."""

    def __init__(self, state: VirtualCameraState | None = None):
        self._state = state or VirtualCameraState()
        self._lock = threading.Lock()

    def read(self) -> VirtualCameraState:
        with self._lock:
            return self._state

    def update_rotation(self, tracker_rotation) -> VirtualCameraState:
        with self._lock:
            self._state = sync_rotation(self._state, tracker_rotation)
            return self._state

    def update_position(self, tracker_pos, cfg: SyncConfig) -> VirtualCameraState:
        with self._lock:
            self._state = sync_position(self._state, tracker_pos, cfg)
            return self._state

    def set_move_direction(self, degrees: float) -> None:
        with self._lock:
            self._state = replace(self._state, move_direction_deg=float(degrees))


def replay(records, cfg: SyncConfig, move_direction=None):
    """Drive a fresh state through tracker records; returns one state per record.

    ``move_direction`` gives degrees per record (default 0).
    """
    state = VirtualCameraState()
    out = []
    for i, rec in enumerate(records):
        if move_direction is not None:
            state = replace(state, move_direction_deg=float(move_direction[i]))
        pose = rec.pose()
        if cfg.use_rotation:
            state = sync_rotation(state, pose.R)
        if cfg.use_translation:
            state = sync_position(state, pose.t, cfg)
        out.append(state)
    return out

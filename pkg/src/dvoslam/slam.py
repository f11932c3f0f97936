"""The monocular SLAM loop: track, refine depth, spawn keyframes, optimize the map."""

from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np

from .camera import CameraConfig, Image, PinholeIntrinsics, build_undistort_map, extract_roi, resize_frame
from .config import SlamConfig
from .depth import DepthParams, init_hypotheses, normalize_scale, propagate, update_keyframe_depth
from .geometry import RigidPose, SimTransform
from .mapping import (KeyframePolicy, PoseGraph, add_constraint, add_keyframe, find_constraint_candidates,
                      relax_graph, should_create_keyframe)
from .odometry import (AlignmentFailedError, Keyframe, TrackingLostError, TrackingParams, align_sim3,
                       build_pyramid, track_se3)
from .stream import EndOfStream, FrameQueue
from .trajectory import TrajectoryRecord

log = logging.getLogger(__name__)


class Preprocessor:
    """Undistortion, ROI extraction and resizing with a cached lookup table."""

    def __init__(self, camera: CameraConfig | PinholeIntrinsics, cfg: SlamConfig | None = None):
        cfg = cfg or SlamConfig()
        if isinstance(camera, PinholeIntrinsics):
            camera = CameraConfig("pinhole", camera)
        self.camera = camera
        intr = camera.intrinsics
        self.map = None
        if cfg.use_undistortion:
            if camera.model == "omni":
                self.map = build_undistort_map(camera.omni, output=intr)
            elif np.any(camera.distortion.as_array() != 0):
                self.map = build_undistort_map(intr, camera.distortion)
        self.roi = camera.roi
        if self.roi is not None:
            w, h = self.roi.w, self.roi.h
            intr = intr.cropped_resized(self.roi, w, h)
        if cfg.output_width > 0:
            w, h = cfg.output_width, cfg.output_height
            intr = PinholeIntrinsics(intr.fx * w / intr.width, intr.fy * h / intr.height,
                                     (intr.cx + 0.5) * w / intr.width - 0.5,
                                     (intr.cy + 0.5) * h / intr.height - 0.5, w, h)
        self.intrinsics = intr

    def __call__(self, image: Image) -> np.ndarray:
        cam = self.camera.intrinsics
        if (image.width, image.height) != (cam.width, cam.height):
            raise ValueError(f"frame is {image.width}x{image.height}, camera expects {cam.width}x{cam.height}")
        if self.map is not None:
            image = self.map.apply(image)
        if self.roi is not None:
            image = extract_roi(image, self.roi)
        if (image.width, image.height) != (self.intrinsics.width, self.intrinsics.height):
            image = resize_frame(image, self.intrinsics.width, self.intrinsics.height)
        return image.gray()


@dataclass
class SlamResult:
    graph: PoseGraph
    trajectory: list
    keyframes: dict = field(default_factory=dict)
    lost: list = field(default_factory=list)
    constraints: int = 0
    frames: int = 0


def _params(cfg: SlamConfig):
    track = TrackingParams(huber_delta=cfg.huber_delta, max_iterations=cfg.max_iterations)
    depth = DepthParams(var_init=cfg.var_init, var_max=cfg.var_max, rho_prop=cfg.rho_prop)
    policy = KeyframePolicy(cfg.kf_w_t, cfg.kf_w_r, cfg.kf_threshold)
    return track, depth, policy


def _frame_world(kf_pose: SimTransform, rel: RigidPose) -> RigidPose:
    """Rigid camera-to-world pose of a frame tracked relative to a keyframe."""
    return (kf_pose @ rel).rigid()


def _timestamp(item):
    ts, img = item
    return float(ts), img


class SlamSystem:
    """Stateful single-consumer SLAM loop; feed frames with :meth:`process`."""

    def __init__(self, camera, cfg: SlamConfig | None = None):
        self.cfg = cfg or SlamConfig()
        self.pre = Preprocessor(camera, self.cfg)
        self.K = self.pre.intrinsics
        self.track_params, self.depth_params, self.policy = _params(self.cfg)
        self.graph = PoseGraph()
        self.keyframes: dict[int, Keyframe] = {}
        self.kf: Keyframe | None = None
        self.rel = RigidPose()
        self.trajectory: list[TrajectoryRecord] = []
        self.lost: list[float] = []
        self.lost_run = 0
        self.constraints = 0
        self.frames = 0

    def _new_keyframe_id(self) -> int:
        return len(self.keyframes)

    def process(self, timestamp: float, image: Image) -> TrajectoryRecord | None:
        cfg = self.cfg
        gray = self.pre(image)
        self.frames += 1
        if self.kf is None:
            kf = Keyframe.create(0, gray, self.K, cfg.pyramid_levels, cfg.g_min, SimTransform(), timestamp)
            init_hypotheses(kf, cfg.seed, self.depth_params)
            self.keyframes[0] = kf
            self.kf = kf
            add_keyframe(self.graph, 0, timestamp=timestamp)
            return self._record(timestamp, RigidPose())

        pyr = build_pyramid(gray, cfg.pyramid_levels, self.K)
        tr = self._track(pyr)
        if tr is None:
            self.lost.append(timestamp)
            self.lost_run += 1
            if self.lost_run > cfg.max_lost_frames:
                raise TrackingLostError(f"tracking lost for {self.lost_run} consecutive frames at t={timestamp:.6f}")
            return None
        self.lost_run = 0
        self.rel = tr.pose
        flag, _ = should_create_keyframe(tr.pose, self.kf.mean_idepth(), self.policy)
        if flag:
            self._spawn_keyframe(gray, tr, timestamp)
            return self._record(timestamp, self.kf.pose.rigid())
        update_keyframe_depth(self.kf, pyr, tr.pose, self.depth_params)
        if len(self.graph) == 1:
            self._fix_root_scale()
        return self._record(timestamp, _frame_world(self.kf.pose, tr.pose))

    def _fix_root_scale(self) -> None:
        # bootstrap gauge: the root keyframe keeps mean inverse depth 1 and
        # identity pose, so everything tracked against it is rescaled
        kf = self.kf
        if not kf.valid.any():
            return
        _, m = normalize_scale(kf)
        kf.pose = SimTransform()
        self.rel = RigidPose(self.rel.R, self.rel.t * m)
        self.trajectory = [TrajectoryRecord(r.timestamp, r.translation * m, r.quaternion) for r in self.trajectory]

    def _track(self, pyr):
        for init in (self.rel, RigidPose()):
            try:
                tr = track_se3(self.kf, pyr, init, self.track_params)
            except TrackingLostError as exc:
                log.debug("tracking failed: %s", exc)
                continue
            if tr.inlier_fraction >= self.cfg.min_inlier_fraction and np.all(np.isfinite(tr.pose.t)):
                return tr
        return None

    def _spawn_keyframe(self, gray, tr, timestamp):
        cfg = self.cfg
        old = self.kf
        new_id = self._new_keyframe_id()
        new = propagate(old, gray, tr.pose.inverse(), new_id, self.depth_params, seed=cfg.seed + new_id,
                        levels=cfg.pyramid_levels, g_min=cfg.g_min, timestamp=timestamp)
        normalize_scale(new)
        edge = old.pose.inverse() @ new.pose
        n = max(1, int(old.valid.sum()))
        add_keyframe(self.graph, new_id, edge, parent=old.id, timestamp=timestamp, weight=tr.inlier_fraction * n)
        self.keyframes[new_id] = new
        self.kf = new
        self.rel = RigidPose()
        self._add_constraints(new)
        if self.constraints:
            relax_graph(self.graph, cfg.relax_iterations)
            for k, kf in self.keyframes.items():
                kf.pose = self.graph.poses[k]

    def _add_constraints(self, new: Keyframe) -> None:
        cfg = self.cfg
        for cand in find_constraint_candidates(self.graph, new.id, cfg.constraint_radius, cfg.constraint_k_max):
            other = self.keyframes[cand]
            init = self.graph.poses[cand].inverse() @ self.graph.poses[new.id]
            try:
                fwd = align_sim3(other, new, init, self.track_params)
                rev = align_sim3(new, other, fwd.transform.inverse(), self.track_params)
            except AlignmentFailedError as exc:
                log.debug("constraint %s-%s rejected: %s", cand, new.id, exc)
                continue
            mismatch = np.linalg.norm((rev.transform @ fwd.transform).log())
            if not (fwd.converged and mismatch < cfg.reciprocal_threshold):
                continue
            add_constraint(self.graph, cand, new.id, fwd.transform, fwd.inlier_fraction * fwd.n_pixels)
            self.constraints += 1

    def _record(self, timestamp, pose: RigidPose) -> TrajectoryRecord:
        rec = TrajectoryRecord.from_pose(timestamp, pose)
        self.trajectory.append(rec)
        return rec

    def result(self) -> SlamResult:
        return SlamResult(self.graph, self.trajectory, self.keyframes, self.lost, self.constraints, self.frames)


def run_slam(frames, camera, cfg: SlamConfig | None = None) -> SlamResult:
    """Consume ``(timestamp, Image)`` items until end of stream.

    ``frames`` may be a :class:`FrameQueue` (blocking pops) or any iterable.
    """
    system = SlamSystem(camera, cfg)
    if isinstance(frames, FrameQueue):
        while True:
            try:
                item = frames.pop()
            except EndOfStream:
                break
            system.process(*_timestamp(item))
    else:
        for item in frames:
            system.process(*_timestamp(item))
    return system.result()

"""Command line entry point: ``dvoslam <subcommand> ...``."""

from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path

import numpy as np

from .camera import CameraConfig, PinholeIntrinsics, as_float, load_camera_config, load_image, write_camera_config
from .config import SlamConfig, load_config, parse_config
from .geometry import rotation_to_quaternion
from .registration import METRICS
from .trajectory import (TrajectoryRecord, evaluate_ate, format_number, format_record, parse_trajectory_lines, read_trajectory,
                         trajectory_length, write_trajectory)

IMAGE_SUFFIXES = {".pgm", ".ppm", ".pnm", ".png"}


def _cmd_register(args) -> int:
    from .registration import register_rigid_multires, sim3_to_rigid2d

    moving = as_float(load_image(args.moving).gray())
    fixed = as_float(load_image(args.fixed).gray())
    res = register_rigid_multires(moving, fixed, metric=args.metric, levels=args.levels,
                                  max_translation=args.max_translation, max_rotation=args.max_rotation,
                                  bins=args.bins)
    tx, ty, ang = sim3_to_rigid2d(res.transform, fixed.shape)
    if args.landscape:
        np.savetxt(args.landscape, res.landscape, delimiter=",", header="tx,ty,angle_deg,metric", comments="")
    print(f"tx={tx:.4f} ty={ty:.4f} angle_deg={ang:.4f} {args.metric}={res.metric:.6g}")
    return 0


def _cmd_render(args) -> int:
    from .synthscene import default_scene, generate_sequence, lateral_sweep, load_scene

    if args.scene:
        scene = load_scene(args.scene)
    else:
        f = args.fx or 0.5 * args.width
        K = PinholeIntrinsics(f, f, (args.width - 1) / 2.0, (args.height - 1) / 2.0, args.width, args.height)
        scene = default_scene(K, seed=args.seed, depth_scale=args.depth_scale)
    traj = lateral_sweep(args.frames, args.step, 1.0 / args.fps, np.radians(args.yaw))
    out = Path(args.out_dir)
    generate_sequence(scene, traj, out, edge_supersample=args.edge_supersample)
    write_camera_config(CameraConfig("pinhole", scene.intrinsics), out / "camera.cfg")
    print(f"wrote {len(traj)} frames to {out}")
    return 0


def _cmd_track(args) -> int:
    from .odometry import Keyframe, build_pyramid, track_se3

    frames_dir = Path(args.frames_dir)
    cam = load_camera_config(args.camera).intrinsics
    frames = _frame_list(frames_dir)
    if len(frames) < 2:
        raise ValueError(f"need at least two frames in {frames_dir}")
    depth_path = args.depth
    if depth_path is None:
        manifest = frames_dir / "manifest.json"
        if not manifest.exists():
            raise ValueError("no --depth given and no manifest.json with depth maps")
        depth_path = frames_dir / json.loads(manifest.read_text())["depths"][0]
    depth = np.load(depth_path)
    kf = Keyframe.create(0, load_image(frames[0][1]).gray(), cam, args.levels, args.g_min)
    with np.errstate(divide="ignore"):
        kf.set_depth(np.where(depth > 0, 1.0 / depth, 0.0), 1e-4)
    # poses are frame-to-keyframe; each frame starts from the previous estimate
    records = [TrajectoryRecord(frames[0][0], np.zeros(3), np.array([0.0, 0.0, 0.0, 1.0]))]
    pose = None
    for ts, path in frames[1:]:
        res = track_se3(kf, build_pyramid(load_image(path).gray(), args.levels, cam), pose)
        pose = res.pose
        records.append(TrajectoryRecord.from_pose(ts, pose))
    if args.out:
        write_trajectory(records, args.out)
    else:
        sys.stdout.write("".join(format_record(r) + "\n" for r in records))
    return 0


def _frame_list(frames_dir: Path):
    manifest = frames_dir / "manifest.json"
    if manifest.exists():
        data = json.loads(manifest.read_text())
        return [(float(t), frames_dir / name) for t, name in zip(data["timestamps"], data["frames"])]
    files = sorted(p for p in frames_dir.iterdir() if p.suffix.lower() in IMAGE_SUFFIXES)
    return [(i / 30.0, p) for i, p in enumerate(files)]


def _cmd_slam(args) -> int:
    from .mapping import write_map
    from .slam import SlamSystem

    cfg = load_config(args.config) if args.config else SlamConfig()
    camera = load_camera_config(args.camera)
    frames = _frame_list(Path(args.frames_dir))
    if not frames:
        raise ValueError(f"no frames in {args.frames_dir}")
    system = SlamSystem(camera, cfg)
    for ts, path in frames:
        system.process(ts, load_image(path, int(round(ts * 1e6))))
    res = system.result()
    write_trajectory(res.trajectory, args.out)
    if args.map:
        write_map(res.graph, args.map)
    print(f"frames={res.frames} keyframes={len(res.keyframes)} constraints={res.constraints} lost={len(res.lost)}")
    return 0


def _cmd_eval(args) -> int:
    est = read_trajectory(args.estimated)
    gt = read_trajectory(args.ground_truth)
    res = evaluate_ate(est, gt, with_scale=args.scale)
    length = trajectory_length(gt)
    ratio = res.rmse / length if length > 0 else float("nan")
    print(f"ate_rmse={res.rmse:.6g} length={length:.6g} ratio={ratio:.6g} matched={len(res.errors)}")
    return 0


def _cmd_sync_sim(args) -> int:
    from .sync import replay

    cfg = parse_config(Path(args.sync_config).read_text(), source=args.sync_config).sync_config()
    records, directions = [], []
    for lineno, vals in parse_trajectory_lines(Path(args.trajectory).read_text().splitlines(), args.trajectory):
        if len(vals) not in (8, 9):
            raise ValueError(f"{args.trajectory}:{lineno}: expected 8 or 9 columns")
        q = np.array(vals[4:8])
        records.append(TrajectoryRecord(vals[0], vals[1:4], q / np.linalg.norm(q)))
        directions.append(vals[8] if len(vals) == 9 else 0.0)
    states = replay(records, cfg, directions)
    lines = []
    for rec, st in zip(records, states):
        q = rotation_to_quaternion(st.rotation)
        lines.append(f"{rec.timestamp:.9f} " + " ".join(format_number(v) for v in [*st.position, *q]))
    text = "".join(line + "\n" for line in lines)
    if args.out:
        Path(args.out).write_text(text)
    else:
        sys.stdout.write(text)
    return 0


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="dvoslam", description="Semi-dense monocular SLAM toolkit")
    sub = p.add_subparsers(dest="command", required=True)

    r = sub.add_parser("register", help="2-D rigid registration of two images")
    r.add_argument("moving")
    r.add_argument("fixed")
    r.add_argument("--metric", default="MI", type=str.upper, choices=list(METRICS))
    r.add_argument("--levels", type=int, default=3)
    r.add_argument("--bins", type=int, default=32)
    r.add_argument("--max-translation", type=float, default=12.0)
    r.add_argument("--max-rotation", type=float, default=6.0)
    r.add_argument("--landscape", help="write the coarse-grid metric landscape as CSV")
    r.set_defaults(func=_cmd_register)

    s = sub.add_parser("render", help="render a synthetic lateral sweep")
    s.add_argument("out_dir")
    s.add_argument("--scene", help="scene file; default: built-in textured room")
    s.add_argument("--frames", type=int, default=60)
    s.add_argument("--step", type=float, default=0.01)
    s.add_argument("--yaw", type=float, default=0.0, help="degrees per frame")
    s.add_argument("--fps", type=float, default=30.0)
    s.add_argument("--width", type=int, default=640)
    s.add_argument("--height", type=int, default=480)
    s.add_argument("--fx", type=float, default=0.0)
    s.add_argument("--depth-scale", type=float, default=0.7)
    s.add_argument("--seed", type=int, default=7)
    s.add_argument("--edge-supersample", type=int, default=8)
    s.set_defaults(func=_cmd_render)

    t = sub.add_parser("track", help="track every frame against the first one (known depth)")
    t.add_argument("frames_dir")
    t.add_argument("camera")
    t.add_argument("--depth", help=".npy depth map of the first frame; default: from manifest.json")
    t.add_argument("--out")
    t.add_argument("--levels", type=int, default=4)
    t.add_argument("--g-min", type=float, default=5.0)
    t.set_defaults(func=_cmd_track)

    m = sub.add_parser("slam", help="run SLAM over a directory of frames")
    m.add_argument("frames_dir")
    m.add_argument("camera")
    m.add_argument("--out", default="trajectory.txt")
    m.add_argument("--map")
    m.add_argument("--config")
    m.set_defaults(func=_cmd_slam)

    e = sub.add_parser("eval", help="absolute trajectory error")
    e.add_argument("estimated")
    e.add_argument("ground_truth")
    e.add_argument("--scale", action="store_true", help="similarity instead of rigid alignment")
    e.set_defaults(func=_cmd_eval)

    y = sub.add_parser("sync-sim", help="replay virtual-camera sync over a tracker trajectory")
    y.add_argument("trajectory", help="8 columns, optional 9th: move direction in degrees")
    y.add_argument("sync_config")
    y.add_argument("--out")
    y.set_defaults(func=_cmd_sync_sim)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except Exception as exc:  # one-line diagnostic, nonzero exit
        print(f"dvoslam {args.command}: error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())

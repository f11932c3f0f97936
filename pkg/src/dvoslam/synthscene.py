"""Ground-truth renderer: Phong-shaded, procedurally textured planes and spheres.

Cameras look along +z with x to the right and y down. Poses passed to the
renderer are camera-to-world.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy.ndimage import gaussian_filter, maximum_filter, minimum_filter

from .camera import Image, PinholeIntrinsics, save_image
from .geometry import RigidPose, rot_y
from .trajectory import TrajectoryRecord, write_trajectory


class SceneError(ValueError):
    pass


@dataclass(frozen=True)
class Texture:
    """Seeded multi-octave value noise evaluated on world coordinates."""

    seed: int = 0
    frequency: float = 8.0
    octaves: int = 4
    contrast: float = 0.85

    def albedo(self, points: np.ndarray) -> np.ndarray:
        rng = np.random.default_rng(self.seed)
        perm = rng.permutation(256)
        perm = np.concatenate([perm, perm]).astype(np.intp)
        lattice = rng.random(256)
        total = np.zeros(points.shape[0])
        amp, freq, norm = 1.0, self.frequency, 0.0
        for octave in range(self.octaves):
            total += amp * _value_noise(points * freq + 17.0 * octave, perm, lattice)
            norm += amp
            amp *= 0.5
            freq *= 2.0
        n = total / norm
        # stretch the mid-heavy octave sum back towards [0, 1]
        n = np.clip(0.5 + 1.8 * (n - 0.5), 0.0, 1.0)
        return (1.0 - self.contrast) + self.contrast * n


def _value_noise(p: np.ndarray, perm: np.ndarray, lattice: np.ndarray) -> np.ndarray:
    i = np.floor(p).astype(np.intp)
    f = p - i
    f = f * f * (3.0 - 2.0 * f)
    i &= 255
    out = np.zeros(p.shape[0])
    for dx in (0, 1):
        wx = f[:, 0] if dx else 1.0 - f[:, 0]
        hx = perm[i[:, 0] + dx]
        for dy in (0, 1):
            wy = f[:, 1] if dy else 1.0 - f[:, 1]
            hy = perm[hx + ((i[:, 1] + dy) & 255)]
            for dz in (0, 1):
                wz = f[:, 2] if dz else 1.0 - f[:, 2]
                h = perm[hy + ((i[:, 2] + dz) & 255)]
                out += wx * wy * wz * lattice[h]
    return out


@dataclass(frozen=True)
class Material:
    k_a: float = 0.3
    k_d: float = 0.7
    k_s: float = 0.0
    n: float = 10.0
    texture: Texture = field(default_factory=Texture)

    def __post_init__(self):
        if min(self.k_a, self.k_d, self.k_s) < 0:
            raise SceneError("reflection coefficients must be non-negative")
        if self.n < 1:
            raise SceneError("shininess exponent must be at least 1")


@dataclass(frozen=True)
class Plane:
    """Rectangle (or unbounded plane when ``half_extent`` is None)."""

    center: tuple
    normal: tuple
    material: Material = field(default_factory=Material)
    u_axis: tuple | None = None
    half_extent: tuple | None = None

    def intersect(self, origin, dirs):
        n = np.asarray(self.normal, dtype=float)
        n = n / np.linalg.norm(n)
        c = np.asarray(self.center, dtype=float)
        denom = dirs @ n
        with np.errstate(divide="ignore", invalid="ignore"):
            t = ((c - origin) @ n) / denom
        t = np.where((np.abs(denom) > 1e-12) & (t > 1e-9), t, np.inf)
        if self.half_extent is not None:
            u = np.asarray(self.u_axis if self.u_axis is not None else _any_perp(n), dtype=float)
            u = u - (u @ n) * n
            u /= np.linalg.norm(u)
            v = np.cross(n, u)
            with np.errstate(invalid="ignore"):
                p = origin + dirs * t[:, None] - c
            inside = (np.abs(p @ u) <= self.half_extent[0]) & (np.abs(p @ v) <= self.half_extent[1])
            t = np.where(inside, t, np.inf)
        return t

    def normals(self, points):
        n = np.asarray(self.normal, dtype=float)
        return np.broadcast_to(n / np.linalg.norm(n), points.shape)


@dataclass(frozen=True)
class Sphere:
    center: tuple
    radius: float
    material: Material = field(default_factory=Material)

    def intersect(self, origin, dirs):
        c = np.asarray(self.center, dtype=float)
        oc = origin - c
        a = np.sum(dirs * dirs, axis=1)
        b = 2.0 * dirs @ oc
        cc = oc @ oc - self.radius**2
        disc = b * b - 4 * a * cc
        sq = np.sqrt(np.maximum(disc, 0.0))
        t0 = (-b - sq) / (2 * a)
        t1 = (-b + sq) / (2 * a)
        t = np.where(t0 > 1e-9, t0, t1)
        return np.where((disc >= 0) & (t > 1e-9), t, np.inf)

    def normals(self, points):
        n = points - np.asarray(self.center, dtype=float)
        return n / np.linalg.norm(n, axis=1, keepdims=True)


def _any_perp(n):
    a = np.array([1.0, 0.0, 0.0]) if abs(n[0]) < 0.9 else np.array([0.0, 1.0, 0.0])
    return np.cross(n, a)


@dataclass(frozen=True)
class PointLight:
    position: tuple
    intensity: float = 1.0


@dataclass(frozen=True)
class SceneSpec:
    objects: tuple
    light: PointLight
    ambient: float
    intrinsics: PinholeIntrinsics

    def __post_init__(self):
        if not self.objects:
            raise SceneError("scene has no objects")
        if self.ambient < 0 or self.light.intensity < 0:
            raise SceneError("light intensities must be non-negative")


@dataclass
class GroundTruthFrame:
    image: Image
    depth: np.ndarray
    pose: RigidPose
    timestamp: float = 0.0


def _check_unit(v, name):
    if abs(np.linalg.norm(v) - 1.0) > 1e-6:
        raise SceneError(f"{name} must be a unit vector")


def reflect(incident, normal):
    """Mirror ``incident`` about ``normal``."""
    return incident - 2.0 * np.sum(incident * normal, axis=-1, keepdims=True) * normal


def phong_shade(N, L, V, material: Material, I_a: float, I_direct: float) -> float:
    """Ambient + diffuse + specular intensity at one surface point.

    Negative cosines are clamped to zero.
    """
    N, L, V = (np.asarray(x, dtype=float) for x in (N, L, V))
    for vec, name in ((N, "N"), (L, "L"), (V, "V")):
        _check_unit(vec, name)
    R = reflect(-L, N)
    diffuse = max(float(L @ N), 0.0)
    specular = max(float(V @ R), 0.0) ** material.n
    return material.k_a * I_a + I_direct * (material.k_d * diffuse + material.k_s * specular)


def _shade_many(N, L, V, mat: Material, I_a, I_direct):
    R = reflect(-L, N)
    diffuse = np.maximum(np.sum(L * N, axis=1), 0.0)
    specular = np.maximum(np.sum(V * R, axis=1), 0.0) ** mat.n
    return mat.k_a * I_a + I_direct * (mat.k_d * diffuse + mat.k_s * specular)


def _cast(scene: SceneSpec, pose: RigidPose, uu: np.ndarray, vv: np.ndarray):
    K = scene.intrinsics
    rays = np.stack([(uu - K.cx) / K.fx, (vv - K.cy) / K.fy, np.ones_like(uu)], axis=-1).reshape(-1, 3)
    # ray parameter along the unnormalized direction equals camera-frame depth
    dirs = rays @ pose.R.T
    origin = pose.t
    best = np.full(len(dirs), np.inf)
    which = np.full(len(dirs), -1)
    for k, obj in enumerate(scene.objects):
        t = obj.intersect(origin, dirs)
        closer = t < best
        best = np.where(closer, t, best)
        which = np.where(closer, k, which)
    intensity = np.zeros(len(dirs))
    light = np.asarray(scene.light.position, dtype=float)
    for k, obj in enumerate(scene.objects):
        sel = np.nonzero(which == k)[0]
        if sel.size == 0:
            continue
        p = origin + dirs[sel] * best[sel, None]
        N = np.array(obj.normals(p), dtype=float)
        V = origin - p
        V /= np.linalg.norm(V, axis=1, keepdims=True)
        # two-sided surfaces
        N = np.where(np.sum(N * V, axis=1, keepdims=True) < 0, -N, N)
        L = light - p
        L /= np.linalg.norm(L, axis=1, keepdims=True)
        shade = _shade_many(N, L, V, obj.material, scene.ambient, scene.light.intensity)
        intensity[sel] = 255.0 * obj.material.texture.albedo(p) * shade
    return intensity, best, which


def render_frame(scene: SceneSpec, pose: RigidPose, timestamp: float = 0.0,
                 supersample: int = 1, blur: float = 0.0, edge_supersample: int = 0) -> GroundTruthFrame:
    """Ray-cast one frame; returns the 8-bit image and the z-depth map.

    ``supersample`` > 1 box-filters intensity over an n x n grid of rays per
    pixel (anti-aliasing); depth always comes from the pixel-center ray.
    """
    K = scene.intrinsics
    if supersample < 1:
        raise SceneError("supersample must be >= 1")
    uu, vv = np.meshgrid(np.arange(K.width, dtype=float), np.arange(K.height, dtype=float))
    intensity, best, which = _cast(scene, pose, uu, vv)
    if supersample > 1:
        n = supersample
        offs = (np.arange(n) + 0.5) / n - 0.5
        acc = np.zeros_like(intensity)
        for dv in offs:
            for du in offs:
                acc += _cast(scene, pose, uu + du, vv + dv)[0]
        intensity = acc / (n * n)
    if edge_supersample > 1:
        ids = which.reshape(K.height, K.width)
        edge = (maximum_filter(ids, size=3, mode="nearest") != minimum_filter(ids, size=3, mode="nearest")).ravel()
        if edge.any():
            n = edge_supersample
            offs = (np.arange(n) + 0.5) / n - 0.5
            eu, ev = uu.ravel()[edge], vv.ravel()[edge]
            acc = np.zeros(eu.shape)
            for dv in offs:
                for du in offs:
                    acc += _cast(scene, pose, eu + du, ev + dv)[0]
            intensity[edge] = acc / (n * n)
    if blur > 0:
        intensity = gaussian_filter(intensity.reshape(K.height, K.width), blur, mode="nearest").ravel()
    q = np.floor(np.clip(intensity, 0.0, 255.0) + 0.5).astype(np.uint8)
    depth = np.where(np.isfinite(best), best, 0.0)
    return GroundTruthFrame(
        Image(q.reshape(K.height, K.width), int(round(timestamp * 1e6))),
        depth.reshape(K.height, K.width),
        pose,
        timestamp,
    )


def default_scene(intrinsics: PinholeIntrinsics, seed: int = 7, depth_scale: float = 1.0) -> SceneSpec:
    """Textured box-corner with two spheres, mean depth about 1.2 * depth_scale."""
    s = depth_scale

    def mat(k, freq):
        return Material(0.35, 0.65, 0.0, 10.0, Texture(seed + k, freq / s, 4, 0.85))

    objects = (
        Plane((0.0, 0.0, 1.6 * s), (0.0, 0.0, -1.0), mat(0, 6.0)),
        Plane((0.0, 0.55 * s, 0.0), (0.0, -1.0, 0.0), mat(1, 6.0)),
        Plane((-0.9 * s, 0.0, 0.0), (1.0, 0.0, 0.0), mat(2, 6.0)),
        Sphere((0.25 * s, 0.1 * s, 1.05 * s), 0.22 * s, mat(3, 9.0)),
        Sphere((-0.35 * s, -0.2 * s, 1.2 * s), 0.18 * s, mat(4, 9.0)),
    )
    light = PointLight((0.3 * s, -0.8 * s, 0.2 * s), 1.0)
    return SceneSpec(objects, light, 0.6, intrinsics)


def lateral_sweep(n: int, step: float, dt: float = 1.0 / 30.0, yaw_per_frame: float = 0.0,
                  start=(0.0, 0.0, 0.0)) -> list[tuple[float, RigidPose]]:
    """Camera translating along +x, optionally yawing."""
    out = []
    for i in range(n):
        t = np.asarray(start, dtype=float) + np.array([i * step, 0.0, 0.0])
        out.append((i * dt, RigidPose(rot_y(i * yaw_per_frame), t)))
    return out


def loop_trajectory(n: int, radius: float, dt: float = 1.0 / 30.0, center=(0.0, 0.0, 0.0)) -> list:
    """Camera on a horizontal circle, facing +z, ending one step short of the start."""
    out = []
    for i in range(n):
        a = 2 * np.pi * i / n
        t = np.asarray(center, dtype=float) + radius * np.array([np.sin(a), 0.0, 1.0 - np.cos(a)])
        out.append((i * dt, RigidPose(np.eye(3), t)))
    return out


def generate_sequence(scene: SceneSpec, trajectory, output_dir, **render_options) -> dict:
    """Render every pose and write frames, depth maps and the GT trajectory.

    ``render_options`` are passed on to :func:`render_frame`.
    """
    if not trajectory:
        raise SceneError("trajectory is empty")
    out = Path(output_dir)
    out.mkdir(parents=True, exist_ok=True)
    frames, depths, records = [], [], []
    for i, (ts, pose) in enumerate(trajectory):
        gt = render_frame(scene, pose, ts, **render_options)
        fpath = out / f"frame_{i:05d}.pgm"
        dpath = out / f"depth_{i:05d}.npy"
        save_image(gt.image, fpath)
        np.save(dpath, gt.depth)
        frames.append(fpath.name)
        depths.append(dpath.name)
        records.append(TrajectoryRecord.from_pose(ts, pose))
    write_trajectory(records, out / "groundtruth.txt")
    manifest = {
        "frames": frames,
        "depths": depths,
        "timestamps": [float(ts) for ts, _ in trajectory],
        "trajectory": "groundtruth.txt",
    }
    (out / "manifest.json").write_text(json.dumps(manifest, indent=1))
    return manifest


# --- scene files ----------------------------------------------------------------


def _vec(s: str):
    return tuple(float(x) for x in s.replace(",", " ").split())


def parse_scene(text: str) -> SceneSpec:
    """Parse ``[camera]``, ``[light]``, ``[plane]``, ``[sphere]`` sections of key = value lines."""
    sections: list[tuple[str, dict]] = []
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if line.startswith("[") and line.endswith("]"):
            sections.append((line[1:-1].strip().lower(), {}))
            continue
        if "=" not in line or not sections:
            raise SceneError(f"line {lineno}: expected key = value inside a section")
        k, v = line.split("=", 1)
        sections[-1][1][k.strip().lower()] = v.strip()

    try:
        return _build_scene(sections)
    except KeyError as exc:
        raise SceneError(f"missing key {exc}") from None
    except ValueError as exc:
        if isinstance(exc, SceneError):
            raise
        raise SceneError(str(exc)) from None


def _build_scene(sections) -> SceneSpec:
    intr, light, ambient, objects = None, None, 0.0, []
    for kind, kv in sections:
        if kind == "camera":
            intr = PinholeIntrinsics(float(kv["fx"]), float(kv["fy"]), float(kv["cx"]), float(kv["cy"]),
                                     int(kv["width"]), int(kv["height"]))
        elif kind == "light":
            light = PointLight(_vec(kv["position"]), float(kv.get("intensity", 1.0)))
            ambient = float(kv.get("ambient", 0.0))
        elif kind in ("plane", "sphere"):
            tex = Texture(int(kv.get("seed", 0)), float(kv.get("frequency", 8.0)),
                          int(kv.get("octaves", 4)), float(kv.get("contrast", 0.85)))
            mat = Material(float(kv.get("k_a", 0.3)), float(kv.get("k_d", 0.7)), float(kv.get("k_s", 0.0)),
                           float(kv.get("n", 10.0)), tex)
            if kind == "plane":
                he = _vec(kv["half_extent"]) if "half_extent" in kv else None
                ua = _vec(kv["u_axis"]) if "u_axis" in kv else None
                objects.append(Plane(_vec(kv["center"]), _vec(kv["normal"]), mat, ua, he))
            else:
                objects.append(Sphere(_vec(kv["center"]), float(kv["radius"]), mat))
        else:
            raise SceneError(f"unknown section [{kind}]")
    if intr is None or light is None:
        raise SceneError("scene needs [camera] and [light] sections")
    return SceneSpec(tuple(objects), light, ambient, intr)


def load_scene(path) -> SceneSpec:
    return parse_scene(Path(path).read_text())

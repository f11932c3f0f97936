"""Semi-dense direct image alignment against inverse-depth keyframes.

Pose conventions used throughout:

* ``TrackResult.pose`` and ``track_se3(init=...)`` are frame-to-keyframe,
  i.e. the camera pose of the new frame expressed in keyframe coordinates.
* :func:`photometric_residuals` takes the *warp* ``kf -> frame`` (its
  inverse), because that is what moves keyframe points into the frame.
* Increments are left-multiplied onto the warp: ``exp(delta) @ warp``.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .camera import PinholeIntrinsics, as_float, sample_bicubic_grad
from .geometry import RigidPose, SimTransform


class OdometryError(RuntimeError):
    pass


class InsufficientOverlapError(OdometryError):
    pass


class TrackingLostError(OdometryError):
    pass


class AlignmentFailedError(OdometryError):
    pass


@dataclass
class TrackingParams:
    huber_delta: float = 10.0
    max_iterations: int = 20
    step_tolerance: float = 1e-6
    # stop early once the relative error decrease of an accepted step drops below this
    relative_tolerance: float = 1e-5
    max_halvings: int = 10
    min_level: int = 0
    # down-weight pixels whose residual is dominated by inverse-depth uncertainty
    variance_weighting: bool = True
    image_sigma: float = 4.0
    # sim(3) alignment only
    photometric_sigma: float = 4.0
    depth_huber: float = 2.0


# --- pyramid -----------------------------------------------------------------


def downsample2(img: np.ndarray) -> np.ndarray:
    """2x2 block average; odd sizes are edge-padded so dims become ceil(n/2)."""
    h, w = img.shape
    img = np.pad(img, ((0, h % 2), (0, w % 2)), mode="edge")
    return 0.25 * (img[0::2, 0::2] + img[1::2, 0::2] + img[0::2, 1::2] + img[1::2, 1::2])


@dataclass
class ImagePyramid:
    images: list
    grad_x: list
    grad_y: list
    intrinsics: list | None = None

    @property
    def levels(self) -> int:
        return len(self.images)

    def shape(self, level: int):
        return self.images[level].shape


def build_pyramid(image, levels: int, intrinsics: PinholeIntrinsics | None = None) -> ImagePyramid:
    if levels < 1:
        raise ValueError("need at least one pyramid level")
    img = as_float(image)
    h, w = img.shape
    if h < 2 ** (levels - 1) or w < 2 ** (levels - 1):
        raise ValueError(f"{w}x{h} image is too small for {levels} levels")
    images = [img]
    for _ in range(levels - 1):
        images.append(downsample2(images[-1]))
    gx, gy = [], []
    for im in images:
        if min(im.shape) >= 2:
            gy_, gx_ = np.gradient(im)
        else:
            gy_, gx_ = np.zeros_like(im), np.zeros_like(im)
        gx.append(gx_)
        gy.append(gy_)
    intr = None if intrinsics is None else [intrinsics.scaled(l) for l in range(levels)]
    return ImagePyramid(images, gx, gy, intr)


def select_semidense(pyramid: ImagePyramid, g_min: float) -> np.ndarray:
    """Active-pixel mask at level 0: gradient magnitude >= g_min."""
    if g_min < 0:
        raise ValueError("gradient threshold must be non-negative")
    mag = np.hypot(pyramid.grad_x[0], pyramid.grad_y[0])
    return mag >= g_min


# --- keyframe --------------------------------------------------------------------


@dataclass
class Keyframe:
    id: int
    pyramid: ImagePyramid
    intrinsics: PinholeIntrinsics
    mask: np.ndarray
    idepth: np.ndarray
    idepth_var: np.ndarray
    valid: np.ndarray
    pose: SimTransform = field(default_factory=SimTransform)
    timestamp: float = 0.0
    obs_count: np.ndarray | None = None
    fail_count: np.ndarray | None = None

    def __post_init__(self):
        if self.obs_count is None:
            self.obs_count = np.zeros(self.mask.shape, dtype=np.int32)
        if self.fail_count is None:
            self.fail_count = np.zeros(self.mask.shape, dtype=np.int32)

    @classmethod
    def create(cls, kf_id: int, image, intrinsics: PinholeIntrinsics, levels: int = 4,
               g_min: float = 5.0, pose: SimTransform | None = None, timestamp: float = 0.0) -> "Keyframe":
        pyr = build_pyramid(image, levels, intrinsics)
        mask = select_semidense(pyr, g_min)
        shape = mask.shape
        return cls(kf_id, pyr, intrinsics, mask, np.zeros(shape), np.zeros(shape), np.zeros(shape, bool),
                   pose or SimTransform(), timestamp)

    @property
    def image(self) -> np.ndarray:
        return self.pyramid.images[0]

    def set_depth(self, idepth, variance, valid=None) -> None:
        """Install hypotheses (e.g. from ground truth) on the active pixels."""
        idepth = np.asarray(idepth, dtype=float)
        ok = self.mask & np.isfinite(idepth) & (idepth > 0)
        if valid is not None:
            ok &= valid
        self.valid = ok
        self.idepth = np.where(ok, idepth, 0.0)
        self.idepth_var = np.where(ok, np.broadcast_to(variance, idepth.shape), 0.0)

    def mean_idepth(self) -> float:
        if not self.valid.any():
            return math.nan
        return float(self.idepth[self.valid].mean())

    def level_depth(self, level: int):
        """Mean inverse depth and variance per pixel at ``level`` plus validity."""
        cnt = self.valid.astype(float)
        s_d = np.where(self.valid, self.idepth, 0.0)
        s_v = np.where(self.valid, self.idepth_var, 0.0)
        for _ in range(level):
            cnt, s_d, s_v = (_sum2(a) for a in (cnt, s_d, s_v))
        ok = cnt > 0
        with np.errstate(invalid="ignore", divide="ignore"):
            d = np.where(ok, s_d / cnt, 0.0)
            v = np.where(ok, s_v / cnt, 0.0)
        return d, v, ok

    def level_points(self, level: int):
        """Active points at ``level``: pixel coords, inverse depth, variance, intensity, 3-D point."""
        d, var, ok = self.level_depth(level)
        vs, us = np.nonzero(ok)
        K = self.pyramid.intrinsics[level]
        idep = d[vs, us]
        u = us.astype(float)
        v = vs.astype(float)
        X = np.stack([(u - K.cx) / K.fx, (v - K.cy) / K.fy, np.ones_like(u)], axis=1) / idep[:, None]
        inten = self.pyramid.images[level][vs, us]
        return LevelPoints(u, v, idep, var[vs, us], inten, X)


@dataclass
class LevelPoints:
    u: np.ndarray
    v: np.ndarray
    idepth: np.ndarray
    var: np.ndarray
    intensity: np.ndarray
    X: np.ndarray

    def __len__(self):
        return len(self.u)


def _sum2(a: np.ndarray) -> np.ndarray:
    h, w = a.shape
    a = np.pad(a, ((0, h % 2), (0, w % 2)))
    return a[0::2, 0::2] + a[1::2, 0::2] + a[0::2, 1::2] + a[1::2, 1::2]


# --- residuals -----------------------------------------------------------------------


@dataclass
class Residuals:
    r: np.ndarray
    J: np.ndarray
    valid: np.ndarray
    warped: np.ndarray
    weight: np.ndarray | None = None
    depth_jacobian: np.ndarray | None = None


def _project_with_jacobian(Y: np.ndarray, K: PinholeIntrinsics):
    z = Y[:, 2]
    ok = z > 1e-9
    zs = np.where(ok, z, 1.0)
    u = K.fx * Y[:, 0] / zs + K.cx
    v = K.fy * Y[:, 1] / zs + K.cy
    return u, v, zs, ok


def _warp_jacobian_se3(Y: np.ndarray) -> np.ndarray:
    """d(exp(delta) Y)/d delta at 0, shape (N, 3, 6)."""
    n = len(Y)
    G = np.zeros((n, 3, 6))
    G[:, 0, 0] = G[:, 1, 1] = G[:, 2, 2] = 1.0
    # -hat(Y)
    G[:, 0, 4] = Y[:, 2]
    G[:, 0, 5] = -Y[:, 1]
    G[:, 1, 3] = -Y[:, 2]
    G[:, 1, 5] = Y[:, 0]
    G[:, 2, 3] = Y[:, 1]
    G[:, 2, 4] = -Y[:, 0]
    return G


def _photometric(ref_intensity, Y, frame_img, K: PinholeIntrinsics, G):
    """Residuals I_ref - I_frame(pi(Y)) and their derivative through ``G = dY/d delta``."""
    u, v, z, front = _project_with_jacobian(Y, K)
    val, du, dv, inside = sample_bicubic_grad(frame_img, u, v)
    valid = front & inside
    r = np.where(valid, ref_intensity - val, 0.0)
    # d pi / dY rows
    inv_z = 1.0 / z
    gu = du * K.fx * inv_z
    gv = dv * K.fy * inv_z
    dz = -(gu * Y[:, 0] + gv * Y[:, 1]) * inv_z
    grad = np.stack([gu, gv, dz], axis=1)
    J = -np.einsum("ni,nij->nj", grad, G)
    J[~valid] = 0.0
    return r, J, valid, np.stack([u, v], axis=1), grad


def photometric_residuals(kf: Keyframe, frame: ImagePyramid, xi: RigidPose, level: int = 0) -> Residuals:
    """Photometric residuals of all active keyframe pixels at ``level``.

    ``xi`` maps keyframe coordinates into the frame. Jacobian columns are
    derivatives w.r.t. a left increment ``exp(delta) @ xi`` with
    ``delta = (v, w)``.
    """
    pts = kf.level_points(level)
    if len(pts) == 0:
        raise InsufficientOverlapError(f"keyframe has no depth hypotheses at level {level}")
    return _residuals_for(pts, frame, xi, level)


def _residuals_for(pts: LevelPoints, frame: ImagePyramid, xi: RigidPose, level: int) -> Residuals:
    Y = pts.X @ xi.R.T + xi.t
    G = _warp_jacobian_se3(Y)
    K = frame.intrinsics[level]
    r, J, valid, warped, grad = _photometric(pts.intensity, Y, frame.images[level], K, G)
    if not valid.any():
        raise InsufficientOverlapError("no keyframe pixel lands inside the frame")
    # dY/d(idepth) = -R X / d
    dY = -(pts.X @ xi.R.T) / pts.idepth[:, None]
    J_d = np.where(valid, -np.sum(grad * dY, axis=1), 0.0)
    return Residuals(r, J, valid, warped, None, J_d)


def _variance_weights(res: Residuals, pts: LevelPoints, params: "TrackingParams") -> np.ndarray:
    if not params.variance_weighting:
        return np.ones(len(res.r))
    s2 = params.image_sigma**2
    return s2 / (s2 + res.depth_jacobian**2 * pts.var)


def huber_weights(r: np.ndarray, delta: float) -> np.ndarray:
    a = np.abs(r)
    return np.where(a <= delta, 1.0, delta / np.maximum(a, 1e-300))


def huber_loss(r: np.ndarray, delta: float) -> np.ndarray:
    a = np.abs(r)
    return np.where(a <= delta, 0.5 * r * r, delta * (a - 0.5 * delta))


# --- SE(3) tracking ----------------------------------------------------------------------


@dataclass
class TrackResult:
    pose: RigidPose
    error: float
    inlier_fraction: float
    converged: bool
    iterations: list  # applied Gauss-Newton updates per level
    error_history: list = field(default_factory=list)
    residual_median: float = math.nan


def _mean_error(res: Residuals, delta: float) -> float:
    v = res.valid
    w = 1.0 if res.weight is None else res.weight[v]
    return float(np.mean(w * huber_loss(res.r[v], delta)))


def _solve(H: np.ndarray, g: np.ndarray) -> np.ndarray:
    # tiny relative damping keeps near-singular systems solvable
    H = H + np.eye(len(g)) * (1e-12 * np.trace(H) + 1e-300)
    try:
        return -np.linalg.solve(H, g)
    except np.linalg.LinAlgError:
        return -np.linalg.lstsq(H, g, rcond=None)[0]


def track_se3(kf: Keyframe, frame: ImagePyramid, init: RigidPose | None = None,
              params: TrackingParams | None = None) -> TrackResult:
    """Coarse-to-fine IRLS Gauss-Newton alignment of ``frame`` against ``kf``."""
    params = params or TrackingParams()
    if frame.intrinsics is None:
        raise ValueError("frame pyramid needs intrinsics")
    warp = (init or RigidPose()).inverse()
    levels = min(kf.pyramid.levels, frame.levels)
    iterations, history = [0] * levels, []
    converged_all = True
    res = None
    for level in range(levels - 1, params.min_level - 1, -1):
        pts = kf.level_points(level)
        if len(pts) == 0:
            continue
        try:
            res = _residuals_for(pts, frame, warp, level)
            res.weight = _variance_weights(res, pts, params)
        except InsufficientOverlapError as exc:
            raise TrackingLostError(f"tracking lost at level {level}: {exc}") from None
        err = _mean_error(res, params.huber_delta)
        history.append((level, err))
        level_converged = False
        for _ in range(params.max_iterations):
            v = res.valid
            w = huber_weights(res.r[v], params.huber_delta) * res.weight[v]
            Jv = res.J[v]
            H = Jv.T @ (Jv * w[:, None])
            g = Jv.T @ (w * res.r[v])
            delta = _solve(H, g)
            step = 1.0
            accepted = False
            for _ in range(params.max_halvings + 1):
                cand = RigidPose.exp(step * delta) @ warp
                try:
                    new = _residuals_for(pts, frame, cand, level)
                    new.weight = _variance_weights(new, pts, params)
                except InsufficientOverlapError:
                    step *= 0.5
                    continue
                new_err = _mean_error(new, params.huber_delta)
                if new_err <= err:
                    accepted = True
                    break
                step *= 0.5
            if not accepted:
                level_converged = True
                break
            warp, res = cand, new
            iterations[level] += 1
            decrease = (err - new_err) / max(err, 1e-300)
            err = new_err
            history.append((level, err))
            if np.linalg.norm(step * delta) < params.step_tolerance or decrease < params.relative_tolerance:
                level_converged = True
                break
        converged_all &= level_converged
    if res is None:
        raise TrackingLostError("keyframe has no depth hypotheses")
    inl = res.valid & (np.abs(res.r) <= params.huber_delta)
    med = float(np.median(np.abs(res.r[res.valid]))) if res.valid.any() else math.nan
    return TrackResult(
        warp.inverse(),
        float(err),
        float(inl.sum() / max(len(res.r), 1)),
        bool(converged_all),
        iterations,
        history,
        med,
    )


# --- Sim(3) keyframe-to-keyframe alignment -------------------------------------------------


@dataclass
class Sim3AlignResult:
    transform: SimTransform
    error: float
    initial_error: float
    inlier_fraction: float
    n_pixels: int
    converged: bool


def _warp_jacobian_sim3(Y: np.ndarray) -> np.ndarray:
    G = np.zeros((len(Y), 3, 7))
    G[:, :, :6] = _warp_jacobian_se3(Y)
    G[:, :, 6] = Y
    return G


def _nearest_lookup(arr: np.ndarray, ok: np.ndarray, u, v):
    h, w = arr.shape
    ui = np.rint(u).astype(np.intp)
    vi = np.rint(v).astype(np.intp)
    inside = (ui >= 0) & (vi >= 0) & (ui < w) & (vi < h)
    uc, vc = np.where(inside, ui, 0), np.where(inside, vi, 0)
    hit = inside & ok[vc, uc]
    return np.where(hit, arr[vc, uc], 0.0), hit


class _Sim3Direction:
    """Residual block for warping ``src`` keyframe points into ``dst``."""

    def __init__(self, src: Keyframe, dst: Keyframe, level: int):
        self.pts = src.level_points(level)
        self.dst_img = dst.pyramid.images[level]
        self.K = dst.pyramid.intrinsics[level]
        self.dst_d, self.dst_var, self.dst_ok = dst.level_depth(level)

    def evaluate(self, S: SimTransform, forward: bool):
        """Stacked residuals (photometric, normalized depth) and 7-column Jacobians.

        ``forward``: the block warps with ``S`` and the increment acts as
        ``exp(delta) @ S``. Otherwise it warps with ``S^-1`` under the same
        increment, i.e. ``S^-1 @ exp(-delta)``.
        """
        pts = self.pts
        if forward:
            Y = S.apply(pts.X)
            G = _warp_jacobian_sim3(Y)
        else:
            Sinv = S.inverse()
            Y = Sinv.apply(pts.X)
            G = -(1.0 / S.s) * np.einsum("ij,njk->nik", S.R.T, _warp_jacobian_sim3(pts.X))
        r_i, J_i, ok_i, uv, _ = _photometric(pts.intensity, Y, self.dst_img, self.K, G)
        z = np.where(Y[:, 2] > 1e-9, Y[:, 2], 1.0)
        d_warp = 1.0 / z
        d_dst, hit = _nearest_lookup(self.dst_d, self.dst_ok, uv[:, 0], uv[:, 1])
        var_dst, _ = _nearest_lookup(self.dst_var, self.dst_ok, uv[:, 0], uv[:, 1])
        ok_d = hit & ok_i
        var = pts.var * (d_warp / pts.idepth) ** 2 + var_dst
        sd = np.sqrt(np.where(ok_d, var, 1.0))
        r_d = np.where(ok_d, (d_warp - d_dst) / sd, 0.0)
        dinv = np.stack([np.zeros_like(z), np.zeros_like(z), -1.0 / (z * z)], axis=1)
        J_d = np.einsum("ni,nij->nj", dinv, G) / sd[:, None]
        J_d[~ok_d] = 0.0
        return r_i, J_i, ok_i, r_d, J_d, ok_d


def _sim3_cost(blocks, S, params: TrackingParams):
    sig2 = params.photometric_sigma**2
    total, count, terms = 0.0, 0, []
    for blk, fwd in blocks:
        r_i, J_i, ok_i, r_d, J_d, ok_d = blk.evaluate(S, fwd)
        terms.append((r_i, J_i, ok_i, r_d, J_d, ok_d))
        total += np.sum(huber_loss(r_i[ok_i], params.huber_delta)) / sig2
        total += np.sum(huber_loss(r_d[ok_d], params.depth_huber))
        count += int(ok_i.sum())
    if count == 0:
        raise AlignmentFailedError("keyframes do not overlap")
    return total / count, terms


def align_sim3(kf_a: Keyframe, kf_b: Keyframe, init: SimTransform | None = None,
               params: TrackingParams | None = None) -> Sim3AlignResult:
    """Estimate the pose of ``kf_b`` in ``kf_a``'s coordinates (``X_a = T X_b``).

    Both directions (a into b and b into a) contribute photometric and
    inverse-depth residuals with equal weight.
    """
    params = params or TrackingParams()
    # S warps a-points into b
    S = (init or SimTransform()).inverse()
    levels = min(kf_a.pyramid.levels, kf_b.pyramid.levels)
    sig2 = params.photometric_sigma**2
    initial_error = None
    converged = True
    err = math.nan
    terms = None
    for level in range(levels - 1, params.min_level - 1, -1):
        blocks = [(_Sim3Direction(kf_a, kf_b, level), True), (_Sim3Direction(kf_b, kf_a, level), False)]
        if len(blocks[0][0].pts) == 0 or len(blocks[1][0].pts) == 0:
            raise AlignmentFailedError(f"no depth hypotheses at level {level}")
        try:
            err, terms = _sim3_cost(blocks, S, params)
        except AlignmentFailedError:
            raise AlignmentFailedError(f"keyframes do not overlap at level {level}") from None
        if initial_error is None:
            initial_error = err
        level_converged = False
        for _ in range(params.max_iterations):
            H = np.zeros((7, 7))
            g = np.zeros(7)
            for r_i, J_i, ok_i, r_d, J_d, ok_d in terms:
                w = huber_weights(r_i[ok_i], params.huber_delta) / sig2
                Ji = J_i[ok_i]
                H += Ji.T @ (Ji * w[:, None])
                g += Ji.T @ (w * r_i[ok_i])
                w = huber_weights(r_d[ok_d], params.depth_huber)
                Jd = J_d[ok_d]
                H += Jd.T @ (Jd * w[:, None])
                g += Jd.T @ (w * r_d[ok_d])
            delta = _solve(H, g)
            step, accepted = 1.0, False
            for _ in range(params.max_halvings + 1):
                cand = SimTransform.exp(step * delta) @ S
                try:
                    new_err, new_terms = _sim3_cost(blocks, cand, params)
                except AlignmentFailedError:
                    step *= 0.5
                    continue
                if new_err <= err:
                    accepted = True
                    break
                step *= 0.5
            if not accepted:
                level_converged = True
                break
            decrease = (err - new_err) / max(err, 1e-300)
            S, err, terms = cand, new_err, new_terms
            if np.linalg.norm(step * delta) < params.step_tolerance or decrease < params.relative_tolerance:
                level_converged = True
                break
        converged &= level_converged
    inl = 0
    n = 0
    for r_i, _, ok_i, _, _, _ in terms:
        inl += int(np.sum(ok_i & (np.abs(r_i) <= params.huber_delta)))
        n += len(r_i)
    return Sim3AlignResult(S.inverse(), float(err), float(initial_error), inl / max(n, 1), n, converged)

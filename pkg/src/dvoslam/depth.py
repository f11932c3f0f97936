"""Per-pixel Gaussian inverse-depth filtering for keyframes."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .camera import PinholeIntrinsics, sample_bilinear
from .geometry import RigidPose, SimTransform
from .odometry import ImagePyramid, Keyframe


class DepthError(RuntimeError):
    pass


class NoObservationError(DepthError):
    pass


class AmbiguousMatchError(DepthError):
    pass


class CannotNormalizeError(DepthError):
    pass


OK, NO_OBSERVATION, REJECTED = 0, 1, 2


@dataclass
class DepthParams:
    var_init: float = 1.0
    var_max: float = 4.0
    rho_prop: float = 1.2
    image_noise: float = 2.0
    line_noise: float = 0.5
    max_samples: int = 48
    min_search_px: float = 3.0
    ambiguity_ratio: float = 1.05
    max_ssd: float = 1300.0
    max_failures: int = 5
    min_idepth: float = 1e-4


@dataclass(frozen=True)
class DepthHypothesis:
    mean: float
    var: float
    count: int = 0
    valid: bool = True


@dataclass(frozen=True)
class StereoObservation:
    idepth: float
    var: float
    score: float

    def __post_init__(self):
        if not self.var > 0:
            raise ValueError("observation variance must be positive")


@dataclass
class DepthUpdateStats:
    updated: int = 0
    no_observation: int = 0
    rejected: int = 0
    invalidated: int = 0


def init_hypotheses(kf: Keyframe, seed: int = 0, params: DepthParams | None = None,
                    scale: float = 1.0, only_missing: bool = False) -> Keyframe:
    """Random means in ``scale * [0.5, 1.5]`` with variance ``var_init`` on active pixels."""
    params = params or DepthParams()
    rng = np.random.default_rng(seed)
    target = kf.mask & ~kf.valid if only_missing else kf.mask.copy()
    draws = rng.uniform(0.5, 1.5, size=kf.mask.shape) * scale
    kf.idepth = np.where(target, draws, kf.idepth)
    kf.idepth_var = np.where(target, params.var_init * scale * scale, kf.idepth_var)
    kf.valid = kf.valid | target
    kf.obs_count = np.where(target, 0, kf.obs_count)
    kf.fail_count = np.where(target, 0, kf.fail_count)
    return kf


def fuse(prior: DepthHypothesis, obs: StereoObservation) -> DepthHypothesis:
    if not (prior.var > 0 and obs.var > 0):
        raise ValueError("variances must be positive")
    mean, var = fuse_arrays(prior.mean, prior.var, obs.idepth, obs.var)
    return DepthHypothesis(float(mean), float(var), prior.count + 1, True)


def fuse_arrays(mu_p, var_p, mu_o, var_o):
    s = var_p + var_o
    return (mu_p * var_o + mu_o * var_p) / s, var_p * var_o / s


# --- epipolar stereo -------------------------------------------------------------------------


@dataclass
class _SearchResult:
    idepth: np.ndarray
    var: np.ndarray
    score: np.ndarray
    status: np.ndarray


def _frame_image(frame):
    if isinstance(frame, ImagePyramid):
        return frame.images[0]
    if isinstance(frame, Keyframe):
        return frame.image
    return np.asarray(frame, dtype=float)


def epipolar_search_batch(kf: Keyframe, frame, pose: RigidPose, us, vs, prior_d, prior_var,
                          params: DepthParams | None = None) -> _SearchResult:
    """Vectorized stereo search for many keyframe pixels.

    ``pose`` is the frame's pose in keyframe coordinates (frame-to-keyframe).
    """
    params = params or DepthParams()
    K: PinholeIntrinsics = kf.intrinsics
    img_k = kf.image
    img_f = _frame_image(frame)
    h, w = img_f.shape
    n = len(us)
    out = _SearchResult(np.zeros(n), np.zeros(n), np.full(n, np.inf), np.full(n, NO_OBSERVATION))
    if n == 0:
        return out
    us = np.asarray(us, dtype=float)
    vs = np.asarray(vs, dtype=float)
    d0 = np.asarray(prior_d, dtype=float)
    sig = np.sqrt(np.asarray(prior_var, dtype=float))

    T = pose.inverse()  # keyframe -> frame
    c = pose.t  # frame center in keyframe coordinates
    if np.linalg.norm(c) < 1e-9:
        return out
    xn = (us - K.cx) / K.fx
    yn = (vs - K.cy) / K.fy
    xhat = np.stack([xn, yn, np.ones(n)], axis=1)
    # homogeneous frame pixel of depth rho: a + rho * b
    KR = K.K @ T.R
    a = xhat @ KR.T
    b = K.K @ T.t

    # epipolar direction in the keyframe (pixels), through p and the epipole
    ek = np.stack([(xn * c[2] - c[0]) * K.fx, (yn * c[2] - c[1]) * K.fy], axis=1)
    ek_norm = np.linalg.norm(ek, axis=1)
    ok = ek_norm > 1e-9
    ek = ek / np.where(ok, ek_norm, 1.0)[:, None]

    lo = np.maximum(d0 - 2 * sig, params.min_idepth)
    hi = np.maximum(d0 + 2 * sig, lo * 1.0001)
    # keep the whole interval in front of the frame camera
    if b[2] < 0:
        zmax = -a[:, 2] / b[2]
        hi = np.minimum(hi, 0.99 * zmax)
    ok &= (a[:, 2] + lo * b[2] > 1e-9) & (hi > lo)

    def pix(rho):
        hz = a[:, 2] + rho * b[2]
        hz = np.where(np.abs(hz) > 1e-12, hz, 1e-12)
        return np.stack([(a[:, 0] + rho * b[0]) / hz, (a[:, 1] + rho * b[1]) / hz], axis=1)

    p_lo, p_hi = pix(lo), pix(hi)
    line = p_hi - p_lo
    length = np.linalg.norm(line, axis=1)
    # direction along the frame epipolar line, pointing towards larger inverse depth
    ef = np.where(length[:, None] > 1e-9, line / np.maximum(length, 1e-12)[:, None], 0.0)
    ok &= length > 1e-6
    # widen very short searches around the prior
    short = ok & (length < 2 * params.min_search_px)
    if short.any():
        p_mid = pix(d0)
        p_lo = np.where(short[:, None], p_mid - params.min_search_px * ef, p_lo)
        p_hi = np.where(short[:, None], p_mid + params.min_search_px * ef, p_hi)
        length = np.where(short, 2 * params.min_search_px, length)

    m = params.max_samples
    step = np.maximum(1.0, length / (m - 1))
    nsamp = np.minimum(np.floor(length / step).astype(int) + 1, m)
    j = np.arange(-2, m + 2)
    centers = p_lo[:, None, :] + (j[None, :, None] * step[:, None, None]) * ef[:, None, :]
    f_vals, f_ok = sample_bilinear(img_f, centers[..., 0], centers[..., 1])

    # keyframe patch along its epipolar line, oriented like the frame line
    probe = pix_from(us + ek[:, 0], vs + ek[:, 1], d0, K, T)
    p_mid = pix(d0)
    orient = np.sign(np.sum((probe - p_mid) * ef, axis=1))
    orient = np.where(orient == 0, 1.0, orient)
    offs = np.arange(-2, 3)
    ku = us[:, None] + offs[None, :] * (orient * step)[:, None] * ek[:, 0:1]
    kv = vs[:, None] + offs[None, :] * (orient * step)[:, None] * ek[:, 1:2]
    k_vals, k_ok = sample_bilinear(img_k, ku, kv)
    ok &= k_ok.all(axis=1)

    # SSD of the 5-point patch at every sample index 0..m-1
    ssd = np.zeros((n, m))
    valid_s = np.ones((n, m), bool)
    for k in range(5):
        diff = k_vals[:, k : k + 1] - f_vals[:, k : k + m]
        ssd += diff * diff
        valid_s &= f_ok[:, k : k + m]
    valid_s &= np.arange(m)[None, :] < nsamp[:, None]
    ssd = np.where(valid_s, ssd, np.inf)
    has = valid_s.any(axis=1)
    ok &= has

    best = np.argmin(ssd, axis=1)
    rows = np.arange(n)
    s_best = ssd[rows, best]
    # second best at least two samples away from the best
    far = np.abs(np.arange(m)[None, :] - best[:, None]) >= 2
    s_second = np.min(np.where(far, ssd, np.inf), axis=1)
    ambiguous = s_second <= params.ambiguity_ratio * s_best
    bad = s_best > params.max_ssd

    # parabola refinement over the best triplet
    left = ssd[rows, np.maximum(best - 1, 0)]
    right = ssd[rows, np.minimum(best + 1, m - 1)]
    interior = (best > 0) & (best < nsamp - 1) & np.isfinite(left) & np.isfinite(right)
    left = np.where(interior, left, 0.0)
    right = np.where(interior, right, 0.0)
    curv = np.where(interior, left - 2 * np.where(interior, s_best, 0.0) + right, 0.0)
    with np.errstate(invalid="ignore", divide="ignore"):
        off = np.where(interior & (curv > 0), 0.5 * (left - right) / curv, 0.0)
    off = np.clip(off, -0.5, 0.5)
    pos = p_lo + ((best + off) * step)[:, None] * ef
    rho = _triangulate(pos, a, b)
    rho_plus = _triangulate(pos + ef, a, b)
    alpha = np.abs(rho_plus - rho)

    gx, gy = kf.pyramid.grad_x[0], kf.pyramid.grad_y[0]
    ui, vi = us.astype(np.intp), vs.astype(np.intp)
    g = np.stack([gx[vi, ui], gy[vi, ui]], axis=1)
    gn = np.linalg.norm(g, axis=1)
    cos2 = np.where(gn > 0, (np.sum(g * ek, axis=1) / np.maximum(gn, 1e-12)) ** 2, 0.0)
    var_geo = params.line_noise**2 / np.maximum(cos2, 1e-2)
    curv_px = np.maximum(curv / (step * step), 1e-6)
    var_photo = 4.0 * params.image_noise**2 / curv_px
    var = np.clip(alpha**2 * (var_geo + var_photo), 1e-4, params.var_max)

    good = ok & ~ambiguous & ~bad & np.isfinite(rho) & (rho > 0)
    out.status = np.where(ok, np.where(good, OK, REJECTED), NO_OBSERVATION)
    out.idepth = np.where(good, rho, 0.0)
    out.var = np.where(good, var, 0.0)
    out.score = np.where(ok, s_best, np.inf)
    return out


def pix_from(u, v, rho, K: PinholeIntrinsics, T: RigidPose):
    X = np.stack([(u - K.cx) / K.fx, (v - K.cy) / K.fy, np.ones_like(u)], axis=1) / rho[:, None]
    Y = X @ T.R.T + T.t
    z = np.where(Y[:, 2] > 1e-12, Y[:, 2], 1e-12)
    return np.stack([K.fx * Y[:, 0] / z + K.cx, K.fy * Y[:, 1] / z + K.cy], axis=1)


def _triangulate(pos, a, b):
    """Inverse depth whose projection ``(a + rho b)`` lands on ``pos``."""
    du = pos[:, 0] * b[2] - b[0]
    dv = pos[:, 1] * b[2] - b[1]
    nu = a[:, 0] - pos[:, 0] * a[:, 2]
    nv = a[:, 1] - pos[:, 1] * a[:, 2]
    use_u = np.abs(du) >= np.abs(dv)
    num = np.where(use_u, nu, nv)
    den = np.where(use_u, du, dv)
    with np.errstate(invalid="ignore", divide="ignore"):
        return np.where(np.abs(den) > 1e-15, num / den, np.nan)


def epipolar_search(kf: Keyframe, frame, pose: RigidPose, pixel, params: DepthParams | None = None,
                    prior: DepthHypothesis | None = None) -> StereoObservation:
    """Stereo match for one keyframe pixel; raises when there is no usable match."""
    u, v = int(pixel[0]), int(pixel[1])
    if prior is None:
        if not kf.valid[v, u]:
            raise DepthError(f"pixel ({u}, {v}) has no hypothesis")
        prior = DepthHypothesis(kf.idepth[v, u], kf.idepth_var[v, u])
    res = epipolar_search_batch(kf, frame, pose, [u], [v], [prior.mean], [prior.var], params)
    if res.status[0] == NO_OBSERVATION:
        raise NoObservationError("epipolar line unusable (zero baseline or outside the frame)")
    if res.status[0] == REJECTED:
        raise AmbiguousMatchError("no unique epipolar match")
    return StereoObservation(float(res.idepth[0]), float(res.var[0]), float(res.score[0]))


def update_keyframe_depth(kf: Keyframe, frame, pose: RigidPose,
                          params: DepthParams | None = None) -> DepthUpdateStats:
    """Refine every valid hypothesis of ``kf`` from one tracked frame (in place)."""
    params = params or DepthParams()
    stats = DepthUpdateStats()
    vs, us = np.nonzero(kf.valid)
    if len(us) == 0:
        return stats
    res = epipolar_search_batch(kf, frame, pose, us, vs, kf.idepth[vs, us], kf.idepth_var[vs, us], params)
    upd = res.status == OK
    rej = res.status == REJECTED
    stats.updated = int(upd.sum())
    stats.rejected = int(rej.sum())
    stats.no_observation = int((res.status == NO_OBSERVATION).sum())

    uu, vu = us[upd], vs[upd]
    mean, var = fuse_arrays(kf.idepth[vu, uu], kf.idepth_var[vu, uu], res.idepth[upd], res.var[upd])
    kf.idepth[vu, uu] = mean
    kf.idepth_var[vu, uu] = var
    kf.obs_count[vu, uu] += 1
    kf.fail_count[vu, uu] = 0
    kf.fail_count[vs[rej], us[rej]] += 1

    drop = kf.valid & ((kf.idepth_var > params.var_max) | (kf.fail_count >= params.max_failures) | (kf.idepth <= 0))
    stats.invalidated = int(drop.sum())
    kf.valid &= ~drop
    kf.idepth[drop] = 0.0
    kf.idepth_var[drop] = 0.0
    return stats


def propagate(old_kf: Keyframe, new_image, pose_old_to_new, new_id: int | None = None,
              params: DepthParams | None = None, seed: int = 0, levels: int | None = None,
              g_min: float = 5.0, timestamp: float = 0.0) -> Keyframe:
    """Carry hypotheses of ``old_kf`` into a new keyframe.

    ``pose_old_to_new`` maps old keyframe coordinates into the new one
    (``X_new = T X_old``). Active target pixels that receive no hypothesis
    are initialized randomly around the mean propagated inverse depth.
    """
    params = params or DepthParams()
    T = pose_old_to_new
    if isinstance(T, SimTransform):
        T = T.rigid() if abs(T.s - 1.0) < 1e-12 else T
    levels = levels or old_kf.pyramid.levels
    pose = old_kf.pose @ (T.inverse() if isinstance(T, SimTransform) else T.inverse().to_sim3())
    new = Keyframe.create(old_kf.id + 1 if new_id is None else new_id, new_image, old_kf.intrinsics,
                          levels, g_min, pose, timestamp)
    K = old_kf.intrinsics
    vs, us = np.nonzero(old_kf.valid)
    d_old = old_kf.idepth[vs, us]
    X = np.stack([(us - K.cx) / K.fx, (vs - K.cy) / K.fy, np.ones(len(us))], axis=1) / d_old[:, None]
    Y = T.apply(X)
    front = Y[:, 2] > 1e-9
    z = np.where(front, Y[:, 2], 1.0)
    u2 = K.fx * Y[:, 0] / z + K.cx
    v2 = K.fy * Y[:, 1] / z + K.cy
    ui = np.rint(u2).astype(np.intp)
    vi = np.rint(v2).astype(np.intp)
    h, w = new.mask.shape
    inside = front & (ui >= 0) & (vi >= 0) & (ui < w) & (vi < h)
    ui, vi = np.where(inside, ui, 0), np.where(inside, vi, 0)
    keep = inside & new.mask[vi, ui]
    d_new = 1.0 / z
    var_new = old_kf.idepth_var[vs, us] * (d_new / d_old) ** 4 * params.rho_prop
    keep &= var_new <= params.var_max
    idx = np.nonzero(keep)[0]
    if len(idx):
        flat = vi[idx] * w + ui[idx]
        order = np.lexsort((var_new[idx], flat))
        idx, flat = idx[order], flat[order]
        first = np.concatenate([[True], flat[1:] != flat[:-1]])
        idx, flat = idx[first], flat[first]
        tv, tu = np.divmod(flat, w)
        new.idepth[tv, tu] = d_new[idx]
        new.idepth_var[tv, tu] = var_new[idx]
        new.valid[tv, tu] = True
        new.obs_count[tv, tu] = old_kf.obs_count[vs[idx], us[idx]]
        scale = float(d_new[idx].mean())
    else:
        scale = old_kf.mean_idepth() if old_kf.valid.any() else 1.0
    init_hypotheses(new, seed, params, scale=scale, only_missing=True)
    return new


def normalize_scale(kf: Keyframe) -> tuple[Keyframe, float]:
    """Rescale so the mean inverse depth is 1; the world geometry is unchanged.

    Keyframe coordinates grow by ``m`` (the old mean), so the keyframe's
    similarity pose scale shrinks by ``m``.
    """
    if not kf.valid.any():
        raise CannotNormalizeError("keyframe has no valid hypotheses")
    m = float(kf.idepth[kf.valid].mean())
    kf.idepth = np.where(kf.valid, kf.idepth / m, 0.0)
    kf.idepth_var = np.where(kf.valid, kf.idepth_var / (m * m), 0.0)
    kf.pose = SimTransform(kf.pose.R, kf.pose.t, kf.pose.s / m)
    return kf, m


def export_depth(kf: Keyframe, path, scale_path=None) -> float:
    """Write inverse depth as a 16-bit PGM plus a sidecar holding the scale.

    Stored value = idepth * factor, factor chosen so the maximum maps to 65535.
    """
    from pathlib import Path

    from .camera import write_pnm

    d = np.where(kf.valid, kf.idepth, 0.0)
    peak = float(d.max()) if d.size else 0.0
    factor = 65535.0 / peak if peak > 0 else 1.0
    write_pnm(path, np.clip(np.rint(d * factor), 0, 65535).astype(np.uint16))
    scale_path = Path(scale_path) if scale_path else Path(str(path) + ".scale.txt")
    scale_path.write_text(f"{1.0 / factor!r}\n")
    return 1.0 / factor

"""Rigid registration: point-based, surface-based and intensity-based."""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
from scipy.spatial import cKDTree

from .camera import as_float, sample_bilinear
from .geometry import RigidPose, SimTransform


class RegistrationError(ValueError):
    pass


class DegenerateConfigurationError(RegistrationError):
    pass


@dataclass
class RegistrationResult:
    transform: SimTransform
    metric: float
    iterations: int = 0
    converged: bool = True
    history: list = field(default_factory=list)
    landscape: np.ndarray | None = None


# --- point based -------------------------------------------------------------


def procrustes_align(P, Q, with_scale: bool = False, allow_degenerate: bool = False) -> RegistrationResult:
    """Closed-form minimizer of ``mean ||s R p_i + t - q_i||^2``.

    Collinear sources make the rotation about the line arbitrary and raise
    unless ``allow_degenerate`` is set, in which case one minimizer is picked.
    """
    P = np.asarray(P, dtype=float)
    Q = np.asarray(Q, dtype=float)
    if P.shape != Q.shape or P.ndim != 2 or P.shape[1] != 3:
        raise RegistrationError(f"point sets must both be (N, 3), got {P.shape} and {Q.shape}")
    n = len(P)
    if n < 3:
        raise RegistrationError("need at least three correspondences")
    mp, mq = P.mean(axis=0), Q.mean(axis=0)
    Pc, Qc = P - mp, Q - mq
    sv = np.linalg.svd(Pc, compute_uv=False)
    if not allow_degenerate and (sv[0] == 0.0 or sv[1] < 1e-12 * sv[0]):
        raise DegenerateConfigurationError("source points are collinear or coincident")
    cov = Qc.T @ Pc / n
    U, S, Vt = np.linalg.svd(cov)
    D = np.ones(3)
    if np.linalg.det(U) * np.linalg.det(Vt) < 0:
        D[2] = -1.0
    R = (U * D) @ Vt
    var = np.sum(Pc * Pc) / n
    s = float(np.sum(S * D) / var) if with_scale and var > 0 else 1.0
    t = mq - s * R @ mp
    err = float(np.mean(np.sum((s * P @ R.T + t - Q) ** 2, axis=1)))
    return RegistrationResult(SimTransform(R, t, s), err, 1, True)


# --- surface based -----------------------------------------------------------


class Surface:
    """Point-sampled surface with an exact nearest-point index.

    Triangles are optional and only kept for export; queries use the vertices.
    """

    def __init__(self, points, triangles=None):
        self.points = np.asarray(points, dtype=float)
        if self.points.ndim != 2 or self.points.shape[1] != 3 or len(self.points) == 0:
            raise RegistrationError("surface needs a non-empty (N, 3) point array")
        self.triangles = None if triangles is None else np.asarray(triangles, dtype=np.intp)
        self._tree = cKDTree(self.points)

    def __len__(self):
        return len(self.points)

    def nearest(self, x):
        dist, idx = self._tree.query(np.asarray(x, dtype=float))
        return self.points[idx], dist


def icp_align(points, surface: Surface, init: RigidPose | None = None, max_iters: int = 50,
              tol: float = 1e-9) -> RegistrationResult:
    """Iterative closest point from ``points`` onto ``surface``.

    ``history`` holds the mean squared distance d(T) seen at the start of
    each iteration plus the final value.
    """
    pts = np.asarray(points, dtype=float)
    if not isinstance(surface, Surface):
        surface = Surface(surface)
    if pts.ndim != 2 or len(pts) == 0:
        raise RegistrationError("point set is empty")
    T = init or RigidPose()
    history = []
    converged = False
    it = 0
    for it in range(1, max_iters + 1):
        q, dist = surface.nearest(T.apply(pts))
        history.append(float(np.mean(dist**2)))
        new = procrustes_align(pts, q).transform.rigid()
        step = np.linalg.norm((new @ T.inverse()).log())
        T = new
        if step < tol:
            converged = True
            break
    _, dist = surface.nearest(T.apply(pts))
    final = float(np.mean(dist**2))
    history.append(final)
    return RegistrationResult(T.to_sim3(), final, it, converged, history)


# --- intensity similarity ------------------------------------------------------


def _pair(A, B):
    a, b = as_float(A), as_float(B)
    if a.shape != b.shape:
        raise RegistrationError(f"image dimensions differ: {a.shape} vs {b.shape}")
    return a, b


def ssd(A, B) -> float:
    a, b = _pair(A, B)
    return float(np.mean((a - b) ** 2))


def sad(A, B) -> float:
    a, b = _pair(A, B)
    return float(np.mean(np.abs(a - b)))


def ncc(A, B) -> float:
    a, b = _pair(A, B)
    da, db = a - a.mean(), b - b.mean()
    saa, sbb = float(np.sum(da * da)), float(np.sum(db * db))
    if saa == 0.0 or sbb == 0.0:
        raise RegistrationError("correlation undefined for a constant image")
    return float(np.clip(np.sum(da * db) / math.sqrt(saa * sbb), -1.0, 1.0))


@dataclass(frozen=True)
class JointHistogram:
    counts: np.ndarray

    @property
    def bins(self) -> int:
        return self.counts.shape[0]

    @property
    def total(self) -> int:
        return int(self.counts.sum())

    @property
    def marginal_a(self) -> np.ndarray:
        return self.counts.sum(axis=1)

    @property
    def marginal_b(self) -> np.ndarray:
        return self.counts.sum(axis=0)


def intensity_bins(values, bins: int) -> np.ndarray:
    """Bin index of each intensity; bin i covers [i*256/B, (i+1)*256/B)."""
    idx = np.floor(np.asarray(values, dtype=float) * bins / 256.0).astype(np.intp)
    return np.clip(idx, 0, bins - 1)


def _hist_from_values(a, b, bins: int) -> JointHistogram:
    ia, ib = intensity_bins(a, bins), intensity_bins(b, bins)
    counts = np.bincount((ia * bins + ib).ravel(), minlength=bins * bins).reshape(bins, bins)
    return JointHistogram(counts)


def joint_histogram(A, B, bins: int = 32) -> JointHistogram:
    if bins < 2:
        raise RegistrationError("need at least two bins")
    a, b = _pair(A, B)
    return _hist_from_values(a, b, bins)


def _entropy_bits(counts) -> float:
    c = np.asarray(counts, dtype=float).ravel()
    total = c.sum()
    p = c[c > 0] / total
    return float(-np.sum(p * np.log2(p)))


def _check(h: JointHistogram):
    if h.total <= 0:
        raise RegistrationError("histogram is empty")


def joint_entropy(h: JointHistogram) -> float:
    _check(h)
    return _entropy_bits(h.counts)


def marginal_entropies(h: JointHistogram) -> tuple[float, float]:
    _check(h)
    return _entropy_bits(h.marginal_a), _entropy_bits(h.marginal_b)


def mutual_information(h: JointHistogram) -> float:
    _check(h)
    n = float(h.total)
    pab = h.counts / n
    pa = h.marginal_a / n
    pb = h.marginal_b / n
    nz = pab > 0
    outer = np.outer(pa, pb)
    mi = float(np.sum(pab[nz] * np.log2(pab[nz] / outer[nz])))
    return max(mi, 0.0)


def normalized_mutual_information(h: JointHistogram) -> float:
    hab = joint_entropy(h)
    if hab == 0.0:
        raise RegistrationError("normalized MI undefined when both images are constant")
    ha, hb = marginal_entropies(h)
    return (ha + hb) / hab


# --- multi-resolution rigid search --------------------------------------------

MAXIMIZED = {"NCC", "MI", "NMI"}
METRICS = ("SSD", "SAD", "NCC", "JE", "MI", "NMI")


def _metric_value(name: str, a: np.ndarray, b: np.ndarray, bins: int) -> float:
    if name == "SSD":
        return float(np.mean((a - b) ** 2))
    if name == "SAD":
        return float(np.mean(np.abs(a - b)))
    if name == "NCC":
        da, db = a - a.mean(), b - b.mean()
        den = math.sqrt(float(np.sum(da * da)) * float(np.sum(db * db)))
        return float(np.sum(da * db) / den) if den > 0 else 0.0
    h = _hist_from_values(a, b, bins)
    if name == "JE":
        return joint_entropy(h)
    if name == "MI":
        return mutual_information(h)
    hab = joint_entropy(h)
    if hab == 0.0:
        return 1.0
    ha, hb = marginal_entropies(h)
    return (ha + hb) / hab


def _downsample(img: np.ndarray) -> np.ndarray:
    h, w = img.shape
    img = np.pad(img, ((0, h % 2), (0, w % 2)), mode="edge")
    return 0.25 * (img[0::2, 0::2] + img[1::2, 0::2] + img[0::2, 1::2] + img[1::2, 1::2])


def warp_coordinates(shape, tx: float, ty: float, angle_deg: float):
    """Sample positions ``T(x) = R(x - c) + c + t`` for every pixel ``x``."""
    h, w = shape
    c = np.array([(w - 1) / 2.0, (h - 1) / 2.0])
    uu, vv = np.meshgrid(np.arange(w, dtype=float), np.arange(h, dtype=float))
    th = math.radians(angle_deg)
    cs, sn = math.cos(th), math.sin(th)
    du, dv = uu - c[0], vv - c[1]
    return cs * du - sn * dv + c[0] + tx, sn * du + cs * dv + c[1] + ty


def rigid2d_to_sim3(tx: float, ty: float, angle_deg: float, shape) -> SimTransform:
    """Express the in-plane warp as a 3-D transform acting on ``(u, v, 0)``."""
    h, w = shape
    c = np.array([(w - 1) / 2.0, (h - 1) / 2.0, 0.0])
    th = math.radians(angle_deg)
    R = np.array([[math.cos(th), -math.sin(th), 0.0], [math.sin(th), math.cos(th), 0.0], [0.0, 0.0, 1.0]])
    return SimTransform(R, c + np.array([tx, ty, 0.0]) - R @ c, 1.0)


def sim3_to_rigid2d(T: SimTransform, shape) -> tuple[float, float, float]:
    h, w = shape
    c = np.array([(w - 1) / 2.0, (h - 1) / 2.0, 0.0])
    angle = math.degrees(math.atan2(T.R[1, 0], T.R[0, 0]))
    t = T.t - c + T.R @ c
    return float(t[0]), float(t[1]), angle


class _Objective:
    def __init__(self, moving: np.ndarray, fixed: np.ndarray, metric: str, bins: int):
        self.moving, self.fixed, self.metric, self.bins = moving, fixed, metric, bins
        self.sign = -1.0 if metric in MAXIMIZED else 1.0

    def value(self, tx, ty, ang) -> float:
        """Raw metric for aligning moving onto fixed's grid."""
        u, v = warp_coordinates(self.fixed.shape, tx, ty, ang)
        vals, valid = sample_bilinear(self.moving, u, v)
        if valid.sum() < 16:
            return math.nan
        return _metric_value(self.metric, self.fixed[valid], vals[valid], self.bins)

    def cost(self, tx, ty, ang) -> float:
        val = self.value(tx, ty, ang)
        return math.inf if math.isnan(val) else self.sign * val


def _golden(f, lo: float, hi: float, iters: int = 20) -> tuple[float, float]:
    g = (math.sqrt(5.0) - 1.0) / 2.0
    a, b = lo, hi
    c, d = b - g * (b - a), a + g * (b - a)
    fc, fd = f(c), f(d)
    for _ in range(iters):
        if fc <= fd:
            b, d, fd = d, c, fc
            c = b - g * (b - a)
            fc = f(c)
        else:
            a, c, fc = c, d, fd
            d = a + g * (b - a)
            fd = f(d)
    return (c, fc) if fc <= fd else (d, fd)


def register_rigid_multires(moving, fixed, metric: str = "MI", levels: int = 3,
                            max_translation: float = 12.0, max_rotation: float = 6.0,
                            bins: int = 32, sweeps: int = 2) -> RegistrationResult:
    """Coarse-to-fine in-plane rigid registration.

    The result warps ``moving`` onto the grid of ``fixed``: the aligned image
    is ``moving(T(x))`` with ``T(x) = R(x - c) + c + t`` about the image
    center ``c``. Translation bounds are in full-resolution pixels, rotation
    bounds in degrees. The coarsest level is searched exhaustively with
    1 px / 1 degree steps; finer levels refine each axis by golden section.
    """
    metric = metric.upper()
    if metric not in METRICS:
        raise RegistrationError(f"unknown metric '{metric}'")
    if levels < 1:
        raise RegistrationError("need at least one pyramid level")
    if max_translation < 0 or max_rotation < 0:
        raise RegistrationError("search bounds must be non-negative")
    mov, fix = _pair(moving, fixed)
    if min(fix.shape) < 32:
        raise RegistrationError("images must be at least 32x32")
    pyr = [(mov, fix)]
    for _ in range(levels - 1):
        m, f = pyr[-1]
        pyr.append((_downsample(m), _downsample(f)))

    top = levels - 1
    scale = 2.0**top
    obj = _Objective(pyr[top][0], pyr[top][1], metric, bins)
    # coarse pixel -> fine pixel: x_f = 2^l (x_c + 0.5) - 0.5; translation scales by 2^l
    nt = int(math.floor(max_translation / scale))
    na = int(math.floor(max_rotation))
    txs = np.arange(-nt, nt + 1, dtype=float)
    angs = np.arange(-na, na + 1, dtype=float)
    landscape = []
    best = (math.inf, 0.0, 0.0, 0.0)
    for ang in angs:
        for ty in txs:
            for tx in txs:
                c = obj.cost(tx, ty, ang)
                landscape.append((tx * scale, ty * scale, ang, obj.sign * c if math.isfinite(c) else math.nan))
                if c < best[0] or (c == best[0] and abs(tx) + abs(ty) + abs(ang) < abs(best[1]) + abs(best[2]) + abs(best[3])):
                    best = (c, tx, ty, ang)
    _, tx, ty, ang = best
    tx, ty = tx * scale, ty * scale
    evaluations = len(landscape)

    step_t, step_a = scale, 1.0
    for lvl in range(top, -1, -1):
        f_lvl = 2.0**lvl
        obj = _Objective(pyr[lvl][0], pyr[lvl][1], metric, bins)
        params = [tx / f_lvl, ty / f_lvl, ang]
        radii = [step_t / f_lvl, step_t / f_lvl, step_a]
        bounds = [max_translation / f_lvl, max_translation / f_lvl, max_rotation]
        for _ in range(sweeps):
            for k in range(3):
                lo = max(params[k] - radii[k], -bounds[k])
                hi = min(params[k] + radii[k], bounds[k])

                def f(x, k=k):
                    p = list(params)
                    p[k] = x
                    return obj.cost(*p)

                current = f(params[k])
                x, fx = _golden(f, lo, hi)
                evaluations += 22
                if fx < current:
                    params[k] = x
        tx, ty, ang = params[0] * f_lvl, params[1] * f_lvl, params[2]
        step_t, step_a = max(f_lvl / 2.0, 0.5), max(step_a / 2.0, 0.25)

    final = _Objective(mov, fix, metric, bins)
    value = final.value(tx, ty, ang)
    T = rigid2d_to_sim3(tx, ty, ang, fix.shape)
    return RegistrationResult(T, value, evaluations, True, landscape=np.array(landscape))

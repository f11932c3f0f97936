"""Camera models and the frame preprocessing chain.

Pixel coordinates follow the usual convention: ``u`` grows to the right,
``v`` grows downwards, and integer coordinates address pixel centers.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np


class CameraError(ValueError):
    pass


class BehindCameraError(CameraError):
    pass


LUMA_WEIGHTS = np.array([0.299, 0.587, 0.114])


@dataclass(frozen=True)
class Image:
    """8-bit frame with 1, 3 or 4 channels and a timestamp in microseconds."""

    data: np.ndarray
    timestamp: int = 0

    def __post_init__(self):
        data = np.asarray(self.data)
        if data.dtype != np.uint8:
            data = np.clip(np.floor(np.asarray(data, dtype=float) + 0.5), 0, 255).astype(np.uint8)
        if data.ndim == 3 and data.shape[2] == 1:
            data = data[:, :, 0]
        if data.ndim not in (2, 3) or (data.ndim == 3 and data.shape[2] not in (3, 4)):
            raise CameraError(f"unsupported image shape {data.shape}")
        object.__setattr__(self, "data", data)

    @property
    def width(self) -> int:
        return self.data.shape[1]

    @property
    def height(self) -> int:
        return self.data.shape[0]

    @property
    def channels(self) -> int:
        return 1 if self.data.ndim == 2 else self.data.shape[2]

    @property
    def buffer(self) -> bytes:
        return self.data.tobytes()

    def gray(self) -> "Image":
        return replace(self, data=to_gray(self.data))


def to_gray(data) -> np.ndarray:
    """Luminance of an RGB(A) buffer; single-channel input passes through."""
    data = np.asarray(data)
    if data.ndim == 2:
        return data
    lum = data[:, :, :3].astype(float) @ LUMA_WEIGHTS
    return np.clip(np.floor(lum + 0.5), 0, 255).astype(np.uint8)


def as_float(img) -> np.ndarray:
    """Single-channel float64 view of an Image or array."""
    if isinstance(img, Image):
        img = img.data
    img = np.asarray(img)
    if img.ndim == 3:
        img = to_gray(img)
    return np.asarray(img, dtype=float)


@dataclass(frozen=True)
class PinholeIntrinsics:
    fx: float
    fy: float
    cx: float
    cy: float
    width: int
    height: int

    def __post_init__(self):
        if not (self.fx > 0 and self.fy > 0):
            raise CameraError("focal lengths must be positive")
        if not (0 <= self.cx < self.width and 0 <= self.cy < self.height):
            raise CameraError("optical center must lie inside the image")

    @property
    def K(self) -> np.ndarray:
        return np.array([[self.fx, 0.0, self.cx], [0.0, self.fy, self.cy], [0.0, 0.0, 1.0]])

    def scaled(self, level: int) -> "PinholeIntrinsics":
        """Intrinsics of pyramid level ``level`` (2x2 block averaging per level)."""
        f = 0.5**level
        w, h = self.width, self.height
        for _ in range(level):
            w, h = (w + 1) // 2, (h + 1) // 2
        return PinholeIntrinsics(
            self.fx * f, self.fy * f, (self.cx + 0.5) * f - 0.5, (self.cy + 0.5) * f - 0.5, w, h
        )

    def cropped_resized(self, roi: "RegionOfInterest", width: int, height: int) -> "PinholeIntrinsics":
        sx, sy = width / roi.w, height / roi.h
        return PinholeIntrinsics(
            self.fx * sx,
            self.fy * sy,
            (self.cx - roi.x + 0.5) * sx - 0.5,
            (self.cy - roi.y + 0.5) * sy - 0.5,
            width,
            height,
        )


@dataclass(frozen=True)
class DistortionCoefficients:
    k1: float = 0.0
    k2: float = 0.0
    p1: float = 0.0
    p2: float = 0.0
    k3: float = 0.0

    def __post_init__(self):
        if not np.all(np.isfinite(self.as_array())):
            raise CameraError("distortion coefficients must be finite")

    def as_array(self) -> np.ndarray:
        return np.array([self.k1, self.k2, self.p1, self.p2, self.k3], dtype=float)

    def is_zero(self) -> bool:
        return not np.any(self.as_array())


@dataclass(frozen=True)
class OmniPolynomial:
    """Fifth-order projection polynomial ``a0 + a1 r + ... + a5 r^5``."""

    coeffs: tuple = (1.0, 0.0, 0.0, 0.0, 0.0, 0.0)

    def __post_init__(self):
        c = tuple(float(v) for v in self.coeffs)
        if len(c) > 6:
            raise CameraError("at most six polynomial coefficients")
        c = c + (0.0,) * (6 - len(c))
        if not any(c):
            raise CameraError("projection polynomial is identically zero")
        object.__setattr__(self, "coeffs", c)


@dataclass(frozen=True)
class OmniCamera:
    """Omnidirectional sensor: polynomial plus distortion center and size.

    A pixel at offset ``(x, y)`` from the center, radius ``r``, sees the ray
    ``(x, y, F(r))``.
    """

    poly: OmniPolynomial
    cx: float
    cy: float
    width: int
    height: int


@dataclass(frozen=True)
class RegionOfInterest:
    x: int
    y: int
    w: int
    h: int

    def check(self, width: int, height: int) -> None:
        if self.w <= 0 or self.h <= 0 or self.x < 0 or self.y < 0:
            raise CameraError(f"invalid ROI {self}")
        if self.x + self.w > width or self.y + self.h > height:
            raise CameraError(f"ROI {self} exceeds {width}x{height} frame")


def omni_projection(rho, coeffs: OmniPolynomial | tuple):
    if not isinstance(coeffs, OmniPolynomial):
        coeffs = OmniPolynomial(tuple(coeffs))
    rho = np.asarray(rho, dtype=float)
    if np.any(rho < 0):
        raise CameraError("radial distance must be non-negative")
    out = np.zeros_like(rho)
    for a in reversed(coeffs.coeffs):
        out = out * rho + a
    return out if out.ndim else float(out)


def project(point, intr: PinholeIntrinsics) -> np.ndarray:
    p = np.asarray(point, dtype=float)
    z = p[..., 2]
    if np.any(z <= 1e-9):
        raise BehindCameraError("point is behind or on the camera plane")
    return np.stack([intr.fx * p[..., 0] / z + intr.cx, intr.fy * p[..., 1] / z + intr.cy], axis=-1)


def unproject(pixel, inverse_depth, intr: PinholeIntrinsics) -> np.ndarray:
    pix = np.asarray(pixel, dtype=float)
    d = np.asarray(inverse_depth, dtype=float)
    if np.any(d <= 0):
        raise CameraError("inverse depth must be positive")
    z = 1.0 / d
    x = (pix[..., 0] - intr.cx) / intr.fx * z
    y = (pix[..., 1] - intr.cy) / intr.fy * z
    return np.stack([x, y, np.broadcast_to(z, np.shape(x))], axis=-1)


def sample_bilinear(img: np.ndarray, u, v):
    """Bilinear lookup of a 2-D float array.

    Returns ``(values, valid)``; samples need their full 2x2 neighbourhood
    inside the image (``0 <= u <= w-1``), invalid entries are 0.
    """
    h, w = img.shape
    u = np.asarray(u, dtype=float)
    v = np.asarray(v, dtype=float)
    valid = (u >= 0) & (v >= 0) & (u <= w - 1) & (v <= h - 1)
    uc = np.where(valid, u, 0.0)
    vc = np.where(valid, v, 0.0)
    x0 = np.minimum(np.floor(uc).astype(np.intp), w - 2) if w > 1 else np.zeros(uc.shape, np.intp)
    y0 = np.minimum(np.floor(vc).astype(np.intp), h - 2) if h > 1 else np.zeros(vc.shape, np.intp)
    x1 = np.minimum(x0 + 1, w - 1)
    y1 = np.minimum(y0 + 1, h - 1)
    a = uc - x0
    b = vc - y0
    val = (
        img[y0, x0] * (1 - a) * (1 - b)
        + img[y0, x1] * a * (1 - b)
        + img[y1, x0] * (1 - a) * b
        + img[y1, x1] * a * b
    )
    return np.where(valid, val, 0.0), valid


def sample_bilinear_grad(img: np.ndarray, u, v):
    """Bilinear lookup plus the exact partial derivatives of the interpolant.

    Returns ``(values, du, dv, valid)``.
    """
    h, w = img.shape
    u = np.asarray(u, dtype=float)
    v = np.asarray(v, dtype=float)
    valid = (u >= 0) & (v >= 0) & (u <= w - 1) & (v <= h - 1)
    uc = np.where(valid, u, 0.0)
    vc = np.where(valid, v, 0.0)
    x0 = np.minimum(np.floor(uc).astype(np.intp), w - 2)
    y0 = np.minimum(np.floor(vc).astype(np.intp), h - 2)
    a = uc - x0
    b = vc - y0
    i00 = img[y0, x0]
    i01 = img[y0, x0 + 1]
    i10 = img[y0 + 1, x0]
    i11 = img[y0 + 1, x0 + 1]
    top = i00 + a * (i01 - i00)
    bot = i10 + a * (i11 - i10)
    val = top + b * (bot - top)
    du = (i01 - i00) * (1 - b) + (i11 - i10) * b
    dv = bot - top
    zero = np.zeros_like(val)
    return np.where(valid, val, zero), np.where(valid, du, zero), np.where(valid, dv, zero), valid


def sample_bicubic_grad(img: np.ndarray, u, v):
    """Catmull-Rom lookup plus exact partial derivatives of the interpolant.

    The interpolant is C1, so its analytic gradient agrees with finite
    differences everywhere. Edge pixels are replicated for the outer taps.
    Returns ``(values, du, dv, valid)`` with validity as in
    :func:`sample_bilinear`.
    """
    h, w = img.shape
    u = np.asarray(u, dtype=float)
    v = np.asarray(v, dtype=float)
    valid = (u >= 0) & (v >= 0) & (u <= w - 1) & (v <= h - 1)
    uc = np.where(valid, u, 0.0)
    vc = np.where(valid, v, 0.0)
    x0 = np.minimum(np.floor(uc).astype(np.intp), max(w - 2, 0))
    y0 = np.minimum(np.floor(vc).astype(np.intp), max(h - 2, 0))
    wx, dwx = _catmull_rom(uc - x0)
    wy, dwy = _catmull_rom(vc - y0)
    offs = np.arange(-1, 3)
    xs = np.clip(x0[..., None] + offs, 0, w - 1)
    ys = np.clip(y0[..., None] + offs, 0, h - 1)
    patch = img[ys[..., :, None], xs[..., None, :]]
    rows = np.einsum("...ij,...j->...i", patch, wx)
    drows = np.einsum("...ij,...j->...i", patch, dwx)
    val = np.einsum("...i,...i->...", rows, wy)
    du = np.einsum("...i,...i->...", drows, wy)
    dv = np.einsum("...i,...i->...", rows, dwy)
    zero = np.zeros_like(val)
    return np.where(valid, val, zero), np.where(valid, du, zero), np.where(valid, dv, zero), valid


def _catmull_rom(t):
    t = t[..., None]
    t2, t3 = t * t, t * t * t
    wts = np.concatenate(
        [(-t3 + 2 * t2 - t), (3 * t3 - 5 * t2 + 2), (-3 * t3 + 4 * t2 + t), (t3 - t2)], axis=-1
    ) * 0.5
    dw = np.concatenate(
        [(-3 * t2 + 4 * t - 1), (9 * t2 - 10 * t), (-9 * t2 + 8 * t + 1), (3 * t2 - 2 * t)], axis=-1
    ) * 0.5
    return wts, dw


def distort_normalized(x, y, dist: DistortionCoefficients):
    """Radial-tangential (Brown-Conrady) model on normalized coordinates."""
    k1, k2, p1, p2, k3 = dist.as_array()
    r2 = x * x + y * y
    radial = 1.0 + r2 * (k1 + r2 * (k2 + r2 * k3))
    xd = x * radial + 2.0 * p1 * x * y + p2 * (r2 + 2.0 * x * x)
    yd = y * radial + p1 * (r2 + 2.0 * y * y) + 2.0 * p2 * x * y
    return xd, yd


def undistort_normalized(xd, yd, dist: DistortionCoefficients, iterations: int = 8):
    """Invert :func:`distort_normalized` by fixed-point iteration."""
    k1, k2, p1, p2, k3 = dist.as_array()
    x, y = np.array(xd, dtype=float), np.array(yd, dtype=float)
    for _ in range(iterations):
        r2 = x * x + y * y
        radial = 1.0 + r2 * (k1 + r2 * (k2 + r2 * k3))
        dx = 2.0 * p1 * x * y + p2 * (r2 + 2.0 * x * x)
        dy = p1 * (r2 + 2.0 * y * y) + 2.0 * p2 * x * y
        x = (xd - dx) / radial
        y = (yd - dy) / radial
    return x, y


@dataclass(frozen=True)
class UndistortMap:
    """Per-destination-pixel source coordinates, computed once and reused."""

    map_u: np.ndarray
    map_v: np.ndarray
    src_width: int
    src_height: int

    @property
    def shape(self):
        return self.map_u.shape

    def apply(self, image: Image) -> Image:
        if (image.width, image.height) != (self.src_width, self.src_height):
            raise CameraError(
                f"image is {image.width}x{image.height}, map expects {self.src_width}x{self.src_height}"
            )
        data = image.data
        planes = [data] if data.ndim == 2 else [data[:, :, c] for c in range(data.shape[2])]
        out = []
        for plane in planes:
            val, valid = sample_bilinear(plane.astype(float), self.map_u, self.map_v)
            out.append(np.where(valid, val, 0.0))
        res = out[0] if len(out) == 1 else np.stack(out, axis=-1)
        return Image(res, image.timestamp)


def build_undistort_map(model, dist: DistortionCoefficients | None = None,
                        output: PinholeIntrinsics | None = None) -> UndistortMap:
    """Lookup table from undistorted (output) pixels to source pixels.

    ``model`` is either :class:`PinholeIntrinsics` (with ``dist``) or
    :class:`OmniCamera`. ``output`` defaults to the source intrinsics for the
    pinhole model; it is required for the omnidirectional model.
    """
    if isinstance(model, PinholeIntrinsics):
        dist = dist or DistortionCoefficients()
        out = output or model
        uu, vv = np.meshgrid(np.arange(out.width, dtype=float), np.arange(out.height, dtype=float))
        x = (uu - out.cx) / out.fx
        y = (vv - out.cy) / out.fy
        xd, yd = distort_normalized(x, y, dist)
        return UndistortMap(model.fx * xd + model.cx, model.fy * yd + model.cy, model.width, model.height)
    if isinstance(model, OmniCamera):
        if output is None:
            raise CameraError("omnidirectional undistortion needs output pinhole intrinsics")
        return _omni_map(model, output)
    raise CameraError(f"unsupported camera model {type(model).__name__}")


def _omni_map(cam: OmniCamera, out: PinholeIntrinsics) -> UndistortMap:
    # angle from the optical axis as a function of sensor radius, inverted by table lookup
    r_max = float(np.hypot(max(cam.cx, cam.width - cam.cx), max(cam.cy, cam.height - cam.cy)))
    rho = np.linspace(0.0, r_max, 4096)
    angle = np.arctan2(rho, omni_projection(rho, cam.poly))
    # keep the leading monotone part only
    inc = np.concatenate([[True], np.diff(angle) > 0])
    stop = int(np.argmin(inc)) if not inc.all() else len(inc)
    rho, angle = rho[:stop], angle[:stop]
    uu, vv = np.meshgrid(np.arange(out.width, dtype=float), np.arange(out.height, dtype=float))
    x = (uu - out.cx) / out.fx
    y = (vv - out.cy) / out.fy
    r = np.hypot(x, y)
    theta = np.arctan(r)
    src_r = np.interp(theta, angle, rho, right=np.inf)
    with np.errstate(invalid="ignore", divide="ignore"):
        scale = np.where(r > 0, src_r / r, 0.0)
    ok = np.isfinite(scale)
    scale = np.where(ok, scale, 0.0)
    map_u = np.where(ok, cam.cx + x * scale, -1.0)
    map_v = np.where(ok, cam.cy + y * scale, -1.0)
    return UndistortMap(map_u, map_v, cam.width, cam.height)


def undistort(image: Image, model, dist: DistortionCoefficients | None = None,
              output: PinholeIntrinsics | None = None) -> Image:
    """Undistort one frame. Unmapped destination pixels are black."""
    w, h = (model.width, model.height)
    if (image.width, image.height) != (w, h):
        raise CameraError(f"image is {image.width}x{image.height}, model expects {w}x{h}")
    return build_undistort_map(model, dist, output).apply(image)


def distort_image(image: Image, intr: PinholeIntrinsics, dist: DistortionCoefficients) -> Image:
    """Synthesize what a distorting lens would record of an ideal pinhole frame."""
    uu, vv = np.meshgrid(np.arange(intr.width, dtype=float), np.arange(intr.height, dtype=float))
    x, y = undistort_normalized((uu - intr.cx) / intr.fx, (vv - intr.cy) / intr.fy, dist)
    m = UndistortMap(intr.fx * x + intr.cx, intr.fy * y + intr.cy, intr.width, intr.height)
    return m.apply(image)


def extract_roi(image: Image, roi: RegionOfInterest) -> Image:
    roi.check(image.width, image.height)
    data = image.data[roi.y : roi.y + roi.h, roi.x : roi.x + roi.w].copy()
    return Image(data, image.timestamp)


def resize_frame(image: Image, new_width: int, new_height: int) -> Image:
    """Bilinear resize with pixel-center alignment (OpenCV ``INTER_LINEAR``)."""
    if new_width <= 0 or new_height <= 0:
        raise CameraError("target size must be positive")
    if (new_width, new_height) == (image.width, image.height):
        return Image(image.data.copy(), image.timestamp)
    sx = image.width / new_width
    sy = image.height / new_height
    u = np.clip((np.arange(new_width) + 0.5) * sx - 0.5, 0, image.width - 1)
    v = np.clip((np.arange(new_height) + 0.5) * sy - 0.5, 0, image.height - 1)
    x0 = np.floor(u).astype(np.intp)
    y0 = np.floor(v).astype(np.intp)
    x1 = np.minimum(x0 + 1, image.width - 1)
    y1 = np.minimum(y0 + 1, image.height - 1)
    a = (u - x0)[None, :]
    b = (v - y0)[:, None]
    data = image.data.astype(float)
    if data.ndim == 3:
        a, b = a[..., None], b[..., None]
    top = data[y0][:, x0] * (1 - a) + data[y0][:, x1] * a
    bot = data[y1][:, x0] * (1 - a) + data[y1][:, x1] * a
    return Image(top * (1 - b) + bot * b, image.timestamp)


@dataclass
class CameraConfig:
    """Contents of a ``key = value`` camera file."""

    model: str = "pinhole"
    intrinsics: PinholeIntrinsics | None = None
    distortion: DistortionCoefficients = field(default_factory=DistortionCoefficients)
    omni: OmniCamera | None = None
    roi: RegionOfInterest | None = None

    @property
    def width(self) -> int:
        return self.intrinsics.width

    @property
    def height(self) -> int:
        return self.intrinsics.height


def read_key_values(path) -> dict[str, str]:
    out = {}
    for lineno, raw in enumerate(Path(path).read_text().splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise CameraError(f"{path}:{lineno}: expected key = value")
        key, value = line.split("=", 1)
        out[key.strip().lower()] = value.strip()
    return out


def parse_camera_config(values: dict[str, str]) -> CameraConfig:
    def num(key, default=None):
        if key not in values:
            if default is None:
                raise CameraError(f"camera config is missing '{key}'")
            return default
        return float(values[key])

    model = values.get("model", "pinhole").lower()
    width, height = int(num("width")), int(num("height"))
    roi = None
    if "roi_x" in values:
        roi = RegionOfInterest(int(num("roi_x")), int(num("roi_y")), int(num("roi_w")), int(num("roi_h")))
        roi.check(width, height)
    if model == "pinhole":
        intr = PinholeIntrinsics(num("fx"), num("fy"), num("cx"), num("cy"), width, height)
        dist = DistortionCoefficients(*(num(k, 0.0) for k in ("k1", "k2", "p1", "p2", "k3")))
        return CameraConfig("pinhole", intr, dist, None, roi)
    if model == "omni":
        poly = OmniPolynomial(tuple(num(f"a{i}", 0.0) for i in range(6)))
        cx = num("cx", (width - 1) / 2.0)
        cy = num("cy", (height - 1) / 2.0)
        omni = OmniCamera(poly, cx, cy, width, height)
        # output pinhole camera for the undistorted frame
        f = num("fx", width / 2.0)
        intr = PinholeIntrinsics(f, num("fy", f), cx, cy, width, height)
        return CameraConfig("omni", intr, DistortionCoefficients(), omni, roi)
    raise CameraError(f"unknown camera model '{model}'")


def load_camera_config(path) -> CameraConfig:
    return parse_camera_config(read_key_values(path))


def write_camera_config(cfg: CameraConfig, path) -> None:
    intr = cfg.intrinsics
    lines = [f"model = {cfg.model}", f"width = {intr.width}", f"height = {intr.height}",
             f"fx = {float(intr.fx)!r}", f"fy = {float(intr.fy)!r}", f"cx = {float(intr.cx)!r}", f"cy = {float(intr.cy)!r}"]
    if cfg.model == "pinhole":
        for k, v in zip(("k1", "k2", "p1", "p2", "k3"), cfg.distortion.as_array()):
            lines.append(f"{k} = {float(v)!r}")
    else:
        lines += [f"a{i} = {float(a)!r}" for i, a in enumerate(cfg.omni.poly.coeffs)]
    if cfg.roi is not None:
        r = cfg.roi
        lines += [f"roi_x = {r.x}", f"roi_y = {r.y}", f"roi_w = {r.w}", f"roi_h = {r.h}"]
    Path(path).write_text("\n".join(lines) + "\n")


# --- image files -----------------------------------------------------------


def _pnm_tokens(raw: bytes, count: int):
    tokens, pos = [], 2
    while len(tokens) < count:
        while raw[pos : pos + 1].isspace():
            pos += 1
        if raw[pos : pos + 1] == b"#":
            while raw[pos : pos + 1] not in (b"\n", b""):
                pos += 1
            continue
        start = pos
        while not raw[pos : pos + 1].isspace():
            pos += 1
        tokens.append(int(raw[start:pos]))
    return tokens, pos + 1


def read_pnm(path) -> np.ndarray:
    """Read binary PGM (P5) or PPM (P6), 8 or 16 bit."""
    raw = Path(path).read_bytes()
    magic = raw[:2]
    if magic not in (b"P5", b"P6"):
        raise CameraError(f"{path}: unsupported PNM magic {magic!r}")
    (w, h, maxval), offset = _pnm_tokens(raw, 3)
    channels = 1 if magic == b"P5" else 3
    dtype = np.dtype(">u2") if maxval > 255 else np.uint8
    data = np.frombuffer(raw, dtype=dtype, count=w * h * channels, offset=offset)
    shape = (h, w) if channels == 1 else (h, w, 3)
    return data.reshape(shape).astype(np.uint16 if maxval > 255 else np.uint8)


def write_pnm(path, data: np.ndarray) -> None:
    data = np.asarray(data)
    if data.ndim == 3 and data.shape[2] == 4:
        data = data[:, :, :3]
    magic = b"P5" if data.ndim == 2 else b"P6"
    maxval = 65535 if data.dtype == np.uint16 else 255
    h, w = data.shape[:2]
    body = data.astype(">u2").tobytes() if maxval > 255 else data.astype(np.uint8).tobytes()
    Path(path).write_bytes(magic + f"\n{w} {h}\n{maxval}\n".encode() + body)


def load_image(path, timestamp: int = 0) -> Image:
    path = Path(path)
    if path.suffix.lower() in (".pgm", ".ppm", ".pnm"):
        data = read_pnm(path)
        if data.dtype != np.uint8:
            raise CameraError(f"{path}: 16-bit images are not frames")
    else:
        from PIL import Image as PILImage

        with PILImage.open(path) as im:
            data = np.asarray(im.convert("L") if im.mode not in ("L", "RGB", "RGBA") else im)
    return Image(data, timestamp)


def save_image(image: Image, path) -> None:
    path = Path(path)
    if path.suffix.lower() in (".pgm", ".ppm", ".pnm"):
        write_pnm(path, image.data)
    else:
        from PIL import Image as PILImage

        PILImage.fromarray(image.data).save(path)

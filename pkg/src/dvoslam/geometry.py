"""Rigid (SE(3)) and similarity (Sim(3)) transforms.

Twist ordering is ``(v, w)`` for se(3) and ``(v, w, sigma)`` for sim(3), where
``v`` is the translational part, ``w`` the rotation vector and ``sigma`` the
log-scale.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

SMALL_ANGLE = 1e-8


class GeometryError(ValueError):
    pass


def hat(w):
    """Skew-symmetric matrix such that ``hat(w) @ x == cross(w, x)``."""
    return np.array(
        [[0.0, -w[2], w[1]], [w[2], 0.0, -w[0]], [-w[1], w[0], 0.0]], dtype=float
    )


def vee(m):
    return np.array([m[2, 1] - m[1, 2], m[0, 2] - m[2, 0], m[1, 0] - m[0, 1]]) * 0.5


def is_rotation(m, tol=1e-6) -> bool:
    m = np.asarray(m, dtype=float)
    if m.shape != (3, 3) or not np.all(np.isfinite(m)):
        return False
    return bool(np.max(np.abs(m.T @ m - np.eye(3))) <= tol and abs(np.linalg.det(m) - 1.0) <= tol)


def so3_exp(w) -> np.ndarray:
    w = np.asarray(w, dtype=float)
    theta2 = float(w @ w)
    theta = np.sqrt(theta2)
    W = hat(w)
    if theta < SMALL_ANGLE:
        a = 1.0 - theta2 / 6.0
        b = 0.5 - theta2 / 24.0
    else:
        a = np.sin(theta) / theta
        b = (1.0 - np.cos(theta)) / theta2
    return np.eye(3) + a * W + b * (W @ W)


def so3_log(R) -> np.ndarray:
    R = np.asarray(R, dtype=float)
    s = vee(R)
    sin_t = np.linalg.norm(s)
    cos_t = 0.5 * (np.trace(R) - 1.0)
    theta = np.arctan2(sin_t, cos_t)
    if theta >= np.pi - 1e-6:
        raise GeometryError(f"rotation angle {theta:.9f} too close to pi for a unique log")
    if theta < SMALL_ANGLE:
        return s * (1.0 + theta * theta / 6.0)
    return s * (theta / sin_t)


def rotation_angle(R) -> float:
    R = np.asarray(R, dtype=float)
    return float(np.arctan2(np.linalg.norm(vee(R)), 0.5 * (np.trace(R) - 1.0)))


def _se3_left_jacobian(w) -> np.ndarray:
    theta2 = float(w @ w)
    theta = np.sqrt(theta2)
    W = hat(w)
    if theta < SMALL_ANGLE:
        b = 0.5 - theta2 / 24.0
        c = 1.0 / 6.0 - theta2 / 120.0
    else:
        b = (1.0 - np.cos(theta)) / theta2
        c = (theta - np.sin(theta)) / (theta2 * theta)
    return np.eye(3) + b * W + c * (W @ W)


def _sim3_coefficients(sigma: float, theta: float):
    """Coefficients of ``W = a I + b hat(w) + c hat(w)^2``.

    ``W`` is the integral of ``exp(sigma * tau) * exp(tau * hat(w))`` over
    ``tau`` in [0, 1].
    """
    if abs(sigma) < SMALL_ANGLE:
        a = 1.0 + sigma / 2.0 + sigma * sigma / 6.0
    else:
        a = np.expm1(sigma) / sigma
    if theta < SMALL_ANGLE:
        # moments of exp(sigma * tau): int tau^k exp(sigma tau)
        b = _exp_moment(sigma, 1)
        c = 0.5 * _exp_moment(sigma, 2)
        return a, b, c
    z = complex(sigma, theta)
    if abs(z) < 1e-4:
        integral = 1.0 + z / 2.0 + z * z / 6.0 + z**3 / 24.0
    else:
        integral = (np.exp(z) - 1.0) / z
    b = integral.imag / theta
    c = (a - integral.real) / (theta * theta)
    return a, b, c


def _exp_moment(sigma: float, k: int) -> float:
    if abs(sigma) < 1e-3:
        # series: sum_n sigma^n / (n! (n + k + 1))
        total, term = 0.0, 1.0
        for n in range(12):
            total += term / (n + k + 1)
            term *= sigma / (n + 1)
        return total
    e = np.exp(sigma)
    if k == 1:
        return (e * (sigma - 1.0) + 1.0) / sigma**2
    return (e * (sigma * sigma - 2.0 * sigma + 2.0) - 2.0) / sigma**3


def _sim3_W(w, sigma: float) -> np.ndarray:
    theta = float(np.linalg.norm(w))
    a, b, c = _sim3_coefficients(sigma, theta)
    W = hat(w)
    return a * np.eye(3) + b * W + c * (W @ W)


@dataclass(frozen=True)
class RigidPose:
    """Rigid motion ``x -> R x + t``."""

    R: np.ndarray = field(default_factory=lambda: np.eye(3))
    t: np.ndarray = field(default_factory=lambda: np.zeros(3))

    def __post_init__(self):
        object.__setattr__(self, "R", np.array(self.R, dtype=float).reshape(3, 3))
        object.__setattr__(self, "t", np.array(self.t, dtype=float).reshape(3))

    @classmethod
    def identity(cls) -> "RigidPose":
        return cls()

    @classmethod
    def exp(cls, xi) -> "RigidPose":
        xi = np.asarray(xi, dtype=float).reshape(6)
        if not np.all(np.isfinite(xi)):
            raise GeometryError("twist has non-finite components")
        v, w = xi[:3], xi[3:]
        return cls(so3_exp(w), _se3_left_jacobian(w) @ v)

    def log(self) -> np.ndarray:
        w = so3_log(self.R)
        v = np.linalg.solve(_se3_left_jacobian(w), self.t)
        return np.concatenate([v, w])

    def compose(self, other: "RigidPose") -> "RigidPose":
        return RigidPose(self.R @ other.R, self.R @ other.t + self.t)

    __matmul__ = compose

    def inverse(self) -> "RigidPose":
        Rt = self.R.T
        return RigidPose(Rt, -Rt @ self.t)

    def apply(self, x) -> np.ndarray:
        """Transform one point (3,) or many points (N, 3)."""
        x = np.asarray(x, dtype=float)
        return x @ self.R.T + self.t

    def matrix(self) -> np.ndarray:
        m = np.eye(4)
        m[:3, :3] = self.R
        m[:3, 3] = self.t
        return m

    def to_sim3(self) -> "SimTransform":
        return SimTransform(self.R, self.t, 1.0)

    def serialize(self) -> str:
        return " ".join(f"{v:.17g}" for v in np.concatenate([self.R.ravel(), self.t]))

    @classmethod
    def parse(cls, text: str) -> "RigidPose":
        vals = [float(v) for v in text.split()]
        if len(vals) != 12:
            raise GeometryError(f"expected 12 numbers for an SE(3) transform, got {len(vals)}")
        return cls(np.reshape(vals[:9], (3, 3)), vals[9:])


@dataclass(frozen=True)
class SimTransform:
    """Similarity transform ``x -> s R x + t``."""

    R: np.ndarray = field(default_factory=lambda: np.eye(3))
    t: np.ndarray = field(default_factory=lambda: np.zeros(3))
    s: float = 1.0

    def __post_init__(self):
        object.__setattr__(self, "R", np.array(self.R, dtype=float).reshape(3, 3))
        object.__setattr__(self, "t", np.array(self.t, dtype=float).reshape(3))
        object.__setattr__(self, "s", float(self.s))
        if not self.s > 0.0:
            raise GeometryError(f"similarity scale must be positive, got {self.s}")

    @classmethod
    def identity(cls) -> "SimTransform":
        return cls()

    @classmethod
    def exp(cls, xi) -> "SimTransform":
        xi = np.asarray(xi, dtype=float).reshape(7)
        if not np.all(np.isfinite(xi)):
            raise GeometryError("twist has non-finite components")
        v, w, sigma = xi[:3], xi[3:6], float(xi[6])
        return cls(so3_exp(w), _sim3_W(w, sigma) @ v, np.exp(sigma))

    def log(self) -> np.ndarray:
        w = so3_log(self.R)
        sigma = np.log(self.s)
        v = np.linalg.solve(_sim3_W(w, sigma), self.t)
        return np.concatenate([v, w, [sigma]])

    def compose(self, other) -> "SimTransform":
        if isinstance(other, RigidPose):
            other = other.to_sim3()
        return SimTransform(self.R @ other.R, self.s * (self.R @ other.t) + self.t, self.s * other.s)

    __matmul__ = compose

    def inverse(self) -> "SimTransform":
        Rt = self.R.T
        return SimTransform(Rt, -(Rt @ self.t) / self.s, 1.0 / self.s)

    def apply(self, x) -> np.ndarray:
        x = np.asarray(x, dtype=float)
        return self.s * (x @ self.R.T) + self.t

    def matrix(self) -> np.ndarray:
        m = np.eye(4)
        m[:3, :3] = self.s * self.R
        m[:3, 3] = self.t
        return m

    def rigid(self) -> RigidPose:
        """Drop the scale."""
        return RigidPose(self.R, self.t)

    def serialize(self) -> str:
        vals = np.concatenate([self.R.ravel(), self.t, [self.s]])
        return " ".join(f"{v:.17g}" for v in vals)

    @classmethod
    def parse(cls, text: str) -> "SimTransform":
        vals = [float(v) for v in text.split()]
        if len(vals) != 13:
            raise GeometryError(f"expected 13 numbers for a Sim(3) transform, got {len(vals)}")
        return cls(np.reshape(vals[:9], (3, 3)), vals[9:12], vals[12])


def se3_exp(xi) -> RigidPose:
    return RigidPose.exp(xi)


def se3_log(p: RigidPose) -> np.ndarray:
    return p.log()


def sim3_exp(xi) -> SimTransform:
    return SimTransform.exp(xi)


def sim3_log(t: SimTransform) -> np.ndarray:
    return t.log()


def compose(a, b):
    return a.compose(b)


def inverse(a):
    return a.inverse()


def apply(t, x) -> np.ndarray:
    return t.apply(x)


def convert_rotation_convention(m) -> np.ndarray:
    """Tracker rotation to the renderer's convention.

    Transpose, then negate the four elements that couple the y axis to x and
    z. Equivalent to ``S @ m.T @ S`` with ``S = diag(1, -1, 1)``; applying it
    twice returns the input.
    """
    m = np.asarray(m, dtype=float)
    if m.shape != (3, 3) or not np.all(np.isfinite(m)):
        raise GeometryError("rotation must be a finite 3x3 matrix")
    if np.max(np.abs(m.T @ m - np.eye(3))) > 1e-6:
        raise GeometryError("rotation matrix is not orthonormal")
    out = m.T.copy()
    for r, c in ((0, 1), (1, 0), (1, 2), (2, 1)):
        out[r, c] *= -1.0
    return out


def rotation_to_quaternion(R) -> np.ndarray:
    """Unit quaternion ``(qx, qy, qz, qw)`` with ``qw >= 0``."""
    R = np.asarray(R, dtype=float)
    tr = np.trace(R)
    if tr > 0.0:
        S = np.sqrt(tr + 1.0) * 2.0
        q = np.array([(R[2, 1] - R[1, 2]) / S, (R[0, 2] - R[2, 0]) / S, (R[1, 0] - R[0, 1]) / S, 0.25 * S])
    elif R[0, 0] > R[1, 1] and R[0, 0] > R[2, 2]:
        S = np.sqrt(1.0 + R[0, 0] - R[1, 1] - R[2, 2]) * 2.0
        q = np.array([0.25 * S, (R[0, 1] + R[1, 0]) / S, (R[0, 2] + R[2, 0]) / S, (R[2, 1] - R[1, 2]) / S])
    elif R[1, 1] > R[2, 2]:
        S = np.sqrt(1.0 + R[1, 1] - R[0, 0] - R[2, 2]) * 2.0
        q = np.array([(R[0, 1] + R[1, 0]) / S, 0.25 * S, (R[1, 2] + R[2, 1]) / S, (R[0, 2] - R[2, 0]) / S])
    else:
        S = np.sqrt(1.0 + R[2, 2] - R[0, 0] - R[1, 1]) * 2.0
        q = np.array([(R[0, 2] + R[2, 0]) / S, (R[1, 2] + R[2, 1]) / S, 0.25 * S, (R[1, 0] - R[0, 1]) / S])
    q /= np.linalg.norm(q)
    if q[3] < 0.0:
        q = -q
    return q


def quaternion_to_rotation(q) -> np.ndarray:
    x, y, z, w = np.asarray(q, dtype=float) / np.linalg.norm(q)
    return np.array(
        [
            [1 - 2 * (y * y + z * z), 2 * (x * y - z * w), 2 * (x * z + y * w)],
            [2 * (x * y + z * w), 1 - 2 * (x * x + z * z), 2 * (y * z - x * w)],
            [2 * (x * z - y * w), 2 * (y * z + x * w), 1 - 2 * (x * x + y * y)],
        ]
    )


def rot_x(angle: float) -> np.ndarray:
    return so3_exp([angle, 0.0, 0.0])


def rot_y(angle: float) -> np.ndarray:
    return so3_exp([0.0, angle, 0.0])


def rot_z(angle: float) -> np.ndarray:
    return so3_exp([0.0, 0.0, angle])

"""Registration fixtures: analytic blob images, a dense ICP test surface and naive metric oracles."""

import math

import numpy as np

from dvoslam.geometry import RigidPose
from dvoslam.registration import Surface, icp_align


class BlobField:
    def __init__(self, seed, n=40, size=96):
        rng = np.random.default_rng(seed)
        self.c = rng.uniform(-10, size + 10, (n, 2))
        self.s = rng.uniform(3.0, 9.0, n)
        self.a = rng.uniform(-1.0, 1.0, n)
        self.size = size

    def __call__(self, x, y):
        d2 = (x[..., None] - self.c[:, 0]) ** 2 + (y[..., None] - self.c[:, 1]) ** 2
        v = np.sum(self.a * np.exp(-d2 / (2 * self.s**2)), axis=-1)
        return np.clip(128 + 60 * v, 0, 255)

    def image(self, tx=0.0, ty=0.0, angle_deg=0.0):
        """Sample f(R(x - c) + c + t) on the pixel grid (R about the image center)."""
        n = self.size
        y, x = np.mgrid[0:n, 0:n].astype(float)
        c = (n - 1) / 2.0
        a = np.radians(angle_deg)
        xs = np.cos(a) * (x - c) - np.sin(a) * (y - c) + c + tx
        ys = np.sin(a) * (x - c) + np.cos(a) * (y - c) + c + ty
        return self(xs, ys)


def bumpy_surface(n, rng):
    """Dense samples of an asymmetric bumpy ellipsoid (no sliding symmetries)."""
    v = rng.normal(size=(n, 3))
    v /= np.linalg.norm(v, axis=1, keepdims=True)
    r = 1 + 0.3 * np.sin(4 * v[:, 0] + 1) * np.cos(3 * v[:, 1]) + 0.3 * np.sin(5 * v[:, 2])
    return v * r[:, None] * np.array([1.0, 0.7, 0.5])


def icp_trial(seed, n_surface=200000, n_points=1000):
    rng = np.random.default_rng(seed)
    surf = bumpy_surface(n_surface, rng)
    pts0 = surf[rng.choice(len(surf), n_points, replace=False)]
    axis = rng.normal(size=3)
    axis /= np.linalg.norm(axis)
    d = rng.normal(size=3)
    G = RigidPose.exp(np.r_[0.05 * d / np.linalg.norm(d), np.radians(5) * axis])
    r = icp_align(G.apply(pts0), Surface(surf), max_iters=50)
    return r, G


# --- naive oracles ---------------------------------------------------------------


def oracle_ssd(A, B):
    s = 0.0
    for i in range(A.shape[0]):
        for j in range(A.shape[1]):
            s += (float(A[i, j]) - float(B[i, j])) ** 2
    return s / A.size


def oracle_sad(A, B):
    s = 0.0
    for i in range(A.shape[0]):
        for j in range(A.shape[1]):
            s += abs(float(A[i, j]) - float(B[i, j]))
    return s / A.size


def oracle_ncc(A, B):
    n = A.size
    ma = sum(float(v) for v in A.ravel()) / n
    mb = sum(float(v) for v in B.ravel()) / n
    num = saa = sbb = 0.0
    for a, b in zip(A.ravel(), B.ravel()):
        num += (a - ma) * (b - mb)
        saa += (a - ma) ** 2
        sbb += (b - mb) ** 2
    return num / math.sqrt(saa * sbb)


def oracle_hist(A, B, bins):
    h = [[0] * bins for _ in range(bins)]
    for a, b in zip(A.ravel(), B.ravel()):
        h[int(a) * bins // 256][int(b) * bins // 256] += 1
    return np.array(h)


def oracle_entropies(h):
    n = float(sum(sum(r) for r in h))
    B = len(h)
    hab = ha = hb = 0.0
    for i in range(B):
        pa = sum(h[i][j] for j in range(B)) / n
        if pa > 0:
            ha -= pa * math.log2(pa)
        pb = sum(h[j][i] for j in range(B)) / n
        if pb > 0:
            hb -= pb * math.log2(pb)
        for j in range(B):
            p = h[i][j] / n
            if p > 0:
                hab -= p * math.log2(p)
    mi = 0.0
    for i in range(B):
        for j in range(B):
            p = h[i][j] / n
            if p > 0:
                pa = sum(h[i][k] for k in range(B)) / n
                pb = sum(h[k][j] for k in range(B)) / n
                mi += p * math.log2(p / (pa * pb))
    return ha, hb, hab, mi

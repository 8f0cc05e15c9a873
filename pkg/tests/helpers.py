"""Random camera setups and small reference implementations shared by tests."""
from __future__ import annotations

import math

import numpy as np

from ptlane.geometry import CameraIntrinsics, ViewSpec


def rot_x(a):
    c, s = math.cos(a), math.sin(a)
    return np.array([[1, 0, 0], [0, c, -s], [0, s, c]], dtype=float)


def rot_z(a):
    c, s = math.cos(a), math.sin(a)
    return np.array([[c, -s, 0], [s, c, 0], [0, 0, 1]], dtype=float)


class RandomRoadCamera:
    """Pitched and rolled camera over flat ground, with a ground quad as key points."""

    def __init__(self, rng):
        self.width = int(rng.integers(64, 257))
        self.height = int(rng.integers(64, 257))
        self.f = float(rng.uniform(80, 400))
        self.k = CameraIntrinsics(self.f, self.width / 2 + rng.uniform(-5, 5),
                                  self.height / 2 + rng.uniform(-5, 5))
        self.view = ViewSpec(self.k, self.width, self.height)
        self.pitch = float(rng.uniform(0.08, 0.8))
        self.roll = float(rng.uniform(-0.2, 0.2))
        self.cam_height = float(rng.uniform(1.0, 3.0))
        tilt = rot_z(self.roll)
        self.normal = tilt @ np.array([0.0, math.cos(self.pitch), math.sin(self.pitch)])
        self.lateral = tilt @ np.array([1.0, 0.0, 0.0])
        self.forward = tilt @ np.array([0.0, -math.sin(self.pitch), math.cos(self.pitch)])
        # pick the quad's near and far edges on visible rows below the horizon
        horizon_row = self.k.cy - self.f * math.tan(self.pitch)
        top = max(horizon_row, 0.0) + 0.1 * self.height
        near_row = float(rng.uniform(0.8, 0.95)) * self.height
        far_row = float(rng.uniform(top, max(top + 1.0, 0.6 * self.height)))
        near = self._row_distance(near_row)
        far = max(self._row_distance(far_row), near + 1.0)
        half = float(rng.uniform(0.5, 1.0)) * near * self.width / (2 * self.f)
        self.ground_quad = [(-half, near), (half, near), (half, far), (-half, far)]
        self.keypoints = self.project_ground(self.ground_quad)

    def _row_distance(self, row):
        b = (row - self.k.cy) / self.f
        c, s = math.cos(self.pitch), math.sin(self.pitch)
        return self.cam_height * (c - s * b) / (c * b + s)

    def ground_point(self, x, z):
        return x * self.lateral + z * self.forward + self.cam_height * self.normal

    def project_ground(self, xz):
        pts = np.array([self.ground_point(x, z) for x, z in xz])
        pix = pts @ self.k.matrix.T
        return pix[:, :2] / pix[:, 2:3]

    @property
    def horizon(self):
        line = np.linalg.inv(self.k.matrix).T @ self.normal
        xs = (0.0, float(self.width - 1))
        return tuple((x, -(line[0] * x + line[2]) / line[1]) for x in xs)


def matrix_exp(a, terms=20):
    """Truncated power series; plenty for rotation generators of norm < pi."""
    out = np.eye(3)
    term = np.eye(3)
    for k in range(1, terms + 1):
        term = term @ a / k
        out = out + term
    return out


def naive_warp(src, hinv, out_h, out_w, orientation=1.0):
    """Per-pixel loop reference for inverse bilinear sampling with zero padding."""
    C, H, W = src.shape
    out = np.zeros((C, out_h, out_w))
    for i in range(out_h):
        for j in range(out_w):
            p = hinv @ np.array([j, i, 1.0])
            if orientation * p[2] <= 1e-12:
                continue
            sx, sy = p[0] / p[2], p[1] / p[2]
            if not (-1 < sx < W and -1 < sy < H):
                continue
            x0, y0 = math.floor(sx), math.floor(sy)
            ax, ay = sx - x0, sy - y0
            for dy, wy in ((0, 1 - ay), (1, ay)):
                for dx, wx in ((0, 1 - ax), (1, ax)):
                    yy, xx = y0 + dy, x0 + dx
                    if 0 <= yy < H and 0 <= xx < W:
                        out[:, i, j] += wy * wx * src[:, yy, xx]
    return out


def gaussian_blobs(shape, rng, count=6, sigma=(4.0, 9.0)):
    H, W = shape
    yy, xx = np.mgrid[0:H, 0:W].astype(float)
    img = np.zeros((3, H, W))
    for _ in range(count):
        cy, cx = rng.uniform(0, H), rng.uniform(0, W)
        s = rng.uniform(*sigma)
        blob = np.exp(-((yy - cy) ** 2 + (xx - cx) ** 2) / (2 * s * s))
        img += rng.uniform(0.2, 1.0, size=(3, 1, 1)) * blob
    return img


def psnr(a, b, peak):
    mse = float(np.mean((a - b) ** 2))
    return math.inf if mse == 0 else 10 * math.log10(peak * peak / mse)

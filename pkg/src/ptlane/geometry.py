"""Camera geometry for consecutive perspective transforms.

Conventions: camera x right, y down, z forward.  Pixel coordinates are
homogeneous ``(x, y, 1)`` with pixel ``(row i, col j)`` at ``(j, i)``.
Rotations passed to homography builders are *point* rotations: a point
with coordinates ``X`` in the source camera has coordinates ``R @ X`` in the
target camera.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .errors import (
    AmbiguousAxis,
    DegenerateHorizon,
    EmptyBoundingBox,
    GeometryError,
    InvalidStepCount,
    KeyPointBehindCamera,
    SingularHomography,
)

E3 = np.array([0.0, 0.0, 1.0])

FRONT_EPS = 1e-6
DET_EPS = 1e-12


def _vec3(v) -> np.ndarray:
    a = np.asarray(v, dtype=np.float64).reshape(-1)
    if a.shape != (3,):
        raise GeometryError(f"expected a 3-vector, got shape {a.shape}")
    if not np.all(np.isfinite(a)):
        raise GeometryError("vector has non-finite components")
    return a


@dataclass(frozen=True)
class CameraIntrinsics:
    f: float
    cx: float
    cy: float

    def __post_init__(self):
        if not (self.f > 0 and math.isfinite(self.f)):
            raise GeometryError(f"focal length must be positive, got {self.f}")
        if not (math.isfinite(self.cx) and math.isfinite(self.cy)):
            raise GeometryError("principal point must be finite")

    @property
    def matrix(self) -> np.ndarray:
        return np.array([[self.f, 0.0, self.cx], [0.0, self.f, self.cy], [0.0, 0.0, 1.0]])

    @property
    def inverse(self) -> np.ndarray:
        f = self.f
        return np.array(
            [[1.0 / f, 0.0, -self.cx / f], [0.0, 1.0 / f, -self.cy / f], [0.0, 0.0, 1.0]]
        )


@dataclass(frozen=True)
class GroundPlane:
    """Plane ``n . X = d`` in camera coordinates; ``n`` points at the ground."""

    n: tuple
    d: float

    def __post_init__(self):
        n = _vec3(self.n)
        if abs(np.linalg.norm(n) - 1.0) > 1e-12:
            raise GeometryError("ground normal must be unit length")
        if not self.d > 0:
            raise GeometryError("plane distance must be positive")
        object.__setattr__(self, "n", tuple(float(c) for c in n))

    @property
    def normal(self) -> np.ndarray:
        return np.array(self.n)


@dataclass(frozen=True)
class ViewSpec:
    intrinsics: CameraIntrinsics
    width: int
    height: int

    def __post_init__(self):
        if int(self.width) < 1 or int(self.height) < 1:
            raise GeometryError(f"viewport must be at least 1x1, got {self.width}x{self.height}")
        object.__setattr__(self, "width", int(self.width))
        object.__setattr__(self, "height", int(self.height))

    @property
    def shape(self) -> tuple[int, int]:
        return (self.height, self.width)


def normalize_matrix(m) -> tuple[np.ndarray, float]:
    """Scale ``m`` to unit Frobenius norm with a non-negative (3,3) entry.

    Returns the normalized matrix and the sign that was applied.
    """
    m = np.asarray(m, dtype=np.float64)
    norm = np.linalg.norm(m)
    if not np.isfinite(norm) or norm == 0.0:
        raise SingularHomography("zero or non-finite homography")
    m = m / norm
    sign = 1.0
    if m[2, 2] < 0:
        m = -m
        sign = -1.0
    return m, sign


@dataclass(frozen=True, eq=False)
class Homography:
    """Projective map from source to target pixel coordinates.

    ``matrix`` is kept normalized.  ``orientation`` (+1 or -1) records the
    sign that makes ``orientation * matrix`` a positive multiple of the
    geometric map, so the warp can reject samples from behind a camera.
    """

    matrix: np.ndarray
    source: ViewSpec | None = None
    target: ViewSpec | None = None
    orientation: float = 1.0

    @classmethod
    def from_matrix(cls, m, source=None, target=None, orientation=1.0) -> "Homography":
        norm_m, sign = normalize_matrix(m)
        if abs(np.linalg.det(norm_m)) <= DET_EPS:
            raise SingularHomography("homography is not invertible")
        norm_m.setflags(write=False)
        return cls(norm_m, source, target, float(orientation) * sign)

    @classmethod
    def identity(cls, view: ViewSpec | None = None) -> "Homography":
        return cls.from_matrix(np.eye(3), view, view)

    def inverse(self) -> "Homography":
        try:
            inv = np.linalg.inv(self.matrix)
        except np.linalg.LinAlgError as exc:
            raise SingularHomography(str(exc)) from None
        return Homography.from_matrix(inv, self.target, self.source, self.orientation)

    def then(self, other: "Homography") -> "Homography":
        """Apply ``self`` first, then ``other``."""
        return Homography.from_matrix(
            other.matrix @ self.matrix, self.source, other.target,
            self.orientation * other.orientation,
        )

    def transfer(self, points) -> np.ndarray:
        """Map an ``(n, 2)`` array of source pixels to target pixels."""
        pts = np.atleast_2d(np.asarray(points, dtype=np.float64))
        hom = np.column_stack([pts[:, 0], pts[:, 1], np.ones(len(pts))]) @ self.matrix.T
        return hom[:, :2] / hom[:, 2:3]

    def __eq__(self, other):
        if not isinstance(other, Homography):
            return NotImplemented
        return (
            np.array_equal(self.matrix, other.matrix)
            and self.source == other.source
            and self.target == other.target
            and self.orientation == other.orientation
        )

    __hash__ = None


def relative_frobenius_error(a, b) -> float:
    """Distance between two homographies after normalizing both."""
    na, _ = normalize_matrix(a.matrix if isinstance(a, Homography) else a)
    nb, _ = normalize_matrix(b.matrix if isinstance(b, Homography) else b)
    return float(min(np.linalg.norm(na - nb), np.linalg.norm(na + nb)))


def horizon_to_ground_normal(p_left, p_right) -> np.ndarray:
    """Unit ground normal from two horizon directions in camera coordinates."""
    c = np.cross(_vec3(p_left), _vec3(p_right))
    norm = np.linalg.norm(c)
    if norm <= 1e-12:
        raise DegenerateHorizon("horizon directions are parallel")
    return c / norm


def ground_normal_to_axis_angle(n) -> np.ndarray:
    """Axis-angle vector of the rotation taking the optical axis onto ``n``."""
    n = _vec3(n)
    if abs(np.linalg.norm(n) - 1.0) > 1e-9:
        raise GeometryError("normal must be unit length")
    axis = np.cross(E3, n)
    s = np.linalg.norm(axis)
    c = float(E3 @ n)
    if s == 0.0 or s < 1e-15:
        if c > 0:
            return np.zeros(3)
        raise AmbiguousAxis("normal points along -z; rotation axis undefined")
    return axis / s * math.atan2(s, c)


def skew(v) -> np.ndarray:
    x, y, z = v
    return np.array([[0.0, -z, y], [z, 0.0, -x], [-y, x, 0.0]])


def axis_angle_to_rotation(omega) -> np.ndarray:
    """Rodrigues' formula."""
    omega = _vec3(omega)
    theta = np.linalg.norm(omega)
    if theta == 0.0:
        return np.eye(3)
    k = skew(omega / theta)
    return np.eye(3) + math.sin(theta) * k + (1.0 - math.cos(theta)) * (k @ k)


def split_rotation(omega, n_steps: int) -> list[np.ndarray]:
    """Divide the rotation angle evenly, keeping the axis fixed."""
    if int(n_steps) != n_steps or n_steps < 1:
        raise InvalidStepCount(f"step count must be a positive integer, got {n_steps}")
    step = axis_angle_to_rotation(_vec3(omega) / n_steps)
    return [step.copy() for _ in range(int(n_steps))]


def pure_rotation_homography(k_src: CameraIntrinsics, k_dst: CameraIntrinsics, rotation,
                             source=None, target=None) -> Homography:
    m = k_dst.matrix @ np.asarray(rotation, dtype=np.float64) @ k_src.inverse
    return Homography.from_matrix(m, source, target)


def plane_induced_homography(k_src: CameraIntrinsics, k_dst: CameraIntrinsics, rotation, t,
                             plane: GroundPlane, source=None, target=None) -> Homography:
    """Homography induced by ``plane`` between two cameras.

    Cameras are related by ``X_dst = R @ X_src - t``; the plane is given in
    source-camera coordinates.
    """
    if not plane.d > 0:
        raise GeometryError("plane distance must be positive")
    factor = np.asarray(rotation, dtype=np.float64) - np.outer(_vec3(t), plane.normal) / plane.d
    sv = np.linalg.svd(factor, compute_uv=False)
    if sv[-1] <= 1e-12 * sv[0]:
        raise SingularHomography("plane-induced factor is rank deficient")
    return Homography.from_matrix(k_dst.matrix @ factor @ k_src.inverse, source, target)


def translated_camera_intrinsics(k: CameraIntrinsics, t, d: float) -> CameraIntrinsics:
    """Intrinsics of a fixed camera that sees a fronto-parallel plane at
    depth ``d`` the way a camera translated by ``t`` does (``X' = X - t``)."""
    tx, ty, tz = _vec3(t)
    depth = d - tz
    if depth <= 0:
        raise GeometryError("translated camera is not in front of the plane")
    return CameraIntrinsics(k.f * d / depth, k.cx - k.f * tx / depth, k.cy - k.f * ty / depth)


def _as_keypoints(points) -> np.ndarray:
    pts = np.asarray(points, dtype=np.float64)
    if pts.ndim != 2 or pts.shape[1] not in (2, 3):
        raise GeometryError("key points must be an (n, 2) or (n, 3) array")
    if pts.shape[1] == 2:
        pts = np.column_stack([pts, np.ones(len(pts))])
    if len(pts) < 3:
        raise GeometryError("need at least 3 key points")
    if not np.all(np.isfinite(pts)):
        raise GeometryError("key points must be finite")
    return pts


def _rotated_normalized(k_i: CameraIntrinsics, rotation, keypoints) -> np.ndarray:
    pts = _as_keypoints(keypoints)
    cam = pts @ k_i.inverse.T
    rotated = cam @ np.asarray(rotation, dtype=np.float64).T
    z = rotated[:, 2]
    if np.any(z <= FRONT_EPS):
        bad = int(np.argmax(z <= FRONT_EPS))
        raise KeyPointBehindCamera(f"key point {bad} has depth {z[bad]:.3g} after rotation")
    return rotated / np.abs(z)[:, None]


def optimal_viewport(k_i: CameraIntrinsics, rotation, keypoints, width_next: int):
    """Smallest viewport of the rotated camera containing every key point.

    Returns ``(intrinsics, height)`` for a view ``width_next`` pixels wide.
    """
    if int(width_next) < 1:
        raise GeometryError("target width must be positive")
    p = _rotated_normalized(k_i, rotation, keypoints)
    left, top = p[:, 0].min(), p[:, 1].min()
    bb_width = p[:, 0].max() - left
    bb_height = p[:, 1].max() - top
    if bb_width < 1e-9 or bb_height < 1e-9:
        raise EmptyBoundingBox(f"key-point box is degenerate ({bb_width:.3g} x {bb_height:.3g})")
    f = width_next / bb_width
    height = f * bb_height
    # guard against 100.00000000001 rounding to 101
    height_px = max(1, math.ceil(height - 1e-9 * max(1.0, height)))
    return CameraIntrinsics(f, -f * left, -f * top), height_px


def project_keypoints(h: Homography, keypoints) -> np.ndarray:
    pts = _as_keypoints(keypoints)
    out = pts @ h.matrix.T
    return out / out[:, 2:3]


@dataclass(frozen=True, eq=False)
class ChainStep:
    rotation: np.ndarray
    homography: Homography


@dataclass(frozen=True, eq=False)
class PTLChain:
    steps: tuple
    integral: Homography
    meta: dict = field(default_factory=dict, compare=False)

    @property
    def n_steps(self) -> int:
        return len(self.steps)

    @property
    def views(self) -> list[ViewSpec]:
        if not self.steps:
            return [self.integral.source]
        return [self.steps[0].homography.source] + [s.homography.target for s in self.steps]

    def composed(self) -> Homography:
        h = self.steps[0].homography
        for step in self.steps[1:]:
            h = h.then(step.homography)
        return h

    def composition_residual(self) -> float:
        return relative_frobenius_error(self.composed(), self.integral)


def build_ptl_chain(k0: CameraIntrinsics, view0: ViewSpec, horizon, keypoints, n_steps: int,
                    widths) -> PTLChain:
    """Split the front-view-to-ground rotation into ``n_steps`` warps.

    ``horizon`` is a pair of pixel points on the horizon line, left first.
    """
    if int(n_steps) != n_steps or n_steps < 1:
        raise InvalidStepCount(f"step count must be a positive integer, got {n_steps}")
    widths = [int(w) for w in widths]
    if len(widths) != n_steps:
        raise GeometryError(f"expected {n_steps} target widths, got {len(widths)}")
    p_left, p_right = (np.array([p[0], p[1], 1.0]) if len(p) == 2 else np.asarray(p, float)
                       for p in horizon)
    kinv = k0.inverse
    normal = horizon_to_ground_normal(kinv @ p_left, kinv @ p_right)
    omega = ground_normal_to_axis_angle(normal)
    # the camera turns by exp(omega); points turn the opposite way
    rotations = [r.T for r in split_rotation(omega, n_steps)]

    kp = _as_keypoints(keypoints)
    k_cur, view_cur = k0, view0
    steps = []
    for rot, w in zip(rotations, widths):
        k_next, h_next = optimal_viewport(k_cur, rot, kp, w)
        view_next = ViewSpec(k_next, w, h_next)
        h = pure_rotation_homography(k_cur, k_next, rot, view_cur, view_next)
        steps.append(ChainStep(rot, h))
        kp = project_keypoints(h, kp)
        k_cur, view_cur = k_next, view_next

    chain = chain_from_steps(steps)
    return PTLChain(chain.steps, chain.integral,
                    {"normal": normal, "omega": omega, "keypoints": kp})


def one_shot_homography(chain: PTLChain) -> Homography:
    """Direct front-view-to-final-view map from the unsplit rotation."""
    omega = chain.meta["omega"]
    src, dst = chain.views[0], chain.views[-1]
    return pure_rotation_homography(src.intrinsics, dst.intrinsics,
                                    axis_angle_to_rotation(omega).T, src, dst)


def chain_from_steps(steps) -> PTLChain:
    steps = tuple(steps)
    if not steps:
        raise InvalidStepCount("chain needs at least one step")
    for a, b in zip(steps, steps[1:]):
        if a.homography.target != b.homography.source:
            raise GeometryError("consecutive steps do not share a viewport")
    m = np.eye(3)
    orient = 1.0
    for s in steps:
        m = s.homography.matrix @ m
        orient *= s.homography.orientation
    integral = Homography.from_matrix(m, steps[0].homography.source,
                                      steps[-1].homography.target, orient)
    return PTLChain(steps, integral)


def identity_chain(view: ViewSpec, n_steps: int = 1) -> PTLChain:
    return chain_from_steps(ChainStep(np.eye(3), Homography.identity(view)) for _ in range(n_steps))


def invert_chain(chain: PTLChain) -> PTLChain:
    steps = tuple(ChainStep(s.rotation.T, s.homography.inverse()) for s in reversed(chain.steps))
    return PTLChain(steps, chain.integral.inverse(), dict(chain.meta, inverted=True))


def format_matrix(m, precision: int = 17) -> str:
    """Row-major text, one row per line."""
    m = np.asarray(m.matrix if isinstance(m, Homography) else m)
    return "\n".join(" ".join(f"{v:.{precision}g}" for v in row) for row in m)


def parse_matrix(text: str) -> np.ndarray:
    rows = [[float(v) for v in line.split()] for line in text.strip().splitlines()]
    return np.array(rows)

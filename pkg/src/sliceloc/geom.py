"""Rigid pose algebra for slice planes in 3D volumes.

A pose is the rigid transform (rotation + translation, mm) that carries the
initial x-y plane through the volume center onto the slice plane.  Two label
encodings are supported: an axis-angle rotation vector with Cartesian
translation (6 numbers), and a three-point form (slice center, upper-left
corner, upper-right corner; 9 numbers).
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .errors import DataError, DegenerateLabelError

GOLDEN_RATIO = (math.sqrt(5.0) + 1.0) / 2.0

_ORTHONORMAL_TOL = 1e-9
_AREA_EPS = 1e-6  # mm^2, non-collinearity threshold for three-point labels


def _as_vec3(x, name: str = "vector") -> np.ndarray:
    v = np.asarray(x, dtype=np.float64).reshape(-1)
    if v.shape != (3,):
        raise ValueError(f"{name} must have 3 components, got shape {np.shape(x)}")
    return v


def is_rotation(R: np.ndarray, tol: float = _ORTHONORMAL_TOL) -> bool:
    """True if R is orthonormal with determinant +1 within tol per entry."""
    R = np.asarray(R, dtype=np.float64)
    if R.shape != (3, 3):
        return False
    if not np.all(np.abs(R @ R.T - np.eye(3)) <= tol):
        return False
    return abs(np.linalg.det(R) - 1.0) <= tol


def _check_rotation(R: np.ndarray) -> np.ndarray:
    R = np.asarray(R, dtype=np.float64)
    if not is_rotation(R):
        raise ValueError("matrix is not a valid rotation (orthonormal, det +1)")
    return R


@dataclass(frozen=True)
class Pose:
    """Rigid transform: x -> rotation @ x + translation (mm)."""

    rotation: np.ndarray
    translation: np.ndarray

    def __post_init__(self):
        R = _check_rotation(self.rotation)
        t = _as_vec3(self.translation, "translation")
        if not np.all(np.isfinite(t)):
            raise ValueError("translation must be finite")
        R.setflags(write=False)
        t.setflags(write=False)
        object.__setattr__(self, "rotation", R)
        object.__setattr__(self, "translation", t)

    @staticmethod
    def identity() -> "Pose":
        return Pose(np.eye(3), np.zeros(3))

    @staticmethod
    def from_rotvec(rotvec, translation) -> "Pose":
        return Pose(rotvec_to_rotation(rotvec), _as_vec3(translation))

    def apply(self, points: np.ndarray) -> np.ndarray:
        """Transform one point (3,) or many points (..., 3)."""
        pts = np.asarray(points, dtype=np.float64)
        return pts @ self.rotation.T + self.translation

    def normal(self) -> np.ndarray:
        """World direction of the slice plane normal (rotation of +z)."""
        return self.rotation[:, 2].copy()

    def to_json_dict(self) -> dict:
        return {
            "rotvec": [float(x) for x in rotation_to_rotvec(self.rotation)],
            "translation_mm": [float(x) for x in self.translation],
        }

    @staticmethod
    def from_json_dict(d: dict) -> "Pose":
        try:
            return Pose.from_rotvec(d["rotvec"], d["translation_mm"])
        except (KeyError, TypeError, ValueError) as exc:
            raise DataError(f"invalid pose JSON object: {exc}") from exc


@dataclass(frozen=True)
class ThreePoint:
    """Slice plane labeled by center (a1) and upper corners (a2 left, a3 right)."""

    a1: np.ndarray
    a2: np.ndarray
    a3: np.ndarray

    def __post_init__(self):
        a1 = _as_vec3(self.a1, "a1")
        a2 = _as_vec3(self.a2, "a2")
        a3 = _as_vec3(self.a3, "a3")
        area = np.linalg.norm(np.cross(a2 - a1, a3 - a1))
        if not np.isfinite(area) or area <= _AREA_EPS:
            raise DegenerateLabelError(
                "three-point label is degenerate (collinear or coincident points)"
            )
        for v in (a1, a2, a3):
            v.setflags(write=False)
        object.__setattr__(self, "a1", a1)
        object.__setattr__(self, "a2", a2)
        object.__setattr__(self, "a3", a3)

    def as_vector(self) -> np.ndarray:
        return np.concatenate([self.a1, self.a2, self.a3])

    @staticmethod
    def from_vector(v) -> "ThreePoint":
        v = np.asarray(v, dtype=np.float64).reshape(-1)
        if v.shape != (9,):
            raise ValueError(f"three-point vector must have 9 entries, got {v.shape}")
        return ThreePoint(v[0:3], v[3:6], v[6:9])

    def to_json_dict(self) -> dict:
        return {
            "a1": [float(x) for x in self.a1],
            "a2": [float(x) for x in self.a2],
            "a3": [float(x) for x in self.a3],
        }

    @staticmethod
    def from_json_dict(d: dict) -> "ThreePoint":
        try:
            return ThreePoint(d["a1"], d["a2"], d["a3"])
        except (KeyError, TypeError, ValueError) as exc:
            raise DataError(f"invalid three-point JSON object: {exc}") from exc


@dataclass(frozen=True)
class SliceGeometry:
    """Pixel grid of a slice: width x height pixels at isotropic spacing (mm)."""

    width: int
    height: int
    spacing: float = 1.0

    def __post_init__(self):
        if self.width < 2 or self.height < 2:
            raise ValueError("slice geometry needs width and height >= 2")
        if not (self.spacing > 0):
            raise ValueError("slice spacing must be positive")

    @property
    def half_width_mm(self) -> float:
        return (self.width - 1) / 2.0 * self.spacing

    @property
    def half_height_mm(self) -> float:
        return (self.height - 1) / 2.0 * self.spacing


def skew(v) -> np.ndarray:
    """Cross-product matrix: skew(v) @ u == cross(v, u)."""
    x, y, z = _as_vec3(v)
    return np.array([[0.0, -z, y], [z, 0.0, -x], [-y, x, 0.0]])


def rotvec_to_rotation(v) -> np.ndarray:
    """Rodrigues map from an axis-angle vector (radians) to a rotation matrix."""
    v = _as_vec3(v, "rotation vector")
    theta = np.linalg.norm(v)
    K = skew(v)
    if theta < 1e-8:
        # second-order series keeps tiny rotations exact to float precision
        a = 1.0 - theta * theta / 6.0
        b = 0.5 - theta * theta / 24.0
    else:
        a = math.sin(theta) / theta
        b = (1.0 - math.cos(theta)) / (theta * theta)
    return np.eye(3) + a * K + b * (K @ K)


def rotation_to_rotvec(R) -> np.ndarray:
    """Inverse Rodrigues map, canonicalized to magnitude in [0, pi].

    Uses quaternion extraction (largest-pivot branch) so the axis stays
    accurate near 0 and pi.
    """
    R = _check_rotation(R)
    t = np.trace(R)
    # Shepperd-style branch on the largest of (trace, R00, R11, R22)
    choices = [t, R[0, 0], R[1, 1], R[2, 2]]
    k = int(np.argmax(choices))
    if k == 0:
        w = math.sqrt(max(1.0 + t, 0.0)) / 2.0
        s = 4.0 * w
        q = np.array([(R[2, 1] - R[1, 2]) / s,
                      (R[0, 2] - R[2, 0]) / s,
                      (R[1, 0] - R[0, 1]) / s])
    else:
        i = k - 1
        j, l = (i + 1) % 3, (i + 2) % 3
        qi = math.sqrt(max(1.0 + R[i, i] - R[j, j] - R[l, l], 0.0)) / 2.0
        s = 4.0 * qi
        q = np.zeros(3)
        q[i] = qi
        q[j] = (R[j, i] + R[i, j]) / s
        q[l] = (R[l, i] + R[i, l]) / s
        w = (R[l, j] - R[j, l]) / s
    if w < 0:  # fold onto the upper hemisphere so the angle lands in [0, pi]
        w, q = -w, -q
    qn = np.linalg.norm(q)
    if qn < 1e-12:
        return np.zeros(3)
    theta = 2.0 * math.atan2(qn, w)
    axis = q / qn
    if theta > math.pi - 1e-9:
        # at pi the axis sign is ambiguous; fix it deterministically
        for c in axis:
            if abs(c) > 1e-8:
                if c < 0:
                    axis = -axis
                break
        theta = min(theta, math.pi)
    return axis * theta


def geodesic_distance(r_hat, r) -> float:
    """Angular distance on SO(3): arccos((tr(r_hat^T r) - 1) / 2), in [0, pi]."""
    r_hat = _check_rotation(r_hat)
    r = _check_rotation(r)
    if np.array_equal(r_hat, r):
        # the trace route loses ~1e-8 to rounding even for identical inputs
        return 0.0
    c = (np.trace(r_hat.T @ r) - 1.0) / 2.0
    return math.acos(min(1.0, max(-1.0, c)))


def fibonacci_normals(n_o: int) -> np.ndarray:
    """Near-uniform unit directions on the sphere via the golden-ratio spiral.

    Direction i has z_i = 1 - (2i+1)/n_o and azimuth phi_i = 2*pi*i / Phi with
    Phi the golden ratio; the returned array has shape (n_o, 3).
    """
    if n_o < 1:
        raise ValueError("need at least one sampling normal")
    i = np.arange(n_o, dtype=np.float64)
    z = 1.0 - (2.0 * i + 1.0) / n_o
    phi = 2.0 * math.pi * i / GOLDEN_RATIO
    sin_theta = np.sqrt(np.maximum(0.0, 1.0 - z * z))
    return np.stack([sin_theta * np.cos(phi), sin_theta * np.sin(phi), z], axis=1)


def rotation_between(a, b) -> np.ndarray:
    """Minimal rotation carrying unit vector a onto unit vector b.

    Antiparallel inputs rotate by pi about whichever of the x or y axis is
    more orthogonal to a (projected into a's orthogonal plane).
    """
    a = _as_vec3(a, "a")
    b = _as_vec3(b, "b")
    if abs(np.linalg.norm(a) - 1.0) > 1e-9 or abs(np.linalg.norm(b) - 1.0) > 1e-9:
        raise ValueError("rotation_between expects unit vectors")
    c = float(np.dot(a, b))
    if c < -1.0 + 1e-9:
        e = np.array([1.0, 0.0, 0.0]) if abs(a[0]) <= abs(a[1]) else np.array([0.0, 1.0, 0.0])
        axis = e - np.dot(e, a) * a
        axis /= np.linalg.norm(axis)
        return rotvec_to_rotation(axis * math.pi)
    v = np.cross(a, b)
    K = skew(v)
    return np.eye(3) + K + (K @ K) / (1.0 + c)


def rotation_about_z(angle: float) -> np.ndarray:
    c, s = math.cos(angle), math.sin(angle)
    return np.array([[c, -s, 0.0], [s, c, 0.0], [0.0, 0.0, 1.0]])


def build_pose(normal, inplane: float, offset: float) -> Pose:
    """Pose of the plane with the given unit normal, in-plane angle (rad), and
    signed offset (mm) from the volume center along that normal."""
    n = _as_vec3(normal, "normal")
    R = rotation_between(np.array([0.0, 0.0, 1.0]), n) @ rotation_about_z(inplane)
    return Pose(R, offset * n)


def pose_to_three_point(p: Pose, g: SliceGeometry) -> ThreePoint:
    """Three-point label of the slice plane under pose p.

    Image x runs left to right along rotation @ (1,0,0); image y runs top to
    bottom along rotation @ (0,-1,0); a2/a3 are the upper-left/upper-right
    pixel centers.
    """
    w, h = g.half_width_mm, g.half_height_mm
    a1 = p.translation
    a2 = a1 + p.rotation @ np.array([-w, h, 0.0])
    a3 = a1 + p.rotation @ np.array([w, h, 0.0])
    return ThreePoint(a1, a2, a3)


def three_point_to_pose(tp: ThreePoint, g: SliceGeometry) -> Pose:
    """Recover the pose whose three-point label is tp.

    Gram-Schmidt orthonormalization absorbs mild numeric skew in predicted
    labels; exactly inverts pose_to_three_point for labels generated from a
    pose with the same geometry.
    """
    col = tp.a3 - tp.a2
    nc = np.linalg.norm(col)
    if nc < 1e-12:
        raise DegenerateLabelError("upper corners coincide")
    col = col / nc
    up = (tp.a2 + tp.a3) / 2.0 - tp.a1
    up = up - np.dot(up, col) * col
    nu = np.linalg.norm(up)
    if nu < 1e-12:
        raise DegenerateLabelError("center lies on the upper-edge line")
    up = up / nu
    normal = np.cross(col, up)
    R = np.column_stack([col, up, normal])
    return Pose(R, tp.a1)


def compose_pose(rt: Pose, p: Pose) -> Pose:
    """Apply rt after p: every labeled point x maps to rt.rotation @ x + rt.translation."""
    return Pose(rt.rotation @ p.rotation, rt.rotation @ p.translation + rt.translation)


def invert_pose(p: Pose) -> Pose:
    Rt = p.rotation.T
    return Pose(Rt, -(Rt @ p.translation))


def pose_difference(a: Pose, b: Pose) -> tuple[float, float]:
    """(geodesic distance in radians, translation distance in mm) between poses."""
    gd = geodesic_distance(a.rotation, b.rotation)
    dt = float(np.linalg.norm(a.translation - b.translation))
    return gd, dt

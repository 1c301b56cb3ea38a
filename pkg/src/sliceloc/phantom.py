"""Synthetic test volumes with known ground-truth geometry.

Each phantom renders one fixed asymmetric scene of soft-edged ellipsoids
(a body, two chambers, a vessel, and a small marker) after a per-subject
rigid jitter plus mild per-axis scaling.  The jitter pose is returned as
ground truth, and generation is fully determined by (params, subject_index).
"""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .geom import Pose, rotvec_to_rotation
from .volume import Volume

# (center xyz, semi-axes xyz, intensity) in scene units, where one unit is
# half the shortest volume edge; the offsets make every axis distinguishable
_SCENE = (
    ((0.00, 0.00, 0.00), (0.70, 0.62, 0.55), 0.35),
    ((-0.18, 0.06, -0.05), (0.28, 0.24, 0.34), 0.85),
    ((0.22, -0.10, 0.08), (0.20, 0.30, 0.22), 0.65),
    ((0.12, 0.22, 0.28), (0.10, 0.10, 0.38), 0.95),
    ((-0.28, -0.30, 0.22), (0.07, 0.05, 0.06), 1.00),
)

_EDGE_WIDTH = 0.06  # soft boundary width in scene units

INTENSITY_RANGE = (0.0, 1.0)


@dataclass(frozen=True)
class PhantomParams:
    seed: int = 0
    n_subjects: int = 1
    dims: tuple[int, int, int] = (96, 96, 96)
    spacing: float = 1.0
    jitter_rot_max: float = 8.0  # degrees
    jitter_trans_max: float = 4.0  # mm
    intensity_noise_sd: float = 0.01
    shape_scale_range: tuple[float, float] = (0.95, 1.05)

    def __post_init__(self):
        dims = tuple(int(d) for d in self.dims)
        if len(dims) != 3 or min(dims) < 2:
            raise ValueError("phantom dims must be three values >= 2")
        object.__setattr__(self, "dims", dims)
        if self.n_subjects < 1:
            raise ValueError("need at least one subject")
        if not (self.spacing > 0):
            raise ValueError("spacing must be positive")
        if not (0.0 <= self.jitter_rot_max <= 30.0):
            raise ValueError("jitter_rot_max must lie in [0, 30] degrees")
        trans_cap = 0.1 * min(dims) * self.spacing
        if not (0.0 <= self.jitter_trans_max <= trans_cap):
            raise ValueError(
                f"jitter_trans_max must lie in [0, {trans_cap:.1f}] mm for these dims"
            )
        if self.intensity_noise_sd < 0:
            raise ValueError("intensity_noise_sd must be >= 0")
        lo, hi = self.shape_scale_range
        if not (0.8 <= lo <= hi <= 1.2):
            raise ValueError("shape_scale_range must satisfy 0.8 <= lo <= hi <= 1.2")
        object.__setattr__(self, "shape_scale_range", (float(lo), float(hi)))


def _smoothstep(t: np.ndarray) -> np.ndarray:
    t = np.clip(t, 0.0, 1.0)
    return t * t * (3.0 - 2.0 * t)


def _render_scene(y0, y1, y2) -> np.ndarray:
    """Composite the ellipsoid stack at scene coordinates (painter order)."""
    out = np.zeros(np.broadcast(y0, y1, y2).shape, dtype=np.float64)
    for (cx, cy, cz), (ax, ay, az), intensity in _SCENE:
        d = np.sqrt(((y0 - cx) / ax) ** 2 + ((y1 - cy) / ay) ** 2
                    + ((y2 - cz) / az) ** 2)
        alpha = _smoothstep((1.0 + _EDGE_WIDTH / 2.0 - d) / _EDGE_WIDTH)
        out += alpha * (intensity - out)
    return out


def _subject_rng(params: PhantomParams, subject_index: int) -> np.random.Generator:
    return np.random.default_rng([params.seed, subject_index])


def _draw_jitter(params: PhantomParams, rng) -> tuple[Pose, np.ndarray]:
    axis = rng.normal(size=3)
    norm = np.linalg.norm(axis)
    axis = axis / norm if norm > 1e-12 else np.array([0.0, 0.0, 1.0])
    angle = math.radians(rng.uniform(0.0, params.jitter_rot_max))
    translation = rng.uniform(-params.jitter_trans_max, params.jitter_trans_max, 3)
    lo, hi = params.shape_scale_range
    scales = rng.uniform(lo, hi, 3)
    return Pose(rotvec_to_rotation(axis * angle), translation), scales


def render_scene_volume(dims, spacing: float, jitter: Pose | None = None,
                        scales=(1.0, 1.0, 1.0)) -> Volume:
    """Noise-free render of the scene moved by jitter and scaled per axis."""
    jitter = Pose.identity() if jitter is None else jitter
    nx, ny, nz = (int(d) for d in dims)
    s = float(spacing)
    unit = min(nx, ny, nz) * s / 2.0  # scene unit in mm
    i = (np.arange(nx, dtype=np.float64) - (nx - 1) / 2.0)[:, None, None] * s
    j = (np.arange(ny, dtype=np.float64) - (ny - 1) / 2.0)[None, :, None] * s
    k = (np.arange(nz, dtype=np.float64) - (nz - 1) / 2.0)[None, None, :] * s

    # scene coordinate of world point x: inverse jitter then per-axis shrink
    Rt = jitter.rotation.T
    shift = Rt @ jitter.translation
    y = []
    for ax in range(3):
        c = Rt[ax, 0] * i + Rt[ax, 1] * j + Rt[ax, 2] * k - shift[ax]
        y.append(c / (scales[ax] * unit))
    return Volume(_render_scene(*y), s)


def make_phantom(params: PhantomParams, subject_index: int) -> tuple[Volume, Pose]:
    """Render subject subject_index; returns the volume and its jitter pose."""
    if not (0 <= subject_index < params.n_subjects):
        raise ValueError(
            f"subject_index {subject_index} outside [0, {params.n_subjects})"
        )
    rng = _subject_rng(params, subject_index)
    jitter, scales = _draw_jitter(params, rng)
    v = render_scene_volume(params.dims, params.spacing, jitter, scales)

    if params.intensity_noise_sd > 0:
        data = v.data + rng.normal(0.0, params.intensity_noise_sd, v.dims)
        np.clip(data, INTENSITY_RANGE[0], INTENSITY_RANGE[1], out=data)
        v = Volume(data, v.spacing)
    return v, jitter


def make_cohort(params: PhantomParams) -> list[tuple[Volume, Pose]]:
    """All subjects of the cohort, each with an independent seeded jitter."""
    return [make_phantom(params, idx) for idx in range(params.n_subjects)]

"""3D scalar volumes in a center-origin frame and their resampling primitives.

Voxel (i, j, k) of a volume with dims (nx, ny, nz) and isotropic spacing s sits
at world point ((i - (nx-1)/2) s, (j - (ny-1)/2) s, (k - (nz-1)/2) s), so the
world origin is the volume center.  All sampling is trilinear; points outside
the voxel hull read as 0.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy import ndimage

from .geom import Pose, SliceGeometry, invert_pose

FILL_VALUE = 0.0

_HULL_TOL = 1e-9  # index units; absorbs roundoff at the hull faces


@dataclass(frozen=True)
class Volume:
    """Immutable scalar grid with isotropic spacing (mm/voxel)."""

    data: np.ndarray
    spacing: float = 1.0

    def __post_init__(self):
        arr = np.ascontiguousarray(self.data, dtype=np.float64)
        if arr.ndim != 3 or min(arr.shape) < 2:
            raise ValueError(f"volume data must be 3D with dims >= 2, got {arr.shape}")
        if not (self.spacing > 0):
            raise ValueError("voxel spacing must be positive")
        if not np.all(np.isfinite(arr)):
            raise ValueError("volume contains non-finite values")
        arr.setflags(write=False)
        object.__setattr__(self, "data", arr)
        object.__setattr__(self, "spacing", float(self.spacing))

    @property
    def dims(self) -> tuple[int, int, int]:
        return self.data.shape

    @property
    def extent_mm(self) -> np.ndarray:
        """Physical edge lengths, voxel centers spanning (n-1)*s per axis."""
        return (np.array(self.dims, dtype=np.float64) - 1.0) * self.spacing

    def index_center(self) -> np.ndarray:
        return (np.array(self.dims, dtype=np.float64) - 1.0) / 2.0

    def world_to_index(self, points: np.ndarray) -> np.ndarray:
        """World mm coordinates (..., 3) to fractional voxel indices (..., 3)."""
        pts = np.asarray(points, dtype=np.float64)
        return pts / self.spacing + self.index_center()

    def index_to_world(self, indices: np.ndarray) -> np.ndarray:
        idx = np.asarray(indices, dtype=np.float64)
        return (idx - self.index_center()) * self.spacing


@dataclass(frozen=True)
class Slice:
    """2D scalar image plus the pixel-grid geometry that produced it.

    pose records the extraction pose when known; externally supplied query
    images carry pose=None.
    """

    data: np.ndarray
    geometry: SliceGeometry
    pose: Pose | None = None

    def __post_init__(self):
        arr = np.ascontiguousarray(self.data, dtype=np.float64)
        if arr.shape != (self.geometry.height, self.geometry.width):
            raise ValueError(
                f"slice data shape {arr.shape} does not match geometry "
                f"{self.geometry.height}x{self.geometry.width} (rows x cols)"
            )
        if not np.all(np.isfinite(arr)):
            raise ValueError("slice contains non-finite values")
        arr.setflags(write=False)
        object.__setattr__(self, "data", arr)


def _sample_index_points_masked(data: np.ndarray,
                                idx: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    shape = idx.shape[:-1]
    flat = idx.reshape(-1, 3)
    hi = np.array(data.shape, dtype=np.float64) - 1.0
    inside = np.all((flat >= -_HULL_TOL) & (flat <= hi + _HULL_TOL), axis=1)
    coords = np.clip(flat.T, 0.0, hi[:, None])
    out = ndimage.map_coordinates(data, coords, order=1, mode="nearest")
    out[~inside] = FILL_VALUE
    return out.reshape(shape), inside.reshape(shape)


def _sample_index_points(data: np.ndarray, idx: np.ndarray) -> np.ndarray:
    """Trilinear sample at fractional indices (..., 3); outside the hull -> 0."""
    return _sample_index_points_masked(data, idx)[0]


def sample_trilinear(v: Volume, point) -> float:
    """Interpolated intensity at one world point (mm); 0 outside the hull."""
    idx = v.world_to_index(np.asarray(point, dtype=np.float64).reshape(3))
    return float(_sample_index_points(v.data, idx[None, :])[0])


def sample_points(v: Volume, points: np.ndarray) -> np.ndarray:
    """Vectorized sample_trilinear over an (..., 3) array of world points."""
    pts = np.asarray(points, dtype=np.float64)
    if pts.shape[-1] != 3:
        raise ValueError("points must have a trailing dimension of 3")
    return _sample_index_points(v.data, v.world_to_index(pts))


def sample_points_masked(v: Volume,
                         points: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Like sample_points, also returning the inside-hull mask per point."""
    pts = np.asarray(points, dtype=np.float64)
    if pts.shape[-1] != 3:
        raise ValueError("points must have a trailing dimension of 3")
    return _sample_index_points_masked(v.data, v.world_to_index(pts))


def slice_grid_world(p: Pose, g: SliceGeometry) -> np.ndarray:
    """World coordinates (H, W, 3) of every pixel center of a slice under p.

    Image x runs along rotation @ (1,0,0) left to right; image y runs along
    rotation @ (0,-1,0) top to bottom; row 0 is the upper edge.
    """
    cols = (np.arange(g.width, dtype=np.float64) - (g.width - 1) / 2.0) * g.spacing
    rows = ((g.height - 1) / 2.0 - np.arange(g.height, dtype=np.float64)) * g.spacing
    u, vv = np.meshgrid(cols, rows)
    local = np.stack([u, vv, np.zeros_like(u)], axis=-1)
    return local @ p.rotation.T + p.translation


def extract_slice(v: Volume, p: Pose, g: SliceGeometry) -> Slice:
    """Resample the oblique plane defined by p into a 2D image."""
    return Slice(sample_points(v, slice_grid_world(p, g)), g, pose=p)


def _pullback(v: Volume, rt: Pose, dims, sp: float) -> tuple[np.ndarray, np.ndarray]:
    """Values and inside-hull mask of v pulled back through rt onto a grid."""
    inv = invert_pose(rt)
    # fractional input index of output voxel (i,j,k), as an affine map of the
    # output index: idx_in = A @ idx_out + b
    A = (sp / v.spacing) * inv.rotation
    c_out = (np.array(dims, dtype=np.float64) - 1.0) / 2.0
    b = v.index_center() - A @ c_out + inv.translation / v.spacing

    i = np.arange(dims[0], dtype=np.float64)[:, None, None]
    j = np.arange(dims[1], dtype=np.float64)[None, :, None]
    k = np.arange(dims[2], dtype=np.float64)[None, None, :]
    hi = np.array(v.dims, dtype=np.float64) - 1.0

    out = np.empty(dims, dtype=np.float64)
    inside = np.ones(dims, dtype=bool)
    coords = []
    for ax in range(3):
        c = A[ax, 0] * i + A[ax, 1] * j + A[ax, 2] * k + b[ax]
        inside &= (c >= -_HULL_TOL) & (c <= hi[ax] + _HULL_TOL)
        np.clip(c, 0.0, hi[ax], out=c)
        coords.append(c)
    ndimage.map_coordinates(v.data, coords, order=1, mode="nearest", output=out)
    out[~inside] = FILL_VALUE
    return out, inside


def resample_volume(v: Volume, rt: Pose, out_dims=None, out_spacing=None) -> Volume:
    """Warp v by the rigid transform rt onto a new grid (pull-back).

    Output voxel at world x reads v at rt^-1 x, so the content of v appears
    moved by rt in the output frame.
    """
    dims = v.dims if out_dims is None else tuple(int(d) for d in out_dims)
    sp = v.spacing if out_spacing is None else float(out_spacing)
    if min(dims) < 2 or not (sp > 0):
        raise ValueError("output grid needs dims >= 2 and positive spacing")
    out, _ = _pullback(v, rt, dims, sp)
    return Volume(out, sp)


def warp_onto(v: Volume, rt: Pose, like: Volume) -> tuple[np.ndarray, np.ndarray]:
    """Pull v through rt onto like's grid; returns (values, inside mask).

    The mask marks output voxels whose sample point landed inside v's hull,
    letting callers score overlap regions without fill-value dilution.
    """
    return _pullback(v, rt, like.dims, like.spacing)


def in_hull_fraction(v: Volume, points: np.ndarray) -> float:
    """Fraction of world points (..., 3) that fall inside the voxel hull."""
    idx = v.world_to_index(np.asarray(points, dtype=np.float64)).reshape(-1, 3)
    hi = np.array(v.dims, dtype=np.float64) - 1.0
    inside = np.all((idx >= -_HULL_TOL) & (idx <= hi + _HULL_TOL), axis=1)
    return float(inside.mean())

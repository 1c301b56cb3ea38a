"""Rigid volume-to-volume registration.

Multi-resolution search: a gaussian pyramid (coarse factors 4, 2, 1), an
exhaustive seed grid over rotations and translations at the coarsest level,
then Nelder-Mead refinement of the 6-vector (rotation vector, translation)
at every level.  Scores are computed only over voxels whose pulled-back
sample point lands inside the moving volume, so out-of-hull fill never
dilutes the metric.
"""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
from scipy import ndimage, optimize

from .errors import NumericError
from .geom import Pose, invert_pose, rotation_to_rotvec, rotvec_to_rotation
from .volume import Volume, resample_volume, sample_points_masked, warp_onto

_METRICS = ("ncc", "mse")

_MIN_OVERLAP_VOXELS = 8
_WORST = {"ncc": -1.0, "mse": -1e30}

_ROT_SEED_STEP_DEG = 15.0

_N_MULTISTART = 6  # seeds refined independently at the coarsest level


@dataclass(frozen=True)
class RegistrationConfig:
    pyramid_levels: int = 3
    metric: str = "ncc"
    rot_search_deg: float = 20.0
    trans_search_mm: float = 20.0
    local_opt_iters: int = 120
    convergence_tol: float = 1e-6
    # metric sample density for finest-level refinement: every k-th fixed
    # voxel; 1 means the full lattice.  Cuts large-volume cost with little
    # accuracy loss.  Ignored with a single pyramid level.
    fine_sample_stride: int = 1

    def __post_init__(self):
        if not (1 <= self.pyramid_levels <= 4):
            raise ValueError("pyramid_levels must lie in [1, 4]")
        if self.metric not in _METRICS:
            raise ValueError(f"metric must be one of {_METRICS}")
        if not (self.rot_search_deg > 0 and self.trans_search_mm > 0):
            raise ValueError("search bounds must be positive")
        if self.local_opt_iters < 1:
            raise ValueError("local_opt_iters must be >= 1")
        if not (self.convergence_tol > 0):
            raise ValueError("convergence_tol must be positive")
        if self.fine_sample_stride < 1:
            raise ValueError("fine_sample_stride must be >= 1")


@dataclass(frozen=True)
class RegistrationResult:
    rt: Pose  # moving -> fixed
    score: float
    converged: bool

    def to_json_dict(self) -> dict:
        return {"rt": self.rt.to_json_dict(), "score": self.score,
                "converged": self.converged}


def ncc(a: Volume, b: Volume) -> float:
    """Pearson correlation of two same-shaped volumes; zero variance -> 0."""
    if a.dims != b.dims:
        raise ValueError(f"ncc dims mismatch: {a.dims} vs {b.dims}")
    return _pearson(a.data.reshape(-1), b.data.reshape(-1))


def _pearson(x: np.ndarray, y: np.ndarray) -> float:
    xc = x - x.mean()
    yc = y - y.mean()
    nx = np.linalg.norm(xc)
    ny = np.linalg.norm(yc)
    if nx == 0.0 or ny == 0.0:
        return 0.0
    return float(np.clip(np.dot(xc, yc) / (nx * ny), -1.0, 1.0))


def _masked_score(metric: str, warped: np.ndarray, inside: np.ndarray,
                  fixed: np.ndarray) -> float:
    if inside.sum() < _MIN_OVERLAP_VOXELS:
        return _WORST[metric]
    a = warped[inside]
    b = fixed[inside]
    if metric == "ncc":
        return _pearson(a, b)
    return -float(np.mean((a - b) ** 2))


def _params_to_pose(params: np.ndarray) -> Pose:
    return Pose(rotvec_to_rotation(params[:3]), params[3:6])


def _pose_to_params(p: Pose) -> np.ndarray:
    return np.concatenate([rotation_to_rotvec(p.rotation), p.translation])


def _score_params(params, moving: Volume, fixed: Volume, metric: str) -> float:
    warped, inside = warp_onto(moving, _params_to_pose(np.asarray(params)), fixed)
    return _masked_score(metric, warped, inside, fixed.data)


def _full_score_fn(moving: Volume, fixed: Volume, metric: str):
    def score(params) -> float:
        return _score_params(params, moving, fixed, metric)

    return score


def _sparse_score_fn(moving: Volume, fixed: Volume, metric: str, stride: int):
    """Metric over every stride-th fixed voxel instead of the full lattice."""
    idx = np.indices(fixed.dims, dtype=np.float64).reshape(3, -1).T[::stride]
    pts = fixed.index_to_world(idx)
    vals = fixed.data.reshape(-1)[::stride]

    def score(params) -> float:
        inv = invert_pose(_params_to_pose(np.asarray(params)))
        sampled, inside = sample_points_masked(
            moving, pts @ inv.rotation.T + inv.translation)
        return _masked_score(metric, sampled, inside, vals)

    return score


def _downsample(v: Volume, factor: int) -> Volume:
    if factor == 1:
        return v
    smoothed = ndimage.gaussian_filter(v.data, sigma=factor / 2.0)
    dims = tuple(max(2, int(round((n - 1) / factor)) + 1) for n in v.dims)
    return resample_volume(Volume(smoothed, v.spacing), Pose.identity(),
                           out_dims=dims, out_spacing=v.spacing * factor)


def _pyramid(v: Volume, levels: int) -> list[Volume]:
    """Coarse-to-fine pyramid with factors 2^(levels-1) ... 2, 1."""
    return [_downsample(v, 2 ** k) for k in range(levels - 1, -1, -1)]


def _seed_grid(cfg: RegistrationConfig, fixed: Volume) -> np.ndarray:
    rot_bound = math.radians(cfg.rot_search_deg)
    rot_step = math.radians(_ROT_SEED_STEP_DEG)
    n_rot = int(rot_bound / rot_step)
    rot_offsets = np.arange(-n_rot, n_rot + 1) * rot_step

    extent = fixed.extent_mm
    trans_axes = []
    for ax in range(3):
        step = min(extent[ax] / 4.0, cfg.trans_search_mm)
        n_t = int(cfg.trans_search_mm / step) if step > 0 else 0
        trans_axes.append(np.arange(-n_t, n_t + 1) * step)
    axes = [rot_offsets] * 3 + trans_axes
    grids = np.meshgrid(*axes, indexing="ij")
    return np.stack([g.reshape(-1) for g in grids], axis=1)


def _refine(params: np.ndarray, score_fn, spacing: float,
            cfg: RegistrationConfig, maxiter: int, factor: int,
            restarts: int = 1) -> np.ndarray:
    def objective(x):
        return -score_fn(x)

    # simplex sized to the level: wide enough to hop basins when coarse,
    # narrow enough to polish when fine
    rot_step = 0.02 * factor
    steps = np.array([rot_step] * 3 + [1.0 * spacing] * 3)
    x = np.asarray(params, dtype=np.float64)
    for _ in range(restarts):
        simplex = np.vstack([x, x + np.diag(steps)])
        res = optimize.minimize(
            objective, x, method="Nelder-Mead",
            options={
                "maxiter": maxiter,
                "fatol": cfg.convergence_tol,
                "xatol": 1e-4,
                "initial_simplex": simplex,
                "adaptive": False,
            },
        )
        x = np.asarray(res.x, dtype=np.float64)
        steps = steps / 4.0
    return x


def _level_iters(cfg: RegistrationConfig, levels: int) -> list[int]:
    # spend most evaluations where they are cheap
    return [max(12, cfg.local_opt_iters // (2 ** k)) for k in range(levels)]


def register_rigid(moving: Volume, fixed: Volume,
                   cfg: RegistrationConfig | None = None) -> RegistrationResult:
    """Find the rigid transform aligning moving onto fixed.

    Falls back to the identity transform (converged=False) when the search
    cannot beat it.
    """
    cfg = RegistrationConfig() if cfg is None else cfg
    mov_pyr = _pyramid(moving, cfg.pyramid_levels)
    fix_pyr = _pyramid(fixed, cfg.pyramid_levels)

    seeds = _seed_grid(cfg, fixed)
    scores = [_score_params(s, mov_pyr[0], fix_pyr[0], cfg.metric) for s in seeds]
    order = np.argsort(scores)[::-1]
    iters = _level_iters(cfg, cfg.pyramid_levels)

    # the coarsest-level landscape is flat, so refine several seeds and let
    # the next level arbitrate between their basins
    factors = [2 ** k for k in range(cfg.pyramid_levels - 1, -1, -1)]
    starts = [seeds[i] for i in order[:_N_MULTISTART]]
    starts.append(np.zeros(6))
    coarse_fn = _full_score_fn(mov_pyr[0], fix_pyr[0], cfg.metric)
    refined = [_refine(s, coarse_fn, fix_pyr[0].spacing, cfg, iters[0], factors[0])
               for s in starts]
    rank_level = 1 if cfg.pyramid_levels >= 2 else 0
    ranks = [_score_params(r, mov_pyr[rank_level], fix_pyr[rank_level], cfg.metric)
             for r in refined]
    best = refined[int(np.argmax(ranks))]

    for level in range(1, cfg.pyramid_levels):
        finest = level == cfg.pyramid_levels - 1
        if finest and cfg.fine_sample_stride > 1:
            fn = _sparse_score_fn(mov_pyr[level], fix_pyr[level], cfg.metric,
                                  cfg.fine_sample_stride)
        else:
            fn = _full_score_fn(mov_pyr[level], fix_pyr[level], cfg.metric)
        best = _refine(best, fn, fix_pyr[level].spacing, cfg, iters[level],
                       factors[level], restarts=2 if finest else 1)

    final_score = _score_params(best, moving, fixed, cfg.metric)
    identity_score = _score_params(np.zeros(6), moving, fixed, cfg.metric)
    if not (np.isfinite(final_score) and np.isfinite(identity_score)):
        raise NumericError("registration metric became non-finite")

    if final_score < identity_score:
        return RegistrationResult(Pose.identity(), identity_score, False)
    return RegistrationResult(_params_to_pose(best), final_score, True)

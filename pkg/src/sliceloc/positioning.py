"""Slice positioning pipeline: reference-frame prompt, coarse transfer by
rigid registration, and iterative similarity-guided refinement."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import DataError, StageError
from .fileio import save_slice, write_json
from .geom import (
    GOLDEN_RATIO,
    Pose,
    compose_pose,
    rotation_about_z,
    rotation_between,
)
from .predictor import PosePredictor
from .registration import RegistrationConfig, RegistrationResult, register_rigid
from .similarity import DownsampleExtractor, FeatureExtractor
from .volume import Slice, Volume, extract_slice, sample_points, slice_grid_world

_SCORE_TOL = 1e-9
_DUPLICATE_TOL = 1e-8
_Z = np.array([0.0, 0.0, 1.0])


@dataclass(frozen=True)
class AtlasPrompt:
    """Reference volume together with the query's predicted pose in it."""

    atlas: Volume
    predicted_pose: Pose


@dataclass(frozen=True)
class FineConfig:
    """Search ranges for one refinement round.

    ``gamma`` bounds every axis of the candidate grid: degrees for the
    normal cap and in-plane spin, millimetres for the offset.
    """

    gamma: float = 6.0
    n_normal_candidates: int = 9
    inplane_step: float = 3.0
    trans_step: float = 2.0
    max_iters: int = 20

    def __post_init__(self):
        if self.gamma <= 0.0:
            raise DataError("gamma must be positive")
        if self.n_normal_candidates < 1:
            raise DataError("n_normal_candidates must be at least 1")
        if self.inplane_step <= 0.0 or self.trans_step <= 0.0:
            raise DataError("grid steps must be positive")
        if self.max_iters < 1:
            raise DataError("max_iters must be at least 1")


@dataclass(frozen=True)
class PositionResult:
    slice: Slice
    pose: Pose
    score: float
    iterations: int
    trace: tuple[tuple[Pose, float], ...]
    coarse_pose: Pose | None = None
    warnings: tuple[str, ...] = field(default=())


def make_prompt(query: Slice, atlas: Volume, predictor: PosePredictor) -> AtlasPrompt:
    """Predict the query's pose in the reference frame and package it."""
    return AtlasPrompt(atlas=atlas, predicted_pose=predictor.predict(query))


def _coarse_transfer(
    prompt: AtlasPrompt, target: Volume, reg_cfg: RegistrationConfig | None
) -> tuple[Pose, RegistrationResult]:
    result = register_rigid(prompt.atlas, target, reg_cfg or RegistrationConfig())
    return compose_pose(result.rt, prompt.predicted_pose), result


def coarse_position(
    prompt: AtlasPrompt, target: Volume, reg_cfg: RegistrationConfig | None = None
) -> Pose:
    """Map the predicted pose into the target frame via atlas-to-target
    rigid registration."""
    pose, _ = _coarse_transfer(prompt, target, reg_cfg)
    return pose


def _cap_directions(n: int, cap_rad: float) -> np.ndarray:
    """n unit vectors spiralling through the spherical cap around +z."""
    i = np.arange(n)
    z = 1.0 - (1.0 - np.cos(cap_rad)) * (i + 0.5) / n
    phi = 2.0 * np.pi * i / GOLDEN_RATIO
    r = np.sqrt(np.clip(1.0 - z * z, 0.0, 1.0))
    return np.stack([r * np.cos(phi), r * np.sin(phi), z], axis=1)


def _delta_grid(bound: float, step: float) -> np.ndarray:
    k = int(np.floor(bound / step + 1e-9))
    return step * np.arange(-k, k + 1, dtype=np.float64)


def _near_pose(a: Pose, b: Pose) -> bool:
    return (
        np.abs(a.rotation - b.rotation).max() <= _DUPLICATE_TOL
        and np.abs(a.translation - b.translation).max() <= _DUPLICATE_TOL
    )


def resample_candidates(p_c: Pose, cfg: FineConfig) -> list[Pose]:
    """Deterministic candidate grid around ``p_c``.

    Normals spiral through a cap of ``gamma`` degrees around the current
    normal; each is combined with every in-plane delta and every offset
    delta in ``[-gamma, gamma]``.  ``p_c`` itself is always candidate 0,
    and grid points indistinguishable from it are dropped.
    """
    n_c = p_c.normal()
    cap = _cap_directions(cfg.n_normal_candidates, np.radians(cfg.gamma))
    to_nc = rotation_between(_Z, n_c)
    normals = cap @ to_nc.T
    inplane = _delta_grid(cfg.gamma, cfg.inplane_step)
    offsets = _delta_grid(cfg.gamma, cfg.trans_step)
    out = [p_c]
    for n_new in normals:
        n_new = n_new / np.linalg.norm(n_new)
        tilt = rotation_between(n_c, n_new)
        tilted = tilt @ p_c.rotation
        for psi in inplane:
            rot = tilted @ rotation_about_z(np.radians(psi))
            for dd in offsets:
                cand = Pose(rot, p_c.translation + dd * n_new)
                if not _near_pose(cand, p_c):
                    out.append(cand)
    return out


def _extract_batch(target: Volume, poses: list[Pose], geometry) -> np.ndarray:
    grids = np.stack([slice_grid_world(p, geometry) for p in poses])
    return sample_points(target, grids)


def _batch_csim(features: np.ndarray, query: np.ndarray) -> np.ndarray:
    qn = np.linalg.norm(query)
    norms = np.linalg.norm(features, axis=1)
    denom = np.maximum(norms * qn, 1e-300)
    sims = np.where((norms > 0.0) & (qn > 0.0), features @ query / denom, 0.0)
    return np.clip(sims, -1.0, 1.0)


def fine_position(
    query: Slice,
    target: Volume,
    p_coarse: Pose,
    cfg: FineConfig | None = None,
    extractor: FeatureExtractor | None = None,
) -> PositionResult:
    """Hill-climb the candidate grid on feature cosine similarity.

    Each round scores every candidate slice against the query and recenters
    on the best one; the search stops when no candidate improves the score
    by more than 1e-9 or after ``max_iters`` rounds.  The trace starts with
    the score at ``p_coarse`` and stays non-decreasing.
    """
    if cfg is None:
        cfg = FineConfig()
    if extractor is None:
        extractor = DownsampleExtractor()
    query_feature = extractor.extract(query)

    current = p_coarse
    current_score = float(
        _batch_csim(
            extractor.extract_many(
                _extract_batch(target, [current], query.geometry)
            ),
            query_feature,
        )[0]
    )
    trace = [(current, current_score)]
    iterations = 0
    for _ in range(cfg.max_iters):
        iterations += 1
        candidates = resample_candidates(current, cfg)
        images = _extract_batch(target, candidates, query.geometry)
        sims = _batch_csim(extractor.extract_many(images), query_feature)
        best = int(np.argmax(sims))
        best_score = float(sims[best])
        if best_score <= current_score + _SCORE_TOL:
            break
        current = candidates[best]
        current_score = best_score
        trace.append((current, current_score))
    return PositionResult(
        slice=extract_slice(target, current, query.geometry),
        pose=current,
        score=current_score,
        iterations=iterations,
        trace=tuple(trace),
        coarse_pose=p_coarse,
    )


def position(
    query: Slice,
    target: Volume,
    atlas: Volume,
    predictor: PosePredictor,
    reg_cfg: RegistrationConfig | None = None,
    fine_cfg: FineConfig | None = None,
    extractor: FeatureExtractor | None = None,
) -> PositionResult:
    """Full pipeline: prompt, coarse transfer, fine refinement."""
    try:
        prompt = make_prompt(query, atlas, predictor)
    except Exception as exc:
        raise StageError("prompt", exc) from exc
    warnings = []
    try:
        coarse, reg = _coarse_transfer(prompt, target, reg_cfg)
        if not reg.converged:
            warnings.append("coarse registration did not converge; kept best pose found")
    except Exception as exc:
        raise StageError("coarse", exc) from exc
    try:
        fine = fine_position(query, target, coarse, fine_cfg, extractor)
    except Exception as exc:
        raise StageError("fine", exc) from exc
    return PositionResult(
        slice=fine.slice,
        pose=fine.pose,
        score=fine.score,
        iterations=fine.iterations,
        trace=fine.trace,
        coarse_pose=coarse,
        warnings=tuple(warnings),
    )


def result_to_json_dict(result: PositionResult) -> dict:
    out = {
        "pose": result.pose.to_json_dict(),
        "score": result.score,
        "coarse_pose": None
        if result.coarse_pose is None
        else result.coarse_pose.to_json_dict(),
        "iterations": result.iterations,
        "trace": [{"pose": p.to_json_dict(), "score": s} for p, s in result.trace],
    }
    if result.warnings:
        out["warnings"] = list(result.warnings)
    return out


def save_position_result(result: PositionResult, json_path, slice_path=None) -> None:
    """Write the result JSON, and optionally the found slice as an image."""
    write_json(result_to_json_dict(result), json_path)
    if slice_path is not None:
        save_slice(result.slice, slice_path)

"""Canonical reference volume built by iterative rigid alignment and averaging."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import DataError, SlicelocError
from .fileio import save_volume, write_json
from .geom import Pose
from .registration import RegistrationConfig, register_rigid
from .volume import Volume, resample_volume, warp_onto

_MIN_SIZE = 32
_STOP_IMPROVEMENT = 1e-4


@dataclass(frozen=True)
class AtlasBuild:
    """Result of an atlas construction run.

    ``subject_transforms`` maps each cohort volume into the atlas frame, in
    cohort order.  ``mean_ncc`` holds one entry per recorded averaging pass,
    starting with the unregistered baseline; the sequence is non-decreasing.
    ``flagged`` lists subjects whose registration raised at least once and
    who were therefore excluded from the affected averaging passes.
    """

    atlas: Volume
    subject_transforms: tuple[Pose, ...]
    iterations_run: int
    mean_ncc: tuple[float, ...]
    flagged: tuple[int, ...] = field(default=())


def _zscored(v: Volume) -> Volume:
    sd = float(v.data.std())
    if sd <= 0.0:
        raise DataError("cannot normalize a constant volume")
    return Volume((v.data - float(v.data.mean())) / sd, v.spacing)


def _masked_ncc(a: np.ndarray, b: np.ndarray, mask: np.ndarray) -> float:
    x = a[mask]
    y = b[mask]
    if x.size < 2:
        return 0.0
    x = x - x.mean()
    y = y - y.mean()
    denom = float(np.sqrt((x * x).sum() * (y * y).sum()))
    if denom == 0.0:
        return 0.0
    return float(np.clip((x * y).sum() / denom, -1.0, 1.0))


def _masked_mean(warps: list[np.ndarray], masks: list[np.ndarray]) -> np.ndarray:
    num = np.zeros_like(warps[0])
    den = np.zeros(warps[0].shape, dtype=np.float64)
    for w, m in zip(warps, masks):
        num += np.where(m, w, 0.0)
        den += m
    covered = den > 0
    out = np.zeros_like(num)
    np.divide(num, den, out=out, where=covered)
    if covered.any() and not covered.all():
        # Voxels no subject reaches get the darkest covered value so the
        # final rescale maps them to the background level instead of gray.
        out[~covered] = out[covered].min()
    return out


def _mean_score(warps: list[np.ndarray], masks: list[np.ndarray], ref: np.ndarray) -> float:
    return float(np.mean([_masked_ncc(w, ref, m) for w, m in zip(warps, masks)]))


def build_atlas(
    cohort: list[Volume],
    size: int,
    max_iters: int = 5,
    cfg: RegistrationConfig | None = None,
    spacing: float | None = None,
) -> AtlasBuild:
    """Average a cohort into a cubic reference volume of edge ``size``.

    The first reference is the voxelwise mean of the cohort placed on the
    target grid unchanged.  Each pass then rigidly registers every subject
    to the current reference, resamples, and replaces the reference with
    the voxelwise mean of the aligned subjects.  Passes stop at
    ``max_iters``, when the mean cohort-to-reference NCC improves by less
    than 1e-4, or when it would decrease (the previous reference is kept).

    Subjects are rescaled to zero mean and unit variance before averaging
    and the returned atlas is rescaled to [0, 1].  When ``spacing`` is
    omitted it is chosen so the grid spans the largest cohort extent.

    A subject whose registration raises is flagged, keeps its last good
    transform, and is left out of that pass's average; it is never dropped
    from the returned transform list.
    """
    if not cohort:
        raise DataError("cohort must contain at least one volume")
    if size < _MIN_SIZE:
        raise DataError(f"atlas size must be at least {_MIN_SIZE}, got {size}")
    if max_iters < 0:
        raise DataError("max_iters must be non-negative")
    if cfg is None:
        cfg = RegistrationConfig()
    if spacing is None:
        spacing = max(max(v.extent_mm) for v in cohort) / (size - 1)
    if spacing <= 0.0:
        raise DataError("atlas spacing must be positive")

    grid = Volume(np.zeros((size, size, size)), spacing)
    normed = [_zscored(v) for v in cohort]
    identity = Pose.identity()

    transforms = [identity] * len(cohort)
    pairs = [warp_onto(v, identity, grid) for v in normed]
    warps = [w for w, _ in pairs]
    masks = [m for _, m in pairs]
    reference = _masked_mean(warps, masks)
    scores = [_mean_score(warps, masks, reference)]
    flagged: set[int] = set()
    iterations_run = 0

    for iteration in range(1, max_iters + 1):
        ref_volume = Volume(reference, spacing)
        new_transforms = list(transforms)
        new_warps: list[np.ndarray] = []
        new_masks: list[np.ndarray] = []
        included: list[int] = []
        for i, subject in enumerate(normed):
            try:
                result = register_rigid(subject, ref_volume, cfg)
                warped, mask = warp_onto(subject, result.rt, grid)
            except SlicelocError:
                flagged.add(i)
                continue
            new_transforms[i] = result.rt
            new_warps.append(warped)
            new_masks.append(mask)
            included.append(i)
        if not included:
            break
        candidate = _masked_mean(new_warps, new_masks)
        score = _mean_score(new_warps, new_masks, candidate)
        if score < scores[-1]:
            break
        reference = candidate
        transforms = new_transforms
        iterations_run = iteration
        scores.append(score)
        if score - scores[-2] < _STOP_IMPROVEMENT:
            break

    lo = float(reference.min())
    hi = float(reference.max())
    data = np.zeros_like(reference) if hi <= lo else (reference - lo) / (hi - lo)
    return AtlasBuild(
        atlas=Volume(data, spacing),
        subject_transforms=tuple(transforms),
        iterations_run=iterations_run,
        mean_ncc=tuple(scores),
        flagged=tuple(sorted(flagged)),
    )


def align_to_atlas(
    v: Volume, atlas: Volume, cfg: RegistrationConfig | None = None
) -> tuple[Volume, Pose]:
    """Rigidly register ``v`` to the atlas and resample it onto the atlas grid."""
    if cfg is None:
        cfg = RegistrationConfig()
    result = register_rigid(v, atlas, cfg)
    moved = resample_volume(v, result.rt, out_dims=atlas.dims, out_spacing=atlas.spacing)
    return moved, result.rt


def save_atlas_build(
    build: AtlasBuild,
    volume_path: str,
    manifest_path: str,
    subject_files: list[str] | None = None,
) -> None:
    """Write the atlas volume plus a JSON manifest of transforms and scores."""
    names = list(subject_files) if subject_files is not None else []
    if names and len(names) != len(build.subject_transforms):
        raise DataError("one subject file name per transform is required")
    save_volume(build.atlas, volume_path)
    subjects = []
    for i, rt in enumerate(build.subject_transforms):
        entry = {"transform": rt.to_json_dict()}
        if names:
            entry["file"] = names[i]
        subjects.append(entry)
    write_json(
        {
            "size": build.atlas.dims[0],
            "spacing_mm": build.atlas.spacing,
            "iterations_run": build.iterations_run,
            "mean_ncc": list(build.mean_ncc),
            "flagged_subjects": list(build.flagged),
            "subjects": subjects,
        },
        manifest_path,
    )

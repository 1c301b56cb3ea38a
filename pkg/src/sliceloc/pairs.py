"""Paired slice and pose sample generation with both label encodings."""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path
from typing import Iterator

import numpy as np

from .errors import DataError
from .fileio import read_jsonl, save_slice, write_jsonl
from .geom import (
    Pose,
    SliceGeometry,
    ThreePoint,
    build_pose,
    fibonacci_normals,
    pose_to_three_point,
    rotation_to_rotvec,
    rotvec_to_rotation,
    three_point_to_pose,
)
from .volume import Slice, Volume, extract_slice

_TRANS_BOUND_FRACTION = 0.33


@dataclass(frozen=True)
class PairSpec:
    """Sampling grid for slice-pose pairs.

    Normals come from the Fibonacci sphere schedule, offsets along each
    normal from the closed arithmetic grid, and in-plane angles from
    ``inplane_per_normal`` uniform draws on [0, pi) per (normal, offset).
    ``inplane_per_normal = 0`` emits one pair per (normal, offset) with the
    in-plane angle pinned to zero and no randomness consumed.
    """

    n_rotations: int
    inplane_per_normal: int
    trans_min_mm: float
    trans_max_mm: float
    trans_step_mm: float
    slice_geometry: SliceGeometry

    def __post_init__(self):
        if self.n_rotations < 1:
            raise DataError("n_rotations must be at least 1")
        if self.inplane_per_normal < 0:
            raise DataError("inplane_per_normal must be non-negative")
        if self.trans_step_mm <= 0.0:
            raise DataError("trans_step_mm must be positive")
        if self.trans_min_mm > self.trans_max_mm:
            raise DataError("translation range is empty")

    def offsets_mm(self) -> np.ndarray:
        n = int(np.floor((self.trans_max_mm - self.trans_min_mm) / self.trans_step_mm + 1e-9))
        return self.trans_min_mm + self.trans_step_mm * np.arange(n + 1)

    def pairs_per_subject(self) -> int:
        reps = max(self.inplane_per_normal, 1)
        return self.n_rotations * len(self.offsets_mm()) * reps


@dataclass(frozen=True)
class LabeledPair:
    slice_ref: str
    pose: Pose
    rotvec_cartesian: np.ndarray
    three_point: np.ndarray
    subject_id: int


def encode_rotvec_cartesian(p: Pose) -> np.ndarray:
    """Pose as six numbers: canonical rotation vector, then translation."""
    return np.concatenate([rotation_to_rotvec(p.rotation), p.translation])


def decode_rotvec_cartesian(v) -> Pose:
    v = np.asarray(v, dtype=np.float64)
    if v.shape != (6,):
        raise DataError(f"rotvec-cartesian label must have 6 entries, got shape {v.shape}")
    return Pose(rotvec_to_rotation(v[:3]), v[3:].copy())


def encode_three_point(p: Pose, g: SliceGeometry) -> np.ndarray:
    """Pose as nine numbers: slice center and the two upper corners, in mm."""
    return pose_to_three_point(p, g).as_vector()


def decode_three_point(v, g: SliceGeometry) -> Pose:
    v = np.asarray(v, dtype=np.float64)
    if v.shape != (9,):
        raise DataError(f"three-point label must have 9 entries, got shape {v.shape}")
    return three_point_to_pose(ThreePoint.from_vector(v), g)


def _check_translation_bound(aligned: Volume, spec: PairSpec) -> None:
    bound = _TRANS_BOUND_FRACTION * min(aligned.dims) * aligned.spacing
    if spec.trans_min_mm <= -bound or spec.trans_max_mm >= bound:
        raise DataError(
            f"translation range [{spec.trans_min_mm}, {spec.trans_max_mm}] mm must lie "
            f"strictly inside (-{bound}, {bound}) mm for this volume"
        )


def iter_pairs(
    aligned: Volume, spec: PairSpec, seed: int, subject_id: int = 0
) -> Iterator[tuple[LabeledPair, Slice]]:
    """Yield every (label, slice) combination of the sampling grid in order.

    Order is normal-major, then offset, then in-plane repeat, so emission is
    reproducible for a given seed and subject id.
    """
    _check_translation_bound(aligned, spec)
    rng = np.random.default_rng([seed, subject_id])
    normals = fibonacci_normals(spec.n_rotations)
    offsets = spec.offsets_mm()
    reps = max(spec.inplane_per_normal, 1)
    index = 0
    for normal in normals:
        for offset in offsets:
            for _ in range(reps):
                if spec.inplane_per_normal == 0:
                    angle = 0.0
                else:
                    angle = float(rng.uniform(0.0, np.pi))
                pose = build_pose(normal, angle, float(offset))
                sl = extract_slice(aligned, pose, spec.slice_geometry)
                pair = LabeledPair(
                    slice_ref=f"s{subject_id:03d}_p{index:06d}.pgm",
                    pose=pose,
                    rotvec_cartesian=encode_rotvec_cartesian(pose),
                    three_point=encode_three_point(pose, spec.slice_geometry),
                    subject_id=subject_id,
                )
                yield pair, sl
                index += 1


def generate_pairs(
    aligned: Volume,
    spec: PairSpec,
    seed: int,
    subject_id: int = 0,
    out_dir: str | None = None,
) -> list[LabeledPair]:
    """Materialize the full pair list; write slice images when ``out_dir`` is set."""
    directory = None
    if out_dir is not None:
        directory = Path(out_dir)
        directory.mkdir(parents=True, exist_ok=True)
    pairs = []
    for pair, sl in iter_pairs(aligned, spec, seed, subject_id):
        if directory is not None:
            save_slice(sl, directory / pair.slice_ref)
        pairs.append(pair)
    return pairs


def save_pairs_manifest(pairs: list[LabeledPair], path) -> None:
    records = [
        {
            "slice": p.slice_ref,
            "subject": p.subject_id,
            "pose": p.pose.to_json_dict(),
            "rotvec_cartesian": [float(x) for x in p.rotvec_cartesian],
            "three_point": [float(x) for x in p.three_point],
        }
        for p in pairs
    ]
    write_jsonl(records, path)


def load_pairs_manifest(path) -> list[LabeledPair]:
    pairs = []
    for i, rec in enumerate(read_jsonl(path)):
        try:
            pairs.append(
                LabeledPair(
                    slice_ref=rec["slice"],
                    pose=Pose.from_json_dict(rec["pose"]),
                    rotvec_cartesian=np.asarray(rec["rotvec_cartesian"], dtype=np.float64),
                    three_point=np.asarray(rec["three_point"], dtype=np.float64),
                    subject_id=int(rec["subject"]),
                )
            )
        except (KeyError, TypeError, ValueError) as exc:
            raise DataError(f"malformed pair record at line {i + 1} of {path}") from exc
    return pairs

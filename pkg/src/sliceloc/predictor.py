"""Pose prediction from a slice: nearest-neighbor bank baseline plus the
loss and error functions used to evaluate any predictor."""

from __future__ import annotations

import abc
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .errors import DataError, UsageError
from .fileio import load_slice, read_json, write_json
from .geom import Pose, geodesic_distance, pose_to_three_point
from .pairs import PairSpec, iter_pairs, load_pairs_manifest
from .similarity import extract_downsample
from .volume import Slice, Volume

DEFAULT_LOSS_LAMBDA = 0.01


class PosePredictor(abc.ABC):
    """Anything that maps a 2D slice to a pose in the reference frame."""

    @abc.abstractmethod
    def predict(self, s: Slice) -> Pose:
        raise NotImplementedError


@dataclass(frozen=True)
class SliceBank:
    """Feature-indexed pose lookup table.

    ``features`` is (N, d*d), one z-scored area-downsampled slice per row,
    matched one-to-one with ``poses`` and ``refs``.
    """

    features: np.ndarray
    poses: tuple[Pose, ...]
    refs: tuple[str, ...]
    d: int

    def __post_init__(self):
        if self.features.ndim != 2:
            raise DataError("bank features must be a 2D matrix")
        if self.features.shape[0] != len(self.poses) or len(self.poses) != len(self.refs):
            raise DataError("bank features, poses, and refs must align")
        if self.features.shape[0] > 0 and self.features.shape[1] != self.d * self.d:
            raise DataError(
                f"bank feature length {self.features.shape[1]} does not match d={self.d}"
            )

    def __len__(self) -> int:
        return len(self.poses)


def build_bank(manifest_path, d: int = 48) -> SliceBank:
    """Load every slice referenced by a pair manifest into a bank.

    Slice files are resolved relative to the manifest's directory.
    """
    pairs = load_pairs_manifest(manifest_path)
    base = Path(manifest_path).parent
    rows = []
    for i, pair in enumerate(pairs):
        try:
            sl = load_slice(base / pair.slice_ref)
        except DataError as exc:
            raise DataError(
                f"line {i + 1} of {manifest_path}: cannot load slice {pair.slice_ref!r}"
            ) from exc
        rows.append(extract_downsample(sl, d).astype(np.float32))
    features = np.asarray(rows, dtype=np.float32).reshape(len(rows), d * d)
    return SliceBank(
        features=features,
        poses=tuple(p.pose for p in pairs),
        refs=tuple(p.slice_ref for p in pairs),
        d=d,
    )


def bank_from_volume(
    aligned: Volume, spec: PairSpec, seed: int, d: int = 48, subject_id: int = 0
) -> SliceBank:
    """Build a bank by extracting the sampling grid in memory, no files."""
    rows = []
    poses = []
    refs = []
    for pair, sl in iter_pairs(aligned, spec, seed, subject_id):
        rows.append(extract_downsample(sl, d).astype(np.float32))
        poses.append(pair.pose)
        refs.append(pair.slice_ref)
    features = np.asarray(rows, dtype=np.float32).reshape(len(rows), d * d)
    return SliceBank(features=features, poses=tuple(poses), refs=tuple(refs), d=d)


def knn_predict(bank: SliceBank, s: Slice, k: int = 1) -> Pose:
    """Pose of the cosine-nearest bank entry; ties go to the lowest index."""
    if k != 1:
        raise UsageError("only k=1 retrieval is supported")
    if len(bank) == 0:
        raise DataError("cannot predict from an empty bank")
    q = extract_downsample(s, bank.d)
    qn = np.linalg.norm(q)
    norms = np.linalg.norm(bank.features, axis=1)
    denom = np.maximum(norms * qn, 1e-300)
    sims = np.where((norms > 0.0) & (qn > 0.0), bank.features @ q / denom, 0.0)
    return bank.poses[int(np.argmax(sims))]


class KnnPredictor(PosePredictor):
    def __init__(self, bank: SliceBank):
        self.bank = bank

    def predict(self, s: Slice) -> Pose:
        return knn_predict(self.bank, s)


def save_bank(bank: SliceBank, directory) -> None:
    """Persist a bank as a float32 blob plus a JSON header."""
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    blob = "features.f32"
    np.asarray(bank.features, dtype="<f4").tofile(directory / blob)
    write_json(
        {
            "d": bank.d,
            "count": len(bank),
            "features": blob,
            "refs": list(bank.refs),
            "poses": [p.to_json_dict() for p in bank.poses],
        },
        directory / "bank.json",
    )


def load_bank(directory) -> SliceBank:
    directory = Path(directory)
    header = read_json(directory / "bank.json")
    try:
        d = int(header["d"])
        count = int(header["count"])
        refs = tuple(header["refs"])
        poses = tuple(Pose.from_json_dict(p) for p in header["poses"])
        raw = np.fromfile(directory / header["features"], dtype="<f4")
    except (KeyError, TypeError, ValueError, OSError) as exc:
        raise DataError(f"malformed bank at {directory}") from exc
    if raw.size != count * d * d:
        raise DataError(
            f"bank blob holds {raw.size} values, expected {count * d * d}"
        )
    return SliceBank(features=raw.reshape(count, d * d), poses=poses, refs=refs, d=d)


def loss_rotvec_cartesian(pred: Pose, gt: Pose, lam: float = DEFAULT_LOSS_LAMBDA) -> float:
    """Geodesic rotation distance plus lam times squared translation error."""
    if lam <= 0.0:
        raise UsageError("lambda must be positive")
    dt = pred.translation - gt.translation
    return float(geodesic_distance(pred.rotation, gt.rotation) + lam * np.dot(dt, dt))


def loss_three_point(pred, gt) -> float:
    """Sum over the three label points of the squared Euclidean distance."""
    a = np.asarray(pred.as_vector() if hasattr(pred, "as_vector") else pred, dtype=np.float64)
    b = np.asarray(gt.as_vector() if hasattr(gt, "as_vector") else gt, dtype=np.float64)
    if a.shape != (9,) or b.shape != (9,):
        raise DataError("three-point labels must have 9 entries")
    diff = (a - b).reshape(3, 3)
    return float((diff * diff).sum())


def euclidean_error(pred_point, gt_point) -> float:
    return float(np.linalg.norm(np.asarray(pred_point, dtype=np.float64) - gt_point))


def _stats(values) -> dict:
    arr = np.asarray(values, dtype=np.float64)
    return {
        "mean": float(arr.mean()),
        "sd": float(arr.std()),
        "median": float(np.median(arr)),
    }


def evaluate_predictor(predictor: PosePredictor, manifest_path) -> dict:
    """Per-pair rotation and point errors against a held-out manifest.

    Reports mean, SD, and median of the rotation geodesic distance in
    degrees and of the Euclidean errors (mm) of the slice center, the two
    corner points, and the translation.
    """
    pairs = load_pairs_manifest(manifest_path)
    if not pairs:
        raise DataError(f"manifest {manifest_path} holds no pairs")
    base = Path(manifest_path).parent
    gd_deg = []
    eds = {"translation": [], "a1": [], "a2": [], "a3": []}
    for pair in pairs:
        sl = load_slice(base / pair.slice_ref)
        pred = predictor.predict(sl)
        gd_deg.append(np.degrees(geodesic_distance(pred.rotation, pair.pose.rotation)))
        eds["translation"].append(euclidean_error(pred.translation, pair.pose.translation))
        pred_tp = pose_to_three_point(pred, sl.geometry).as_vector().reshape(3, 3)
        gt_tp = pair.three_point.reshape(3, 3)
        for name, pp, gp in zip(("a1", "a2", "a3"), pred_tp, gt_tp):
            eds[name].append(euclidean_error(pp, gp))
    return {
        "n": len(pairs),
        "rotation_gd_deg": _stats(gd_deg),
        "translation_ed_mm": _stats(eds["translation"]),
        "a1_ed_mm": _stats(eds["a1"]),
        "a2_ed_mm": _stats(eds["a2"]),
        "a3_ed_mm": _stats(eds["a3"]),
    }

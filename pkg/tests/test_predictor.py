"""Slice-bank retrieval, loss functions, and predictor evaluation."""

import numpy as np
import pytest

from sliceloc.errors import DataError, UsageError
from sliceloc.geom import (
    Pose,
    SliceGeometry,
    build_pose,
    fibonacci_normals,
    geodesic_distance,
    pose_to_three_point,
    rotation_about_z,
    rotvec_to_rotation,
)
from sliceloc.pairs import PairSpec, generate_pairs, save_pairs_manifest
from sliceloc.phantom import render_scene_volume
from sliceloc.predictor import (
    KnnPredictor,
    PosePredictor,
    SliceBank,
    bank_from_volume,
    build_bank,
    euclidean_error,
    evaluate_predictor,
    knn_predict,
    load_bank,
    loss_rotvec_cartesian,
    loss_three_point,
    save_bank,
)
from sliceloc.volume import Slice, extract_slice

VOL = render_scene_volume((48, 48, 48), 1.0)
GEOM = SliceGeometry(width=32, height=32, spacing=1.25)
SPEC = PairSpec(
    n_rotations=16,
    inplane_per_normal=0,
    trans_min_mm=-8.0,
    trans_max_mm=8.0,
    trans_step_mm=4.0,
    slice_geometry=GEOM,
)
BANK = bank_from_volume(VOL, SPEC, seed=0, d=24)


def max_nearest_normal_angle(n: int) -> float:
    normals = fibonacci_normals(n)
    dots = np.clip(normals @ normals.T, -1.0, 1.0)
    np.fill_diagonal(dots, -1.0)
    return float(np.degrees(np.arccos(dots.max(axis=1))).max())


class Oracle(PosePredictor):
    def predict(self, s: Slice) -> Pose:
        assert s.pose is not None
        return s.pose


class TestBankBuild:
    def test_shapes(self):
        assert len(BANK) == 16 * 5
        assert BANK.features.shape == (80, 24 * 24)

    def test_empty_manifest_gives_empty_bank(self, tmp_path):
        path = tmp_path / "empty.jsonl"
        save_pairs_manifest([], path)
        bank = build_bank(path, d=24)
        assert len(bank) == 0
        probe = extract_slice(VOL, Pose.identity(), GEOM)
        with pytest.raises(DataError):
            knn_predict(bank, probe)

    def test_file_bank_matches_memory_bank(self, tmp_path):
        pairs = generate_pairs(VOL, SPEC, seed=0, out_dir=str(tmp_path))
        save_pairs_manifest(pairs, tmp_path / "pairs.jsonl")
        bank = build_bank(tmp_path / "pairs.jsonl", d=24)
        assert len(bank) == len(BANK)
        # 16-bit image quantization perturbs features slightly
        assert np.allclose(bank.features, BANK.features, atol=1e-3)

    def test_identical_slices_identical_features(self, tmp_path):
        spec = PairSpec(2, 0, 0.0, 0.0, 1.0, GEOM)
        pairs = generate_pairs(VOL, spec, seed=0, out_dir=str(tmp_path))
        doubled = pairs + [pairs[0]]
        save_pairs_manifest(doubled, tmp_path / "pairs.jsonl")
        bank = build_bank(tmp_path / "pairs.jsonl", d=24)
        assert np.array_equal(bank.features[0], bank.features[2])

    def test_missing_slice_file_names_line(self, tmp_path):
        pairs = generate_pairs(VOL, PairSpec(1, 0, 0.0, 0.0, 1.0, GEOM), seed=0)
        save_pairs_manifest(pairs, tmp_path / "pairs.jsonl")
        with pytest.raises(DataError, match="line 1"):
            build_bank(tmp_path / "pairs.jsonl", d=24)

    def test_misaligned_bank_rejected(self):
        with pytest.raises(DataError):
            SliceBank(
                features=np.zeros((2, 9), dtype=np.float32),
                poses=(Pose.identity(),),
                refs=("a", "b"),
                d=3,
            )


class TestKnnPredict:
    def test_self_retrieval(self):
        for idx in (0, 17, 79):
            sl = extract_slice(VOL, BANK.poses[idx], GEOM)
            pred = knn_predict(BANK, sl)
            assert np.array_equal(pred.rotation, BANK.poses[idx].rotation)
            assert np.array_equal(pred.translation, BANK.poses[idx].translation)

    def test_noise_robustness(self):
        rng = np.random.default_rng(5)
        sl = extract_slice(VOL, BANK.poses[33], GEOM)
        span = sl.data.max() - sl.data.min()
        noisy = Slice(sl.data + rng.normal(0.0, 0.01 * span, sl.data.shape), GEOM, sl.pose)
        pred = knn_predict(BANK, noisy)
        assert np.array_equal(pred.translation, BANK.poses[33].translation)

    def test_midway_offset_within_grid_step(self):
        normal = fibonacci_normals(16)[7]
        query_pose = build_pose(normal, 0.0, 2.0)
        pred = knn_predict(BANK, extract_slice(VOL, query_pose, GEOM))
        gd = np.degrees(geodesic_distance(pred.rotation, query_pose.rotation))
        assert gd <= max_nearest_normal_angle(16)
        assert np.linalg.norm(pred.translation - query_pose.translation) <= SPEC.trans_step_mm

    def test_only_single_neighbor_supported(self):
        sl = extract_slice(VOL, BANK.poses[0], GEOM)
        with pytest.raises(UsageError):
            knn_predict(BANK, sl, k=3)


class TestBankPersistence:
    def test_round_trip(self, tmp_path):
        save_bank(BANK, tmp_path / "bank")
        bank = load_bank(tmp_path / "bank")
        assert bank.d == BANK.d
        assert bank.refs == BANK.refs
        assert np.array_equal(bank.features, BANK.features)
        for a, b in zip(bank.poses, BANK.poses):
            assert np.allclose(a.rotation, b.rotation, atol=1e-12)
            assert np.array_equal(a.translation, b.translation)

    def test_bytes_deterministic(self, tmp_path):
        save_bank(BANK, tmp_path / "b1")
        save_bank(BANK, tmp_path / "b2")
        assert (tmp_path / "b1/bank.json").read_bytes() == (tmp_path / "b2/bank.json").read_bytes()
        assert (
            tmp_path / "b1/features.f32"
        ).read_bytes() == (tmp_path / "b2/features.f32").read_bytes()

    def test_truncated_blob_rejected(self, tmp_path):
        save_bank(BANK, tmp_path / "bank")
        blob = tmp_path / "bank/features.f32"
        blob.write_bytes(blob.read_bytes()[:-8])
        with pytest.raises(DataError):
            load_bank(tmp_path / "bank")


class TestLossRotvecCartesian:
    def test_zero_iff_equal(self):
        p = build_pose(np.array([0.0, 1.0, 0.0]), 0.3, 5.0)
        assert loss_rotvec_cartesian(p, p) == 0.0

    def test_rotation_only_term(self):
        gt = Pose.identity()
        pred = Pose(rotation_about_z(np.pi / 2), np.zeros(3))
        for lam in (0.01, 1.0, 7.0):
            assert loss_rotvec_cartesian(pred, gt, lam) == pytest.approx(np.pi / 2, abs=1e-12)

    def test_translation_only_term(self):
        gt = Pose.identity()
        pred = Pose(np.eye(3), np.array([3.0, 0.0, 0.0]))
        assert loss_rotvec_cartesian(pred, gt, lam=0.01) == pytest.approx(0.09, abs=1e-12)

    def test_lambda_must_be_positive(self):
        with pytest.raises(UsageError):
            loss_rotvec_cartesian(Pose.identity(), Pose.identity(), lam=0.0)

    def test_never_nan_on_random_pairs(self):
        rng = np.random.default_rng(11)
        for _ in range(1000):
            a = rng.normal(size=3)
            b = rng.normal(size=3)
            pa = Pose(rotvec_to_rotation(a / np.linalg.norm(a) * rng.uniform(0, np.pi)), rng.normal(size=3))
            pb = Pose(rotvec_to_rotation(b / np.linalg.norm(b) * rng.uniform(0, np.pi)), rng.normal(size=3))
            assert np.isfinite(loss_rotvec_cartesian(pa, pb))


class TestLossThreePoint:
    def test_zero_iff_equal(self):
        tp = pose_to_three_point(Pose.identity(), GEOM)
        assert loss_three_point(tp, tp) == 0.0

    def test_uniform_shift(self):
        tp = pose_to_three_point(Pose.identity(), GEOM)
        shifted = tp.as_vector() + np.tile([1.0, 0.0, 0.0], 3)
        assert loss_three_point(shifted, tp) == pytest.approx(3.0, abs=1e-12)

    def test_matches_brute_force(self):
        rng = np.random.default_rng(13)
        for _ in range(200):
            a = rng.normal(size=9)
            b = rng.normal(size=9)
            expected = sum(
                np.linalg.norm(a[3 * i : 3 * i + 3] - b[3 * i : 3 * i + 3]) ** 2 for i in range(3)
            )
            assert loss_three_point(a, b) == pytest.approx(expected, abs=1e-12)


class TestEuclideanError:
    def test_equal_points(self):
        assert euclidean_error([1.0, 2.0, 3.0], np.array([1.0, 2.0, 3.0])) == 0.0

    def test_pythagorean(self):
        assert euclidean_error([3.0, 4.0, 0.0], np.zeros(3)) == pytest.approx(5.0)

    def test_matches_loss_contribution(self):
        a = np.array([1.0, -2.0, 0.5, 0, 0, 0, 0, 0, 0])
        b = np.zeros(9)
        assert euclidean_error(a[:3], b[:3]) ** 2 == pytest.approx(loss_three_point(a, b))


class TestEvaluate:
    def test_oracle_scores_zero(self, tmp_path):
        pairs = generate_pairs(VOL, SPEC, seed=2, out_dir=str(tmp_path))
        save_pairs_manifest(pairs[:20], tmp_path / "pairs.jsonl")
        report = evaluate_predictor(Oracle(), tmp_path / "pairs.jsonl")
        assert report["n"] == 20
        assert report["rotation_gd_deg"]["mean"] <= 1e-5
        assert report["translation_ed_mm"]["mean"] <= 1e-9
        assert report["a2_ed_mm"]["mean"] <= 1e-5

    def test_center_point_error_equals_translation_error(self, tmp_path):
        pairs = generate_pairs(VOL, SPEC, seed=2, out_dir=str(tmp_path))
        save_pairs_manifest(pairs[:10], tmp_path / "pairs.jsonl")
        report = evaluate_predictor(KnnPredictor(BANK), tmp_path / "pairs.jsonl")
        assert report["a1_ed_mm"] == report["translation_ed_mm"]

    def test_report_schema(self, tmp_path):
        pairs = generate_pairs(VOL, SPEC, seed=2, out_dir=str(tmp_path))
        save_pairs_manifest(pairs[:10], tmp_path / "pairs.jsonl")
        report = evaluate_predictor(KnnPredictor(BANK), tmp_path / "pairs.jsonl")
        for key in ("rotation_gd_deg", "translation_ed_mm", "a1_ed_mm", "a2_ed_mm", "a3_ed_mm"):
            for stat in ("mean", "sd", "median"):
                assert np.isfinite(report[key][stat])

    def test_empty_manifest_rejected(self, tmp_path):
        save_pairs_manifest([], tmp_path / "pairs.jsonl")
        with pytest.raises(DataError):
            evaluate_predictor(Oracle(), tmp_path / "pairs.jsonl")

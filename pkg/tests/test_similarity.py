"""Tests for similarity metrics and feature extractors."""

import numpy as np
import pytest

from sliceloc.errors import DataError
from sliceloc.geom import SliceGeometry
from sliceloc.similarity import (
    DownsampleExtractor,
    GradHistExtractor,
    PrecomputedFeatureStore,
    SsimParams,
    csim,
    default_ssim_params,
    downsample_batch,
    extract_downsample,
    extract_gradhist,
    mse_image,
    ssim,
)
from sliceloc.volume import Slice


def textured(seed, shape=(32, 32), smooth=2.0):
    from scipy import ndimage
    rng = np.random.default_rng(seed)
    return ndimage.gaussian_filter(rng.uniform(0, 1, shape), smooth)


class TestSsim:
    def test_identical_is_one(self):
        img = textured(1)
        assert ssim(img, img) == pytest.approx(1.0, abs=1e-12)

    def test_constant_pair_closed_form(self):
        """Constant 0 vs constant 1 reduces to c1 / (1 + c1) per window."""
        q = np.zeros((16, 16))
        s = np.ones((16, 16))
        got = ssim(q, s)
        c1 = 1e-4  # query range degenerates to 1.0 -> (0.01 * 1)^2
        assert got == pytest.approx(c1 / (1.0 + c1), rel=1e-9)
        assert got < 1.0

    def test_noise_monotonicity(self):
        """More noise scores lower against the clean image."""
        img = textured(2)
        rng = np.random.default_rng(3)
        span = img.max() - img.min()
        noise = rng.normal(0, 1, img.shape)
        little = ssim(img, img + 0.02 * span * noise)
        lots = ssim(img, img + 0.3 * span * noise)
        assert lots < little < 1.0

    def test_symmetric_with_shared_params(self):
        a, b = textured(4), textured(5)
        params = default_ssim_params(a)
        assert ssim(a, b, params) == pytest.approx(ssim(b, a, params), abs=1e-12)

    def test_bounded(self):
        rng = np.random.default_rng(6)
        for _ in range(20):
            a = rng.uniform(-5, 5, (16, 16))
            b = rng.uniform(-5, 5, (16, 16))
            v = ssim(a, b)
            assert -1.0 <= v <= 1.0

    def test_shape_mismatch(self):
        with pytest.raises(ValueError):
            ssim(np.zeros((8, 8)), np.zeros((8, 9)))

    def test_window_too_big(self):
        with pytest.raises(ValueError):
            ssim(np.zeros((8, 8)), np.zeros((8, 8)), SsimParams(window=11))

    def test_accepts_slice_objects(self):
        img = textured(7, (16, 16))
        s = Slice(img, SliceGeometry(16, 16, 1.0))
        assert ssim(s, s) == pytest.approx(1.0)

    def test_params_validation(self):
        with pytest.raises(ValueError):
            SsimParams(window=4)
        with pytest.raises(ValueError):
            SsimParams(c1=0.0)

    def test_default_params_use_query_range(self):
        img = 100.0 * textured(8)
        p = default_ssim_params(img)
        r = img.max() - img.min()
        assert p.c1 == pytest.approx((0.01 * r) ** 2)
        assert p.c2 == pytest.approx((0.03 * r) ** 2)


class TestMseImage:
    def test_identical_is_zero(self):
        img = textured(9)
        assert mse_image(img, img) == 0.0

    def test_constant_offset(self):
        assert mse_image(np.zeros((5, 7)), np.full((5, 7), 2.0)) == pytest.approx(4.0)

    def test_matches_double_loop(self):
        rng = np.random.default_rng(10)
        a = rng.uniform(0, 1, (9, 11))
        b = rng.uniform(0, 1, (9, 11))
        acc = 0.0
        for r in range(9):
            for c in range(11):
                acc += (a[r, c] - b[r, c]) ** 2
        assert mse_image(a, b) == pytest.approx(acc / (9 * 11), abs=1e-9)

    def test_symmetric(self):
        a, b = textured(11), textured(12)
        assert mse_image(a, b) == pytest.approx(mse_image(b, a))

    def test_shape_mismatch(self):
        with pytest.raises(ValueError):
            mse_image(np.zeros((4, 4)), np.zeros((5, 4)))


class TestCsim:
    def test_self_is_one(self):
        f = np.array([1.0, 2.0, -3.0])
        assert csim(f, f) == pytest.approx(1.0)

    def test_negation_is_minus_one(self):
        f = np.array([1.0, 2.0, -3.0])
        assert csim(f, -f) == pytest.approx(-1.0)

    def test_orthogonal_is_zero(self):
        assert csim([1.0, 0.0], [0.0, 1.0]) == pytest.approx(0.0)

    def test_zero_vector_scores_zero(self):
        assert csim([0.0, 0.0, 0.0], [1.0, 2.0, 3.0]) == 0.0
        assert csim([0.0, 0.0], [0.0, 0.0]) == 0.0

    def test_scale_invariance(self):
        rng = np.random.default_rng(13)
        for _ in range(50):
            f1, f2 = rng.normal(size=20), rng.normal(size=20)
            alpha = rng.uniform(0.01, 100)
            assert csim(alpha * f1, f2) == pytest.approx(csim(f1, f2), abs=1e-12)

    def test_length_mismatch(self):
        with pytest.raises(ValueError):
            csim([1.0, 2.0], [1.0, 2.0, 3.0])

    def test_clipped_to_unit_interval(self):
        rng = np.random.default_rng(14)
        for _ in range(100):
            f = rng.normal(size=8)
            assert -1.0 <= csim(f, rng.normal(size=8)) <= 1.0


class TestDownsampleExtractor:
    def test_constant_gives_zero_vector(self):
        assert np.all(extract_downsample(np.full((20, 20), 5.0), 4) == 0.0)

    def test_identical_slices_identical_features(self):
        img = textured(15)
        assert np.array_equal(extract_downsample(img, 8), extract_downsample(img, 8))

    def test_feature_length(self):
        assert extract_downsample(textured(16), 12).shape == (144,)

    def test_exact_block_average(self):
        """When dims divide evenly, pooling equals the plain block mean."""
        rng = np.random.default_rng(17)
        img = rng.uniform(0, 1, (12, 12))
        blocks = img.reshape(4, 3, 4, 3).mean(axis=(1, 3))
        pooled = (blocks - blocks.mean()) / blocks.std()
        assert np.allclose(extract_downsample(img, 4), pooled.reshape(-1), atol=1e-12)

    def test_fractional_edges(self):
        """Pooling [1,2,3] to two cells integrates the half-covered pixel."""
        img = np.array([[1.0, 2.0, 3.0], [1.0, 2.0, 3.0]])
        from sliceloc.similarity import _area_reduce
        out = _area_reduce(img, 2, 1)
        assert np.allclose(out, [[4 / 3, 8 / 3], [4 / 3, 8 / 3]])

    def test_normalized_stats(self):
        f = extract_downsample(textured(18), 10)
        assert f.mean() == pytest.approx(0.0, abs=1e-9)
        assert f.std() == pytest.approx(1.0, rel=1e-9)

    def test_batch_matches_single(self):
        imgs = np.stack([textured(19), textured(20), np.full((32, 32), 2.0)])
        batch = downsample_batch(imgs, 6)
        for i in range(3):
            assert np.allclose(batch[i], extract_downsample(imgs[i], 6), atol=1e-12)

    def test_extractor_object(self):
        ex = DownsampleExtractor(8)
        img = textured(21)
        assert np.allclose(ex.extract(img), extract_downsample(img, 8))
        many = ex.extract_many(np.stack([img, img]))
        assert many.shape == (2, 64)


class TestGradHistExtractor:
    def test_identical_features(self):
        img = textured(22)
        assert np.array_equal(extract_gradhist(img), extract_gradhist(img))

    def test_length(self):
        assert extract_gradhist(textured(23), cells=4, bins=6).shape == (96,)

    def test_rotation_sensitivity(self):
        """A quarter-turn reshuffles orientations, so csim drops below 1."""
        img = textured(24, (40, 40), smooth=1.5)
        rot = np.rot90(img)
        score = csim(extract_gradhist(img), extract_gradhist(rot))
        assert score < 0.999

    def test_flat_image_zero_histograms(self):
        f = extract_gradhist(np.full((20, 20), 1.0))
        assert np.all(f == 0.0)

    def test_extractor_object(self):
        ex = GradHistExtractor(cells=3, bins=4)
        assert ex.extract(textured(25)).shape == (36,)


class TestPrecomputedFeatureStore:
    def test_write_then_lookup(self, tmp_path):
        feats = np.arange(12, dtype=np.float32).reshape(3, 4)
        store = PrecomputedFeatureStore.write(
            tmp_path / "emb", ["a.pgm", "b.pgm", "c.pgm"], feats)
        assert store.dim == 4
        assert np.allclose(store.lookup("b.pgm"), [4, 5, 6, 7])
        assert "a.pgm" in store
        assert "z.pgm" not in store

    def test_reload_from_disk(self, tmp_path):
        feats = np.ones((2, 5), dtype=np.float32)
        PrecomputedFeatureStore.write(tmp_path / "emb", ["x", "y"], feats)
        store = PrecomputedFeatureStore(tmp_path / "emb")
        assert sorted(store.keys()) == ["x", "y"]
        assert np.allclose(store.lookup("x"), 1.0)

    def test_missing_key(self, tmp_path):
        store = PrecomputedFeatureStore.write(tmp_path / "emb", ["x"],
                                              np.zeros((1, 2), np.float32))
        with pytest.raises(DataError):
            store.lookup("missing")

    def test_missing_index(self, tmp_path):
        with pytest.raises(DataError):
            PrecomputedFeatureStore(tmp_path)

    def test_blob_size_mismatch(self, tmp_path):
        PrecomputedFeatureStore.write(tmp_path / "emb", ["x"],
                                      np.zeros((1, 4), np.float32))
        blob = tmp_path / "emb" / "features.f32"
        blob.write_bytes(blob.read_bytes()[:-4])
        with pytest.raises(DataError):
            PrecomputedFeatureStore(tmp_path / "emb")

    def test_row_out_of_range(self, tmp_path):
        import json
        PrecomputedFeatureStore.write(tmp_path / "emb", ["x"],
                                      np.zeros((1, 4), np.float32))
        idx = tmp_path / "emb" / "index.json"
        meta = json.loads(idx.read_text())
        meta["keys"]["x"] = 5
        idx.write_text(json.dumps(meta))
        with pytest.raises(DataError):
            PrecomputedFeatureStore(tmp_path / "emb")

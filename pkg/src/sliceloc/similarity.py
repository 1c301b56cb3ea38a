"""Slice similarity metrics and feature extraction for candidate scoring.

ssim/mse_image compare full images; csim compares feature vectors.  The
built-in extractors (area downsample, gradient histograms) are deterministic
stand-ins for an offline neural embedding, which can be supplied instead
through PrecomputedFeatureStore.
"""
from __future__ import annotations

import json
from abc import ABC, abstractmethod
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from scipy import ndimage

from .errors import DataError
from .volume import Slice

_EPS = 1e-12


def _image_of(x) -> np.ndarray:
    if isinstance(x, Slice):
        return x.data
    arr = np.asarray(x, dtype=np.float64)
    if arr.ndim != 2:
        raise ValueError("expected a Slice or a 2D array")
    return arr


@dataclass(frozen=True)
class SsimParams:
    window: int = 11
    c1: float = 1e-4
    c2: float = 9e-4
    dynamic_range: float = 1.0

    def __post_init__(self):
        if self.window < 3 or self.window % 2 == 0:
            raise ValueError("ssim window must be odd and >= 3")
        if not (self.c1 > 0 and self.c2 > 0):
            raise ValueError("ssim stabilizers must be positive")


def default_ssim_params(query, window: int = 11) -> SsimParams:
    """Stabilizers (0.01 r)^2 and (0.03 r)^2 from the query's observed range."""
    img = _image_of(query)
    r = float(img.max() - img.min())
    if r <= 0:
        r = 1.0
    return SsimParams(window=window, c1=(0.01 * r) ** 2, c2=(0.03 * r) ** 2,
                      dynamic_range=r)


def ssim(q, s, params: SsimParams | None = None) -> float:
    """Mean local structural similarity over all fully valid windows."""
    a = _image_of(q)
    b = _image_of(s)
    if a.shape != b.shape:
        raise ValueError(f"ssim shape mismatch: {a.shape} vs {b.shape}")
    if params is None:
        params = default_ssim_params(a)
    w = params.window
    if min(a.shape) < w:
        raise ValueError(f"image {a.shape} smaller than ssim window {w}")

    mu_a = ndimage.uniform_filter(a, w)
    mu_b = ndimage.uniform_filter(b, w)
    var_a = ndimage.uniform_filter(a * a, w) - mu_a * mu_a
    var_b = ndimage.uniform_filter(b * b, w) - mu_b * mu_b
    cov = ndimage.uniform_filter(a * b, w) - mu_a * mu_b

    num = (2.0 * mu_a * mu_b + params.c1) * (2.0 * cov + params.c2)
    den = (mu_a * mu_a + mu_b * mu_b + params.c1) * (var_a + var_b + params.c2)
    m = w // 2  # only windows fully inside the image
    core = (slice(m, a.shape[0] - m), slice(m, a.shape[1] - m))
    return float((num[core] / den[core]).mean())


def mse_image(q, s) -> float:
    """Mean squared pixel difference."""
    a = _image_of(q)
    b = _image_of(s)
    if a.shape != b.shape:
        raise ValueError(f"mse shape mismatch: {a.shape} vs {b.shape}")
    return float(np.mean((a - b) ** 2))


def csim(f1, f2) -> float:
    """Cosine similarity; zero-norm vectors score 0 by convention."""
    a = np.asarray(f1, dtype=np.float64).reshape(-1)
    b = np.asarray(f2, dtype=np.float64).reshape(-1)
    if a.shape != b.shape:
        raise ValueError(f"csim length mismatch: {a.shape[0]} vs {b.shape[0]}")
    na = np.linalg.norm(a)
    nb = np.linalg.norm(b)
    if na == 0.0 or nb == 0.0:
        return 0.0
    return float(np.clip(np.dot(a, b) / (na * nb), -1.0, 1.0))


def _area_reduce(arr: np.ndarray, d: int, axis: int) -> np.ndarray:
    """Exact area-average pooling of one axis down to d samples.

    Treats each input sample as a unit box, so the cumulative sum is the exact
    integral and fractional bin edges are handled without approximation.
    """
    arr = np.moveaxis(np.asarray(arr, dtype=np.float64), axis, 0)
    n = arr.shape[0]
    zeros = np.zeros((1,) + arr.shape[1:], dtype=np.float64)
    integral = np.concatenate([zeros, np.cumsum(arr, axis=0)], axis=0)
    edges = np.linspace(0.0, float(n), d + 1)
    lo = np.minimum(edges.astype(np.int64), n)
    frac = (edges - lo).reshape((-1,) + (1,) * (arr.ndim - 1))
    at_edges = integral[lo] + frac * arr[np.minimum(lo, n - 1)]
    width = float(n) / d
    return np.moveaxis((at_edges[1:] - at_edges[:-1]) / width, 0, axis)


def _normalize_rows(flat: np.ndarray) -> np.ndarray:
    mean = flat.mean(axis=-1, keepdims=True)
    sd = flat.std(axis=-1, keepdims=True)
    out = np.where(sd > _EPS, (flat - mean) / np.maximum(sd, _EPS), 0.0)
    return out


def extract_downsample(s, d: int = 48) -> np.ndarray:
    """Area-average the image to d x d, then z-score; constant images -> 0."""
    img = _image_of(s)
    if d < 1:
        raise ValueError("downsample size must be >= 1")
    small = _area_reduce(_area_reduce(img, d, 0), d, 1)
    return _normalize_rows(small.reshape(-1))


def downsample_batch(images: np.ndarray, d: int = 48) -> np.ndarray:
    """extract_downsample over a stack (N, H, W) -> (N, d*d)."""
    stack = np.asarray(images, dtype=np.float64)
    if stack.ndim != 3:
        raise ValueError("expected an (N, H, W) stack")
    small = _area_reduce(_area_reduce(stack, d, 1), d, 2)
    return _normalize_rows(small.reshape(stack.shape[0], -1))


def extract_gradhist(s, cells: int = 6, bins: int = 9) -> np.ndarray:
    """Magnitude-weighted orientation histograms on a cells x cells grid.

    Orientations are unsigned (folded into [0, pi)); each cell's histogram is
    L2-normalized before concatenation.
    """
    img = _image_of(s)
    if cells < 1 or bins < 1:
        raise ValueError("cells and bins must be >= 1")
    gy, gx = np.gradient(img)
    mag = np.hypot(gx, gy)
    ang = np.mod(np.arctan2(gy, gx), np.pi)
    bin_idx = np.minimum((ang / (np.pi / bins)).astype(np.int64), bins - 1)

    h, w = img.shape
    cell_r = np.minimum((np.arange(h) * cells) // h, cells - 1)
    cell_c = np.minimum((np.arange(w) * cells) // w, cells - 1)
    flat_cell = cell_r[:, None] * cells + cell_c[None, :]

    hist = np.zeros((cells * cells, bins), dtype=np.float64)
    np.add.at(hist, (flat_cell.reshape(-1), bin_idx.reshape(-1)), mag.reshape(-1))
    norms = np.linalg.norm(hist, axis=1, keepdims=True)
    hist = np.where(norms > _EPS, hist / np.maximum(norms, _EPS), 0.0)
    return hist.reshape(-1)


class FeatureExtractor(ABC):
    """Maps a slice image to a fixed-length feature vector."""

    @abstractmethod
    def extract(self, s) -> np.ndarray:
        ...

    def extract_many(self, images: np.ndarray) -> np.ndarray:
        """(N, H, W) -> (N, F); subclasses may vectorize."""
        return np.stack([self.extract(img) for img in np.asarray(images)])


class DownsampleExtractor(FeatureExtractor):
    def __init__(self, d: int = 48):
        if d < 1:
            raise ValueError("downsample size must be >= 1")
        self.d = int(d)

    def extract(self, s) -> np.ndarray:
        return extract_downsample(s, self.d)

    def extract_many(self, images: np.ndarray) -> np.ndarray:
        return downsample_batch(images, self.d)


class GradHistExtractor(FeatureExtractor):
    def __init__(self, cells: int = 6, bins: int = 9):
        self.cells = int(cells)
        self.bins = int(bins)

    def extract(self, s) -> np.ndarray:
        return extract_gradhist(s, self.cells, self.bins)


class PrecomputedFeatureStore:
    """Directory of offline feature vectors keyed by slice file name.

    Layout: index.json = {"dim": D, "data": "features.f32",
    "keys": {name: row}} next to a little-endian float32 blob of shape
    (n_rows, D).  Lets an external embedding model feed the bank without
    linking into this package.
    """

    def __init__(self, directory):
        self.directory = Path(directory)
        index_path = self.directory / "index.json"
        try:
            index = json.loads(index_path.read_text())
        except FileNotFoundError:
            raise DataError(f"missing feature index: {index_path}") from None
        except json.JSONDecodeError as exc:
            raise DataError(f"invalid feature index {index_path}: {exc}") from exc
        try:
            self.dim = int(index["dim"])
            self._rows = {str(k): int(v) for k, v in index["keys"].items()}
            data_name = index["data"]
        except (KeyError, TypeError, ValueError) as exc:
            raise DataError(f"bad feature index {index_path}: {exc}") from exc
        blob_path = self.directory / data_name
        try:
            blob = np.frombuffer(blob_path.read_bytes(), dtype="<f4")
        except FileNotFoundError:
            raise DataError(f"missing feature blob: {blob_path}") from None
        if self.dim < 1 or blob.size % self.dim != 0:
            raise DataError(f"{blob_path}: size not a multiple of dim {self.dim}")
        self._features = blob.reshape(-1, self.dim)
        n = self._features.shape[0]
        for key, row in self._rows.items():
            if not (0 <= row < n):
                raise DataError(f"feature index row {row} for {key!r} out of range")

    def __contains__(self, key: str) -> bool:
        return key in self._rows

    def keys(self):
        return self._rows.keys()

    def lookup(self, key: str) -> np.ndarray:
        try:
            row = self._rows[key]
        except KeyError:
            raise DataError(f"no precomputed features for {key!r}") from None
        return self._features[row].astype(np.float64)

    @staticmethod
    def write(directory, keys, features) -> "PrecomputedFeatureStore":
        directory = Path(directory)
        directory.mkdir(parents=True, exist_ok=True)
        feats = np.asarray(features, dtype="<f4")
        if feats.ndim != 2 or feats.shape[0] != len(keys):
            raise ValueError("features must be (len(keys), dim)")
        (directory / "features.f32").write_bytes(feats.tobytes())
        index = {
            "dim": feats.shape[1],
            "data": "features.f32",
            "keys": {str(k): i for i, k in enumerate(keys)},
        }
        (directory / "index.json").write_text(
            json.dumps(index, sort_keys=True, indent=2) + "\n")
        return PrecomputedFeatureStore(directory)

"""Gray-level co-occurrence texture statistics of nuclei crops."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Iterable, List, Optional, Sequence, Tuple

import numpy as np

from ..data import ImagePatch

DISTANCES = (1, 2, 3, 4, 5, 6)
ANGLES = (0, 45, 90, 135)
FEATURES = ("contrast", "correlation", "energy", "homogeneity")
LEVELS = 256

# (row, col) step per angle, image rows growing downwards: 45 deg points up-right
_DIRECTIONS = {0: (0, 1), 45: (-1, 1), 90: (-1, 0), 135: (-1, -1)}


@dataclass(frozen=True)
class GLCMFeatures:
    contrast: float
    correlation: float
    energy: float
    homogeneity: float

    def as_array(self) -> np.ndarray:
        return np.array([self.contrast, self.correlation, self.energy, self.homogeneity])


def _pairs(crop: np.ndarray, distance: int, angle: int) -> Tuple[np.ndarray, np.ndarray]:
    if angle not in _DIRECTIONS:
        raise ValueError(f"angle must be one of {tuple(_DIRECTIONS)}, got {angle}")
    h, w = crop.shape
    if distance < 1 or distance >= min(h, w):
        raise ValueError(f"distance {distance} does not fit a {h}x{w} crop")
    dr, dc = _DIRECTIONS[angle]
    dr, dc = dr * distance, dc * distance
    r0, r1 = max(0, -dr), h - max(0, dr)
    c0, c1 = max(0, -dc), w - max(0, dc)
    a = crop[r0:r1, c0:c1]
    b = crop[r0 + dr:r1 + dr, c0 + dc:c1 + dc]
    return a.ravel(), b.ravel()


def glcm_matrix(crop: np.ndarray, distance: int, angle: int, symmetric: bool = True,
                levels: int = LEVELS) -> np.ndarray:
    """Normalised co-occurrence matrix of (value at x, value at x + distance * direction)."""
    crop = np.asarray(crop)
    if crop.ndim != 2:
        raise ValueError("crop must be 2-D")
    if crop.size and (crop.min() < 0 or crop.max() >= levels):
        raise ValueError(f"crop values must lie in [0, {levels})")
    a, b = _pairs(crop.astype(np.int64), distance, angle)
    counts = np.bincount(a * levels + b, minlength=levels * levels).reshape(levels, levels)
    counts = counts.astype(np.float64)
    if symmetric:
        counts = counts + counts.T
    return counts / counts.sum()


def glcm_features(P: np.ndarray) -> GLCMFeatures:
    """Contrast, correlation, energy (sqrt of ASM) and homogeneity of a normalised GLCM.

    Correlation is defined as 1 when either marginal has zero variance.
    """
    P = np.asarray(P, dtype=np.float64)
    total = P.sum()
    if abs(total - 1.0) > 1e-6:
        raise ValueError(f"GLCM is not normalised (sums to {total})")
    i, j = np.nonzero(P)
    p = P[i, j]
    i = i.astype(np.float64)
    j = j.astype(np.float64)
    diff = i - j
    contrast = float(np.sum(p * diff * diff))
    homogeneity = float(np.sum(p / (1.0 + np.abs(diff))))
    energy = float(np.sqrt(np.sum(p * p)))
    mu_i, mu_j = np.sum(p * i), np.sum(p * j)
    var_i = np.sum(p * (i - mu_i) ** 2)
    var_j = np.sum(p * (j - mu_j) ** 2)
    if var_i <= 1e-12 or var_j <= 1e-12:
        correlation = 1.0
    else:
        correlation = float(np.sum(p * (i - mu_i) * (j - mu_j)) / np.sqrt(var_i * var_j))
    return GLCMFeatures(contrast, correlation, energy, homogeneity)


def to_gray(pixels: np.ndarray) -> np.ndarray:
    """Luminance (0.299, 0.587, 0.114), rounded to 8-bit levels."""
    rgb = np.asarray(pixels, dtype=np.float64)[..., :3]
    gray = rgb @ np.array([0.299, 0.587, 0.114])
    return np.clip(np.round(gray), 0, 255).astype(np.uint8)


def extract_nuclei_crops(patch, mask, crop: int = 14, coverage: float = 0.95,
                         stride: Optional[int] = None) -> List[np.ndarray]:
    """Grayscale crop x crop windows lying (almost) entirely inside nuclei."""
    pixels = patch.pixels if isinstance(patch, ImagePatch) else np.asarray(patch)
    fg = mask.binary if hasattr(mask, "binary") else np.asarray(mask) > 0
    if fg.shape != pixels.shape[:2]:
        raise ValueError("mask and patch shapes differ")
    if not 0 < coverage <= 1:
        raise ValueError("coverage must be in (0, 1]")
    h, w = fg.shape
    if crop > min(h, w):
        raise ValueError(f"crop {crop} larger than patch {h}x{w}")
    stride = stride or crop // 2
    gray = to_gray(pixels)
    # integral image for O(1) window coverage
    integral = np.pad(fg.astype(np.int64).cumsum(0).cumsum(1), ((1, 0), (1, 0)))
    need = coverage * crop * crop
    crops = []
    for r in range(0, h - crop + 1, stride):
        for c in range(0, w - crop + 1, stride):
            inside = (integral[r + crop, c + crop] - integral[r, c + crop]
                      - integral[r + crop, c] + integral[r, c])
            if inside >= need - 1e-9:
                crops.append(gray[r:r + crop, c:c + crop].copy())
    return crops


def crop_features(crop: np.ndarray, distances: Sequence[int] = DISTANCES,
                  angles: Sequence[int] = ANGLES) -> np.ndarray:
    """Four features averaged over every (distance, angle) configuration."""
    feats = [glcm_features(glcm_matrix(crop, d, a)).as_array()
             for d in distances for a in angles]
    return np.mean(feats, axis=0)


@dataclass
class Histogram:
    edges: np.ndarray
    probs: np.ndarray

    def __post_init__(self):
        self.edges = np.asarray(self.edges, dtype=np.float64)
        self.probs = np.asarray(self.probs, dtype=np.float64)
        if len(self.edges) != len(self.probs) + 1:
            raise ValueError("need one more edge than bins")
        if np.any(np.diff(self.edges) <= 0):
            raise ValueError("bin edges must be strictly increasing")

    @property
    def centers(self) -> np.ndarray:
        return 0.5 * (self.edges[:-1] + self.edges[1:])


def pooled_edges(*samples: np.ndarray, bins: int = 64) -> np.ndarray:
    values = np.concatenate([np.asarray(s, dtype=np.float64).ravel() for s in samples])
    lo, hi = float(values.min()), float(values.max())
    if hi <= lo:
        lo, hi = lo - 0.5, hi + 0.5
    return np.linspace(lo, hi, bins + 1)


def histogram(samples: np.ndarray, edges: np.ndarray) -> Histogram:
    counts, _ = np.histogram(np.asarray(samples, dtype=np.float64), bins=edges)
    return Histogram(edges, counts / counts.sum())


@dataclass
class FeatureStats:
    """Per-crop feature samples (n x 4) with population mean/std per feature."""

    samples: np.ndarray
    mean: np.ndarray
    std: np.ndarray

    @property
    def n(self) -> int:
        return len(self.samples)

    def feature(self, name: str) -> np.ndarray:
        return self.samples[:, FEATURES.index(name)]

    def distribution(self, name: str, edges: Optional[np.ndarray] = None,
                     bins: int = 64) -> Histogram:
        values = self.feature(name)
        return histogram(values, pooled_edges(values, bins=bins) if edges is None else edges)


def feature_stats(crops: Iterable[np.ndarray], distances: Sequence[int] = DISTANCES,
                  angles: Sequence[int] = ANGLES) -> FeatureStats:
    samples = np.array([crop_features(c, distances, angles) for c in crops])
    if len(samples) < 2:
        raise ValueError(f"need at least 2 nuclei crops, got {len(samples)}")
    # column-wise sort makes the reductions exactly order-independent
    ordered = np.sort(samples, axis=0)
    return FeatureStats(samples, ordered.mean(axis=0), ordered.std(axis=0))

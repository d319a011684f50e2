"""Nuclei masks and the segmented (nuclei-only) images used in the second pass."""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Dict, List, Optional, Tuple

import numpy as np
from scipy import ndimage as ndi
from skimage.filters import threshold_otsu
from skimage.segmentation import relabel_sequential

from .data import (DEFAULT_MASK_SUFFIX, DatasetManifest, ImagePatch, PipelineError,
                   read_labels, read_rgb, write_labels)

log = logging.getLogger(__name__)

WHITE = (255, 255, 255)


@dataclass(frozen=True)
class NucleiMask:
    """Instance label map: 0 is background, 1..K are nuclei."""

    labels: np.ndarray

    def __post_init__(self):
        if self.labels.ndim != 2:
            raise ValueError("mask labels must be 2-D")
        if self.labels.size and self.labels.min() < 0:
            raise ValueError("mask labels must be non-negative")

    @property
    def binary(self) -> np.ndarray:
        return self.labels > 0

    @property
    def count(self) -> int:
        return int(self.labels.max(initial=0))

    @property
    def shape(self):
        return self.labels.shape

    @classmethod
    def from_binary(cls, mask: np.ndarray) -> "NucleiMask":
        labels, _ = ndi.label(np.asarray(mask, dtype=bool))
        return cls(labels.astype(np.int32))


@dataclass(frozen=True)
class SegmentedPatch:
    pixels: np.ndarray
    source_id: str = ""
    mask_id: str = ""
    fill: Tuple[int, int, int] = WHITE


@dataclass
class Segmenter:
    """Stain-density threshold segmenter.

    Density is ``255 - min(R, G, B)``. Foreground is density above the Otsu
    threshold and at least ``min_density``; images whose density spread is
    below ``min_contrast`` are treated as having no nuclei.
    """

    min_density: int = 128
    min_contrast: int = 30
    min_size: int = 20
    opening: int = 3

    def __call__(self, patch) -> NucleiMask:
        pixels = patch.pixels if isinstance(patch, ImagePatch) else np.asarray(patch)
        density = 255 - pixels[..., :3].min(axis=-1).astype(np.int32)
        if density.max() - density.min() < self.min_contrast:
            return NucleiMask(np.zeros(density.shape, np.int32))
        threshold = max(float(threshold_otsu(density)), self.min_density)
        fg = density > threshold
        if self.opening > 1:
            fg = ndi.binary_opening(fg, structure=np.ones((self.opening, self.opening), bool))
        labels, n = ndi.label(fg)
        if n:
            sizes = np.bincount(labels.ravel())
            small = sizes < self.min_size
            small[0] = False
            labels[small[labels]] = 0
            labels, _, _ = relabel_sequential(labels)
        return NucleiMask(labels.astype(np.int32))


def segment_nuclei(patch, segmenter: Optional[Segmenter] = None) -> NucleiMask:
    return (segmenter or Segmenter())(patch)


def apply_mask(patch, mask, fill: Tuple[int, int, int] = WHITE) -> SegmentedPatch:
    """Copy nucleus pixels, paint everything else with ``fill``."""
    if isinstance(patch, ImagePatch):
        pixels, source_id = patch.pixels, patch.patch_id
    elif isinstance(patch, SegmentedPatch):
        pixels, source_id = patch.pixels, patch.source_id
    else:
        pixels, source_id = np.asarray(patch), ""
    fg = mask.binary if isinstance(mask, NucleiMask) else np.asarray(mask) > 0
    if fg.shape != pixels.shape[:2]:
        raise ValueError(f"mask shape {fg.shape} does not match patch {pixels.shape[:2]}")
    out = np.empty_like(pixels)
    out[...] = np.asarray(fill, dtype=pixels.dtype)
    out[fg] = pixels[fg]
    return SegmentedPatch(out, source_id, "", tuple(int(v) for v in fill))


@dataclass
class MaskSet:
    masks: Dict[str, NucleiMask] = field(default_factory=dict)
    missing: List[str] = field(default_factory=list)


def load_mask(path, expected_shape=None, name: str = "") -> NucleiMask:
    try:
        labels = read_labels(path)
    except (OSError, ValueError) as exc:
        raise PipelineError(f"{name or path}: unreadable mask {path}: {exc}") from exc
    if expected_shape is not None and labels.shape != tuple(expected_shape):
        raise PipelineError(
            f"{name or path}: mask size {labels.shape} does not match patch size {tuple(expected_shape)}")
    present = np.unique(labels)
    if present[-1] != len(present) - 1:
        labels = relabel_sequential(labels)[0]
    return NucleiMask(labels)


def load_sidecar_masks(manifest: DatasetManifest) -> MaskSet:
    """Read every mask the manifest points to; entries without one are flagged."""
    result = MaskSet()
    side = manifest.patch_size
    for entry in manifest.entries:
        if not entry.mask_path:
            result.missing.append(entry.patch_id)
            continue
        result.masks[entry.patch_id] = load_mask(entry.mask_path, (side, side), entry.patch_id)
    return result


def cache_masks(manifest: DatasetManifest, segmenter: Optional[Callable] = None,
                suffix: str = DEFAULT_MASK_SUFFIX) -> DatasetManifest:
    """Segment every entry lacking a mask and write ``<patch><suffix>.png`` beside it."""
    segmenter = segmenter or Segmenter()
    entries = []
    for entry in manifest.entries:
        if entry.mask_path is None:
            patch_path = Path(entry.patch_path)
            mask = segmenter(read_rgb(patch_path))
            mask_path = patch_path.with_name(f"{patch_path.stem}{suffix}.png")
            write_labels(mask_path, mask.labels)
            entry = type(entry)(entry.patch_path, str(mask_path), entry.source_id,
                                entry.origin, entry.blank_fraction)
        entries.append(entry)
    return manifest.with_entries(entries)


def mask_iou(a, b) -> float:
    a = a.binary if isinstance(a, NucleiMask) else np.asarray(a, bool)
    b = b.binary if isinstance(b, NucleiMask) else np.asarray(b, bool)
    union = np.logical_or(a, b).sum()
    if union == 0:
        return 1.0
    return float(np.logical_and(a, b).sum() / union)

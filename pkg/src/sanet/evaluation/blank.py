"""How much a translation alters regions that were blank in its input."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from ..data import DEFAULT_WHITE_LEVEL, ImagePatch, blank_mask


@dataclass(frozen=True)
class BlankDeviation:
    value: float
    blank_pixels: int

    @property
    def no_blank_region(self) -> bool:
        return self.blank_pixels == 0


def blank_region_deviation(frozen, generated, white_level: int = DEFAULT_WHITE_LEVEL) -> BlankDeviation:
    """Mean |frozen - generated| over channels of pixels blank in ``frozen``; 0 if none."""
    src = frozen.pixels if isinstance(frozen, ImagePatch) else np.asarray(frozen)
    out = generated.pixels if isinstance(generated, ImagePatch) else np.asarray(generated)
    if src.shape != out.shape:
        raise ValueError(f"shape mismatch {src.shape} vs {out.shape}")
    blank = blank_mask(src, white_level)
    n = int(blank.sum())
    if n == 0:
        return BlankDeviation(0.0, 0)
    diff = np.abs(src[blank].astype(np.int32) - out[blank].astype(np.int32))
    return BlankDeviation(float(diff.mean()), n)

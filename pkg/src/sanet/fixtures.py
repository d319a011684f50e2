"""Synthetic frozen-like / permanent-like H&E patches with ground-truth nuclei.

Frozen-like patches have blurred, flat nuclei in washed-out uniform cytoplasm
and occasional white tears. Permanent-like patches have sharp nuclei with
chromatin speckle and fibrous cytoplasm. Every patch is written with its
16-bit instance label raster (``<name>_mask.png``).
"""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path
from typing import Tuple

import numpy as np
from scipy import ndimage as ndi

from .data import DEFAULT_MASK_SUFFIX, write_labels, write_rgb

FROZEN_CYTO = np.array([226.0, 178.0, 212.0])
FROZEN_NUCLEUS = np.array([122.0, 88.0, 166.0])
PERM_CYTO = np.array([238.0, 168.0, 206.0])
PERM_NUCLEUS = np.array([92.0, 50.0, 140.0])
TEAR = np.array([246.0, 244.0, 246.0])


@dataclass(frozen=True)
class FixturePatch:
    pixels: np.ndarray
    labels: np.ndarray


def _ellipse_labels(rng: np.random.Generator, size: int, count: Tuple[int, int] = (2, 4),
                    gap: int = 3) -> np.ndarray:
    labels = np.zeros((size, size), np.int32)
    yy, xx = np.mgrid[0:size, 0:size].astype(np.float64)
    target = int(rng.integers(count[0], count[1] + 1))
    lo, hi = 0.15 * size, 0.22 * size
    k = 0
    for _ in range(200):
        if k == target:
            break
        a, b = rng.uniform(lo, hi), rng.uniform(lo, hi)
        theta = rng.uniform(0, np.pi)
        cy, cx = rng.uniform(0, size, 2)
        c, s = np.cos(theta), np.sin(theta)
        u = ((xx - cx) * c + (yy - cy) * s) / a
        v = (-(xx - cx) * s + (yy - cy) * c) / b
        inside = u * u + v * v <= 1.0
        # keep whole nuclei away from borders and from each other
        if inside[0].any() or inside[-1].any() or inside[:, 0].any() or inside[:, -1].any():
            continue
        if (ndi.binary_dilation(inside, iterations=gap) & (labels > 0)).any():
            continue
        k += 1
        labels[inside] = k
    return labels


def _smooth_noise(rng, size, sigma, amplitude):
    field = ndi.gaussian_filter(rng.standard_normal((size, size)), sigma)
    return field / (field.std() + 1e-12) * amplitude


def frozen_patch(rng: np.random.Generator, size: int = 64) -> FixturePatch:
    labels = _ellipse_labels(rng, size)
    nuclei = labels > 0
    soft = np.clip(ndi.gaussian_filter(nuclei.astype(np.float64), 1.3), 0, 1)[..., None]
    cyto = FROZEN_CYTO + _smooth_noise(rng, size, 6, 3.0)[..., None]
    nuc = FROZEN_NUCLEUS + rng.uniform(-8, 8, 3)
    noise_sd = rng.uniform(1.5, 4.0)
    nuc_tex = ndi.gaussian_filter(rng.standard_normal((size, size)), 0.7)
    nuc_tex = nuc_tex / nuc_tex.std() * noise_sd
    img = soft * (nuc + nuc_tex[..., None]) + (1 - soft) * cyto
    img += rng.normal(0, 1.0, img.shape)
    if rng.random() < 0.5:
        tear = _tear(rng, size) & ~ndi.binary_dilation(nuclei, iterations=3)
        img[tear] = TEAR + rng.normal(0, 1.5, (tear.sum(), 3))
    return FixturePatch(np.clip(np.round(img), 0, 255).astype(np.uint8), labels)


def permanent_patch(rng: np.random.Generator, size: int = 64) -> FixturePatch:
    labels = _ellipse_labels(rng, size)
    nuclei = labels > 0
    fibres = ndi.gaussian_filter(rng.standard_normal((size, size)), (0.8, 3.0))
    fibres = fibres / fibres.std() * 9.0
    cyto = PERM_CYTO + fibres[..., None] * np.array([0.4, 1.0, 0.6])
    nuc = PERM_NUCLEUS + rng.uniform(-8, 8, 3)
    speckle_sd = rng.uniform(5.0, 11.0)
    speckle = rng.standard_normal((size, size)) * speckle_sd
    chroma = nuc + speckle[..., None] * np.array([1.0, 0.8, 1.0])
    img = np.where(nuclei[..., None], chroma, cyto)
    img += rng.normal(0, 1.0, img.shape)
    return FixturePatch(np.clip(np.round(img), 0, 255).astype(np.uint8), labels)


def _tear(rng: np.random.Generator, size: int) -> np.ndarray:
    """A thin irregular white crack across part of the patch."""
    yy, xx = np.mgrid[0:size, 0:size].astype(np.float64)
    theta = rng.uniform(0, np.pi)
    offset = rng.uniform(-0.3, 0.3) * size
    dist = (xx - size / 2) * np.sin(theta) - (yy - size / 2) * np.cos(theta) - offset
    wobble = _smooth_noise(rng, size, 5, 2.0)
    width = rng.uniform(2.0, 4.5)
    return np.abs(dist + wobble) < width


def synthesize(out_dir, seed: int = 0, n_frozen: int = 200, n_permanent: int = 200,
               size: int = 64, mask_suffix: str = DEFAULT_MASK_SUFFIX) -> dict:
    """Write ``frozen/`` and ``permanent/`` fixture directories; returns their paths."""
    out = Path(out_dir)
    ss = np.random.SeedSequence(seed)
    frozen_ss, perm_ss = ss.spawn(2)
    paths = {}
    for name, n, make, seq in (("frozen", n_frozen, frozen_patch, frozen_ss),
                               ("permanent", n_permanent, permanent_patch, perm_ss)):
        d = out / name
        d.mkdir(parents=True, exist_ok=True)
        for i, child in enumerate(seq.spawn(n)):
            fx = make(np.random.default_rng(child), size)
            write_rgb(d / f"{name}_{i:04d}.png", fx.pixels)
            write_labels(d / f"{name}_{i:04d}{mask_suffix}.png", fx.labels)
        paths[name] = d
    return paths

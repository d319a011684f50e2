"""Frechet distance between Gaussian fits of image feature activations."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F


@dataclass
class ActivationStats:
    mean: np.ndarray
    cov: np.ndarray
    n: int

    def __post_init__(self):
        self.mean = np.asarray(self.mean, dtype=np.float64)
        self.cov = np.asarray(self.cov, dtype=np.float64)
        d = self.mean.shape[0]
        if self.cov.shape != (d, d):
            raise ValueError(f"covariance shape {self.cov.shape} does not match mean of length {d}")

    @property
    def dim(self) -> int:
        return self.mean.shape[0]


def _check_symmetric(cov: np.ndarray, name: str, tol: float = 1e-8) -> None:
    scale = max(np.abs(cov).max(), 1.0)
    if np.abs(cov - cov.T).max() > tol * scale:
        raise ValueError(f"{name} covariance is not symmetric")


def _psd_sqrt(mat: np.ndarray, rel_tol: float = 1e-10) -> np.ndarray:
    w, v = _clamped_eigh(mat, rel_tol)
    return (v * np.sqrt(w)) @ v.T


def _clamped_eigh(mat: np.ndarray, rel_tol: float = 1e-10):
    w, v = np.linalg.eigh(0.5 * (mat + mat.T))
    top = max(float(np.abs(w).max(initial=0.0)), 1e-300)
    if w.min(initial=0.0) < -rel_tol * top:
        raise ValueError(f"matrix is not positive semi-definite (eigenvalue {w.min():.3e})")
    return np.clip(w, 0.0, None), v


def fid(a: ActivationStats, b: ActivationStats) -> float:
    """||mu_a - mu_b||^2 + Tr(S_a + S_b - 2 (S_a^1/2 S_b S_a^1/2)^1/2)."""
    if a.dim != b.dim:
        raise ValueError(f"feature dimensions differ: {a.dim} vs {b.dim}")
    _check_symmetric(a.cov, "first")
    _check_symmetric(b.cov, "second")
    diff = a.mean - b.mean
    root_a = _psd_sqrt(a.cov)
    w, _ = _clamped_eigh(root_a @ b.cov @ root_a)
    trace_sqrt = float(np.sqrt(w).sum())
    value = float(diff @ diff + np.trace(a.cov) + np.trace(b.cov) - 2.0 * trace_sqrt)
    return max(value, 0.0)


def activation_stats(images: Sequence, extractor: Callable[[np.ndarray], np.ndarray]) -> ActivationStats:
    """Mean and sample covariance (ddof=1) of ``extractor`` features over ``images``."""
    if len(images) < 2:
        raise ValueError(f"need at least 2 images, got {len(images)}")
    feats = np.asarray(extractor(np.stack([np.asarray(im) for im in images])), dtype=np.float64)
    if feats.ndim != 2:
        raise ValueError("extractor must return an (n, d) array")
    cov = np.cov(feats, rowvar=False, ddof=1)
    cov = np.atleast_2d(0.5 * (cov + cov.T))
    return ActivationStats(feats.mean(axis=0), cov, len(feats))


class RandomConvFeatures(nn.Module):
    """Fixed-seed random convolutional embedding for self-contained FID.

    Three stride-2 conv + ReLU stages; the output concatenates the spatial mean
    and standard deviation of every stage, so it responds to colour as well as
    local texture statistics.
    """

    def __init__(self, widths=(16, 32, 64), seed: int = 0):
        super().__init__()
        gen = torch.Generator().manual_seed(seed)
        layers = []
        prev = 3
        for w in widths:
            conv = nn.Conv2d(prev, w, 3, stride=2, padding=1)
            with torch.no_grad():
                conv.weight.copy_(torch.randn(conv.weight.shape, generator=gen) * (2.0 / (9 * prev)) ** 0.5)
                conv.bias.copy_(torch.randn(conv.bias.shape, generator=gen) * 0.1)
            layers.append(conv)
            prev = w
        self.convs = nn.ModuleList(layers)
        self.requires_grad_(False)
        self.eval()

    @property
    def dim(self) -> int:
        return 2 * sum(c.out_channels for c in self.convs)

    @torch.no_grad()
    def forward(self, x: torch.Tensor) -> torch.Tensor:
        feats = []
        for conv in self.convs:
            x = F.relu(conv(x))
            feats += [x.mean(dim=(2, 3)), x.std(dim=(2, 3))]
        return torch.cat(feats, dim=1)

    def __call__(self, images):
        if isinstance(images, torch.Tensor):
            return super().__call__(images)
        arr = np.asarray(images, dtype=np.float64)
        x = torch.from_numpy(arr.transpose(0, 3, 1, 2) / 127.5 - 1.0).float()
        out = []
        for chunk in torch.split(x, 64):
            out.append(super().__call__(chunk))
        return torch.cat(out).double().numpy()


def inception_extractor(device: str = "cpu") -> Callable[[np.ndarray], np.ndarray]:
    """Pool3 features of torchvision's ImageNet Inception-v3 (weights must be obtainable)."""
    from torchvision.models import Inception_V3_Weights, inception_v3

    net = inception_v3(weights=Inception_V3_Weights.IMAGENET1K_V1, aux_logits=True)
    net.fc = nn.Identity()
    net.eval().to(device)
    mean = torch.tensor([0.485, 0.456, 0.406]).view(1, 3, 1, 1)
    std = torch.tensor([0.229, 0.224, 0.225]).view(1, 3, 1, 1)

    @torch.no_grad()
    def extract(images: np.ndarray) -> np.ndarray:
        x = torch.from_numpy(np.asarray(images, dtype=np.float32).transpose(0, 3, 1, 2) / 255.0)
        out = []
        for chunk in torch.split(x, 32):
            chunk = F.interpolate(chunk, size=(299, 299), mode="bilinear", align_corners=False)
            out.append(net(((chunk - mean) / std).to(device)).cpu())
        return torch.cat(out).double().numpy()

    return extract

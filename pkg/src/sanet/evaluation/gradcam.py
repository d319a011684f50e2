"""Grad-CAM heatmaps for a scalar-logit network (the permanent-domain discriminator)."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F


@dataclass
class Heatmap:
    values: np.ndarray  # H x W in [0, 1]
    raw: np.ndarray  # upsampled map before max-normalisation
    layer: str
    target: str = "logit"


def layer_names(model: nn.Module):
    return tuple(getattr(model, "cam_layers", None) or
                 (name for name, _ in model.named_modules() if name))


def grad_cam(model: nn.Module, image: torch.Tensor, layer: str) -> Heatmap:
    """``relu(sum_c mean(dlogit/dA_c) * A_c)``, bilinearly upsampled, max-normalised.

    ``image`` is 3 x H x W (or 1 x 3 x H x W) in the network's input range.
    Patch-logit outputs are averaged to a single score.
    """
    modules = dict(model.named_modules())
    if not layer or layer not in modules:
        raise KeyError(f"unknown layer {layer!r}; valid layers: {', '.join(layer_names(model))}")
    x = image if image.dim() == 4 else image[None]
    if x.shape[0] != 1:
        raise ValueError("grad_cam takes a single image")
    param = next(model.parameters(), None)
    if param is not None:
        x = x.to(param.dtype)
    # the input carries the graph even when the model's parameters are frozen
    x = x.detach().requires_grad_(True)

    captured = {}

    def hook(_module, _inputs, output):
        captured["act"] = output

    handle = modules[layer].register_forward_hook(hook)
    was_training = model.training
    model.eval()
    try:
        with torch.enable_grad():
            logit = model(x).mean()
            if "act" not in captured:
                raise ValueError(f"layer {layer!r} is not used in the forward pass")
            act = captured["act"]
            grad, = torch.autograd.grad(logit, act, allow_unused=True)
    finally:
        handle.remove()
        model.train(was_training)
    if grad is None:
        grad = torch.zeros_like(act)
    weights = grad.mean(dim=(2, 3), keepdim=True)
    cam = F.relu((weights * act).sum(dim=1, keepdim=True))
    cam = F.interpolate(cam, size=x.shape[-2:], mode="bilinear", align_corners=False)
    raw = cam[0, 0].detach().double().numpy()
    top = raw.max()
    values = raw / top if top > 0 else np.zeros_like(raw)
    return Heatmap(np.clip(values, 0.0, 1.0), raw, layer)


def overlay(pixels: np.ndarray, heatmap: Heatmap, alpha: float = 0.5) -> np.ndarray:
    """Blend a red-to-yellow rendering of the heatmap over an 8-bit RGB image."""
    v = heatmap.values[..., None]
    color = np.concatenate([np.ones_like(v), v, np.zeros_like(v)], axis=-1) * 255.0
    weight = alpha * v
    out = (1 - weight) * np.asarray(pixels, dtype=np.float64) + weight * color
    return np.clip(np.round(out), 0, 255).astype(np.uint8)


def to_gray8(heatmap: Heatmap) -> np.ndarray:
    return np.clip(np.round(heatmap.values * 255.0), 0, 255).astype(np.uint8)

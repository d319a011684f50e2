"""Adversarial, cycle-consistency and segmented composite losses."""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass, fields

import torch
import torch.nn.functional as F

ADVERSARIAL_MODES = ("lsgan", "bce")


class NonFiniteLossError(FloatingPointError):
    def __init__(self, message: str, report=None):
        super().__init__(message)
        self.report = report


@dataclass
class LossWeights:
    lambda_gan: float = 1.0
    lambda_cycle: float = 100.0
    lambda_seg: float = 1.0

    def validate(self):
        errors = []
        for f in fields(self):
            value = getattr(self, f.name)
            if not isinstance(value, (int, float)) or not math.isfinite(value) or value < 0:
                errors.append(f"loss.{f.name}: must be a finite number >= 0, got {value!r}")
        return errors


def _check_nonempty(*tensors):
    for t in tensors:
        if t.numel() == 0:
            raise ValueError("loss needs at least one logit")


def adv_loss_discriminator(real_logits: torch.Tensor, fake_logits: torch.Tensor,
                           mode: str = "lsgan") -> torch.Tensor:
    """Least squares: mean (real - 1)^2 + mean fake^2."""
    _check_nonempty(real_logits, fake_logits)
    if mode == "lsgan":
        return ((real_logits - 1) ** 2).mean() + (fake_logits ** 2).mean()
    if mode == "bce":
        return (F.binary_cross_entropy_with_logits(real_logits, torch.ones_like(real_logits))
                + F.binary_cross_entropy_with_logits(fake_logits, torch.zeros_like(fake_logits)))
    raise ValueError(f"unknown adversarial mode {mode!r}")


def adv_loss_generator(fake_logits: torch.Tensor, mode: str = "lsgan") -> torch.Tensor:
    _check_nonempty(fake_logits)
    if mode == "lsgan":
        return ((fake_logits - 1) ** 2).mean()
    if mode == "bce":
        return F.binary_cross_entropy_with_logits(fake_logits, torch.ones_like(fake_logits))
    raise ValueError(f"unknown adversarial mode {mode!r}")


def cycle_loss(x: torch.Tensor, x_reconstructed: torch.Tensor) -> torch.Tensor:
    if x.shape != x_reconstructed.shape:
        raise ValueError(f"shape mismatch {tuple(x.shape)} vs {tuple(x_reconstructed.shape)}")
    return (x - x_reconstructed).abs().mean()


def compose_total(base, seg, lambda_seg: float):
    """``base + lambda_seg * seg``; refuses non-finite inputs."""
    for name, v in (("base", base), ("seg", seg)):
        value = float(v.detach()) if isinstance(v, torch.Tensor) else float(v)
        if not math.isfinite(value):
            raise NonFiniteLossError(f"non-finite {name} loss component: {value}")
    return base + lambda_seg * seg


@dataclass
class LossReport:
    d_p_gan: float
    d_p_gan_seg: float
    d_f_gan: float
    d_f_gan_seg: float
    g_p_gan: float
    g_p_gan_seg: float
    g_f_gan: float
    g_f_gan_seg: float
    cycle: float
    cycle_seg: float
    d_total: float
    g_total: float

    def as_dict(self):
        return asdict(self)

    def is_finite(self) -> bool:
        return all(math.isfinite(v) for v in self.as_dict().values())

    def to_record(self) -> str:
        return " ".join(f"{k}={v!r}" for k, v in self.as_dict().items())

    @classmethod
    def from_record(cls, text: str) -> "LossReport":
        values = dict(tok.split("=", 1) for tok in text.split())
        return cls(**{f.name: float(values[f.name]) for f in fields(cls)})

"""Attention U-Net generators and ResNet-18 style discriminators."""

from __future__ import annotations

from dataclasses import asdict, dataclass, field
from typing import Optional, Tuple

import torch
import torch.nn as nn
import torch.nn.functional as F


@dataclass
class GeneratorConfig:
    in_channels: int = 3
    out_channels: int = 3
    depth: int = 4
    base_width: int = 64
    image_size: int = 256

    def validate(self) -> None:
        if self.depth < 2:
            raise ValueError("generator depth must be >= 2")
        if self.base_width < 2:
            raise ValueError("generator base_width must be >= 2")
        if self.image_size % (2 ** self.depth):
            raise ValueError(
                f"image_size {self.image_size} is not divisible by 2**depth = {2 ** self.depth}")


@dataclass
class DiscriminatorConfig:
    in_channels: int = 3
    widths: Tuple[int, ...] = (64, 128, 256, 512)
    blocks_per_stage: int = 2
    image_size: int = 256
    patch_logits: bool = False

    def __post_init__(self):
        self.widths = tuple(int(w) for w in self.widths)

    @property
    def downsampling(self) -> int:
        # stem conv and max-pool each halve, then every stage after the first
        return 2 ** (2 + len(self.widths) - 1)

    def validate(self) -> None:
        if not self.widths:
            raise ValueError("discriminator needs at least one stage")
        if self.image_size < self.downsampling:
            raise ValueError(
                f"image_size {self.image_size} collapses below 1px; need >= {self.downsampling}")


TOY_GENERATOR = GeneratorConfig(depth=3, base_width=16, image_size=64)
TOY_DISCRIMINATOR = DiscriminatorConfig(widths=(16, 32, 64, 128), image_size=64)


def _norm2d(channels: int) -> nn.Module:
    return nn.GroupNorm(min(8, channels), channels)


class ConvBlock(nn.Sequential):
    def __init__(self, in_ch: int, out_ch: int):
        super().__init__(
            nn.Conv2d(in_ch, out_ch, 3, padding=1),
            nn.InstanceNorm2d(out_ch, affine=True),
            nn.ReLU(inplace=True),
            nn.Conv2d(out_ch, out_ch, 3, padding=1),
            nn.InstanceNorm2d(out_ch, affine=True),
            nn.ReLU(inplace=True),
        )


class AttentionGate(nn.Module):
    """Additive attention on a skip connection.

    ``alpha = sigmoid(psi(relu(W_x x + up(W_g g))))`` is a single-channel map
    at the skip resolution; the gate returns ``x * alpha``.
    """

    def __init__(self, skip_channels: int, gate_channels: int, inter_channels: int):
        super().__init__()
        self.theta_x = nn.Conv2d(skip_channels, inter_channels, 1)
        self.phi_g = nn.Conv2d(gate_channels, inter_channels, 1)
        self.psi = nn.Conv2d(inter_channels, 1, 1)
        self.last_alpha: Optional[torch.Tensor] = None

    def forward(self, x: torch.Tensor, g: torch.Tensor) -> torch.Tensor:
        if x.shape[-2] != 2 * g.shape[-2] or x.shape[-1] != 2 * g.shape[-1]:
            raise ValueError(f"gating signal {tuple(g.shape)} must be half the size of {tuple(x.shape)}")
        g = F.interpolate(self.phi_g(g), size=x.shape[-2:], mode="bilinear", align_corners=False)
        alpha = torch.sigmoid(self.psi(F.relu(self.theta_x(x) + g)))
        self.last_alpha = alpha.detach()
        return x * alpha


class AttentionUNet(nn.Module):
    def __init__(self, cfg: GeneratorConfig):
        super().__init__()
        cfg.validate()
        self.cfg = cfg
        widths = [cfg.base_width * 2 ** i for i in range(cfg.depth + 1)]
        self.encoders = nn.ModuleList()
        prev = cfg.in_channels
        for w in widths:
            self.encoders.append(ConvBlock(prev, w))
            prev = w
        self.ups = nn.ModuleList()
        self.gates = nn.ModuleList()
        self.decoders = nn.ModuleList()
        for level in reversed(range(cfg.depth)):
            skip, coarse = widths[level], widths[level + 1]
            self.ups.append(nn.ConvTranspose2d(coarse, skip, 2, stride=2))
            self.gates.append(AttentionGate(skip, coarse, max(skip // 2, 1)))
            self.decoders.append(ConvBlock(2 * skip, skip))
        self.head = nn.Conv2d(widths[0], cfg.out_channels, 1)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        step = 2 ** self.cfg.depth
        if x.shape[-1] % step or x.shape[-2] % step:
            raise ValueError(f"input side {tuple(x.shape[-2:])} is not divisible by {step}")
        skips = []
        for i, enc in enumerate(self.encoders):
            if i:
                x = F.max_pool2d(x, 2)
            x = enc(x)
            skips.append(x)
        x = skips.pop()
        for up, gate, dec in zip(self.ups, self.gates, self.decoders):
            skip = skips.pop()
            gated = gate(skip, x)
            x = dec(torch.cat([up(x), gated], dim=1))
        return torch.tanh(self.head(x))


class BasicBlock(nn.Module):
    def __init__(self, in_ch: int, out_ch: int, stride: int = 1):
        super().__init__()
        self.conv1 = nn.Conv2d(in_ch, out_ch, 3, stride=stride, padding=1, bias=False)
        self.norm1 = _norm2d(out_ch)
        self.conv2 = nn.Conv2d(out_ch, out_ch, 3, padding=1, bias=False)
        self.norm2 = _norm2d(out_ch)
        self.shortcut = None
        if stride != 1 or in_ch != out_ch:
            self.shortcut = nn.Sequential(
                nn.Conv2d(in_ch, out_ch, 1, stride=stride, bias=False), _norm2d(out_ch))

    def forward(self, x):
        out = F.relu(self.norm1(self.conv1(x)))
        out = self.norm2(self.conv2(out))
        identity = x if self.shortcut is None else self.shortcut(x)
        return F.relu(out + identity)


class ResNetDiscriminator(nn.Module):
    """ResNet-18 layout; ``layer{N}`` are the residual stages (Grad-CAM targets)."""

    def __init__(self, cfg: DiscriminatorConfig):
        super().__init__()
        cfg.validate()
        self.cfg = cfg
        w0 = cfg.widths[0]
        self.stem = nn.Sequential(
            nn.Conv2d(cfg.in_channels, w0, 7, stride=2, padding=3, bias=False),
            _norm2d(w0),
            nn.ReLU(inplace=True),
            nn.MaxPool2d(3, stride=2, padding=1),
        )
        prev = w0
        self.stage_names = []
        for i, w in enumerate(cfg.widths):
            blocks = [BasicBlock(prev, w, stride=1 if i == 0 else 2)]
            blocks += [BasicBlock(w, w) for _ in range(cfg.blocks_per_stage - 1)]
            name = f"layer{i + 1}"
            self.add_module(name, nn.Sequential(*blocks))
            self.stage_names.append(name)
            prev = w
        if cfg.patch_logits:
            self.head = nn.Conv2d(prev, 1, 1)
        else:
            self.head = nn.Linear(prev, 1)

    @property
    def cam_layers(self) -> Tuple[str, ...]:
        return ("stem", *self.stage_names)

    def features(self, x: torch.Tensor) -> torch.Tensor:
        x = self.stem(x)
        for name in self.stage_names:
            x = getattr(self, name)(x)
        return x

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        feats = self.features(x)
        if self.cfg.patch_logits:
            return self.head(feats).squeeze(1)
        return self.head(feats.mean(dim=(2, 3))).squeeze(1)


def init_weights(module: nn.Module, seed: int, std: float = 0.02) -> None:
    """N(0, std) for conv/linear weights, N(1, std) for norm scales, zero biases."""
    gen = torch.Generator().manual_seed(seed)
    for m in module.modules():
        if isinstance(m, (nn.Conv2d, nn.ConvTranspose2d, nn.Linear)):
            with torch.no_grad():
                m.weight.copy_(torch.randn(m.weight.shape, generator=gen) * std)
                if m.bias is not None:
                    m.bias.zero_()
        elif isinstance(m, (nn.GroupNorm, nn.InstanceNorm2d)) and m.affine:
            with torch.no_grad():
                m.weight.copy_(1.0 + torch.randn(m.weight.shape, generator=gen) * std)
                m.bias.zero_()


def build_generator(cfg: GeneratorConfig, seed: int = 0) -> AttentionUNet:
    net = AttentionUNet(cfg)
    init_weights(net, seed)
    return net


def build_discriminator(cfg: DiscriminatorConfig, seed: int = 0) -> ResNetDiscriminator:
    net = ResNetDiscriminator(cfg)
    init_weights(net, seed)
    return net


def count_parameters(module: nn.Module) -> int:
    return sum(p.numel() for p in module.parameters())


@dataclass
class ModelBundle:
    """The two generators (F->P, P->F) and two discriminators (P, F)."""

    g_p: nn.Module
    g_f: nn.Module
    d_p: nn.Module
    d_f: nn.Module
    gen_cfg: GeneratorConfig = field(default_factory=GeneratorConfig)
    disc_cfg: DiscriminatorConfig = field(default_factory=DiscriminatorConfig)
    step: int = 0

    NAMES = ("g_p", "g_f", "d_p", "d_f")

    @classmethod
    def create(cls, gen_cfg: GeneratorConfig, disc_cfg: DiscriminatorConfig,
               seed: int = 0) -> "ModelBundle":
        # distinct sub-seeds keep the four parameter sets independent
        return cls(
            g_p=build_generator(gen_cfg, seed * 4 + 0),
            g_f=build_generator(gen_cfg, seed * 4 + 1),
            d_p=build_discriminator(disc_cfg, seed * 4 + 2),
            d_f=build_discriminator(disc_cfg, seed * 4 + 3),
            gen_cfg=gen_cfg, disc_cfg=disc_cfg,
        )

    def networks(self):
        return {name: getattr(self, name) for name in self.NAMES}

    def generators(self):
        return self.g_p, self.g_f

    def discriminators(self):
        return self.d_p, self.d_f

    def to(self, device) -> "ModelBundle":
        for net in self.networks().values():
            net.to(device)
        return self

    def train(self, mode: bool = True) -> "ModelBundle":
        for net in self.networks().values():
            net.train(mode)
        return self

    def eval(self) -> "ModelBundle":
        return self.train(False)

    def state_dict(self):
        return {name: net.state_dict() for name, net in self.networks().items()}

    def load_state_dict(self, state) -> None:
        for name, net in self.networks().items():
            net.load_state_dict(state[name])

    def configs(self):
        return {"generator": asdict(self.gen_cfg), "discriminator": asdict(self.disc_cfg)}

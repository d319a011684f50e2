"""Two-pass (original + nuclei-segmented) cycle-consistent adversarial training."""

from __future__ import annotations

import hashlib
import io
import json
import logging
import os
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Dict, List, Optional, Sequence

import numpy as np
import torch
import torch.nn as nn

from .config import TrainConfig
from .data import DatasetManifest, ImagePatch, denormalize, read_rgb
from .losses import (LossReport, NonFiniteLossError, adv_loss_discriminator, adv_loss_generator,
                     compose_total, cycle_loss)
from .networks import DiscriminatorConfig, GeneratorConfig, ModelBundle
from .segmentation import Segmenter, load_mask

log = logging.getLogger(__name__)

CHECKPOINT_MAGIC = b"SANET-CHECKPOINT\n"
CHECKPOINT_VERSION = 1
SEG_FILL = 1.0  # white in [-1, 1]


class CheckpointError(RuntimeError):
    pass


class CheckpointVersionError(CheckpointError):
    pass


class CheckpointIntegrityError(CheckpointError):
    pass


# ---------------------------------------------------------------------------
# Data


def to_tensor(pixels: np.ndarray, dtype=torch.float32) -> torch.Tensor:
    """H x W x 3 uint8 -> 3 x H x W in [-1, 1]."""
    t = torch.from_numpy(np.ascontiguousarray(pixels.transpose(2, 0, 1))).to(torch.float64)
    return (t / 127.5 - 1.0).to(dtype)


def to_pixels(t: torch.Tensor) -> np.ndarray:
    """N x 3 x H x W in [-1, 1] -> N x H x W x 3 uint8."""
    return denormalize(t.detach().cpu().double().numpy().transpose(0, 2, 3, 1))


class PatchSource:
    """Loads manifest patches with their nucleus masks, memoised in memory."""

    def __init__(self, manifest: DatasetManifest, dtype=torch.float32,
                 segmenter: Optional[Callable] = None):
        if not len(manifest):
            raise ValueError(f"{manifest.domain.value} manifest is empty")
        self.manifest = manifest
        self.dtype = dtype
        self.segmenter = segmenter or Segmenter()
        self._cache: Dict[int, tuple] = {}

    def __len__(self) -> int:
        return len(self.manifest)

    def __getitem__(self, i: int):
        if i not in self._cache:
            entry = self.manifest.entries[i]
            pixels = read_rgb(entry.patch_path)
            if entry.mask_path:
                mask = load_mask(entry.mask_path, pixels.shape[:2], entry.patch_id).binary
            else:
                mask = self.segmenter(pixels).binary
            self._cache[i] = (to_tensor(pixels, self.dtype), torch.from_numpy(mask)[None])
        return self._cache[i]

    def batch(self, indices: Sequence[int]):
        items = [self[int(i)] for i in indices]
        return torch.stack([x for x, _ in items]), torch.stack([m for _, m in items])


def epoch_order(n: int, seed: int, epoch: int, stream: int) -> np.ndarray:
    """Fresh seeded permutation per (seed, epoch, domain stream), PCG64-based."""
    ss = np.random.SeedSequence([seed, epoch, stream])
    return np.random.Generator(np.random.PCG64(ss)).permutation(n)


class ImagePool:
    """Replay buffer of generated images (off unless history_size > 0)."""

    def __init__(self, size: int, seed: int):
        self.size = size
        self.images: List[torch.Tensor] = []
        self.gen = torch.Generator().manual_seed(seed)

    def query(self, images: torch.Tensor) -> torch.Tensor:
        if self.size == 0:
            return images
        out = []
        for img in images.detach():
            img = img[None]
            if len(self.images) < self.size:
                self.images.append(img.clone())
                out.append(img)
            elif torch.rand(1, generator=self.gen).item() < 0.5:
                j = int(torch.randint(len(self.images), (1,), generator=self.gen))
                out.append(self.images[j].clone())
                self.images[j] = img.clone()
            else:
                out.append(img)
        return torch.cat(out)

    def state_dict(self):
        return {"images": list(self.images), "rng": self.gen.get_state()}

    def load_state_dict(self, state):
        self.images = list(state["images"])
        self.gen.set_state(state["rng"])


# ---------------------------------------------------------------------------
# Training state and step


@dataclass
class TrainStepReport:
    step: int
    epoch: int
    losses: LossReport
    wall_time: float
    rng_hash: str

    def log_line(self) -> str:
        return f"step={self.step} epoch={self.epoch} {self.losses.to_record()} rng={self.rng_hash}"


def rng_hash() -> str:
    return hashlib.sha256(torch.get_rng_state().numpy().tobytes()).hexdigest()[:16]


def _dtype(cfg: TrainConfig):
    return torch.float64 if cfg.precision == "float64" else torch.float32


def _set_requires_grad(nets, flag: bool) -> None:
    for net in nets:
        for p in net.parameters():
            p.requires_grad_(flag)


class TrainState:
    """Bundle plus its optimisers, replay pools and run configuration."""

    def __init__(self, bundle: ModelBundle, cfg: TrainConfig):
        self.cfg = cfg
        self.bundle = bundle.to(cfg.device)
        for net in bundle.networks().values():
            net.to(_dtype(cfg))
        adam = dict(betas=tuple(cfg.betas))
        self.optimizers = {
            "g_p": torch.optim.Adam(bundle.g_p.parameters(), lr=cfg.lr_generator, **adam),
            "g_f": torch.optim.Adam(bundle.g_f.parameters(), lr=cfg.lr_generator, **adam),
            "d_p": torch.optim.Adam(bundle.d_p.parameters(), lr=cfg.lr_discriminator, **adam),
            "d_f": torch.optim.Adam(bundle.d_f.parameters(), lr=cfg.lr_discriminator, **adam),
        }
        self.pools = {
            "p": ImagePool(cfg.history_size, cfg.seed * 2 + 0),
            "f": ImagePool(cfg.history_size, cfg.seed * 2 + 1),
            "p_seg": ImagePool(cfg.history_size, cfg.seed * 2 + 2),
            "f_seg": ImagePool(cfg.history_size, cfg.seed * 2 + 3),
        }

    @property
    def step(self) -> int:
        return self.bundle.step

    def set_epoch_lr(self, epoch: int) -> None:
        cfg = self.cfg
        factor = 1.0
        if cfg.lr_schedule == "linear_decay":
            # constant for the first half, then linearly to zero
            half = cfg.epochs // 2
            if epoch >= half:
                factor = 1.0 - (epoch - half) / max(cfg.epochs - half, 1)
        for name, opt in self.optimizers.items():
            base = cfg.lr_generator if name.startswith("g") else cfg.lr_discriminator
            for group in opt.param_groups:
                group["lr"] = base * factor

    def state_dict(self):
        return {
            "optimizers": {k: o.state_dict() for k, o in self.optimizers.items()},
            "pools": {k: p.state_dict() for k, p in self.pools.items()},
        }

    def load_state_dict(self, state):
        for k, o in self.optimizers.items():
            o.load_state_dict(state["optimizers"][k])
        for k, p in self.pools.items():
            p.load_state_dict(state["pools"][k])


def segmented(x: torch.Tensor, mask: torch.Tensor, fill: float = SEG_FILL) -> torch.Tensor:
    """Keep nucleus pixels, replace the rest by ``fill`` (white)."""
    return torch.where(mask.to(x.device), x, torch.full_like(x, fill))


def train_step(state: TrainState, f: torch.Tensor, p: torch.Tensor,
               f_mask: torch.Tensor, p_mask: torch.Tensor, epoch: int = 0) -> TrainStepReport:
    """One batch of the alternating update: discriminators first, then generators."""
    if f.shape != p.shape:
        raise ValueError(f"frozen batch {tuple(f.shape)} and permanent batch {tuple(p.shape)} differ")
    t0 = time.perf_counter()
    cfg, b = state.cfg, state.bundle
    w, mode = cfg.loss, cfg.adversarial
    lam = w.lambda_seg
    dtype = _dtype(cfg)
    f = f.to(cfg.device, dtype)
    p = p.to(cfg.device, dtype)
    gens, discs = (b.g_p, b.g_f), (b.d_p, b.d_f)
    b.train()

    # 1. segmented inputs
    f_seg = segmented(f, f_mask)
    p_seg = segmented(p, p_mask)

    # 2. translations of both the original and the segmented images
    _set_requires_grad(gens, True)
    fake_p = b.g_p(f)
    fake_p_seg = b.g_p(f_seg)
    fake_f = b.g_f(p)
    fake_f_seg = b.g_f(p_seg)

    # 3. discriminator update, generators frozen
    _set_requires_grad(gens, False)
    _set_requires_grad(discs, True)
    pools = state.pools
    d_p_gan = adv_loss_discriminator(b.d_p(p), b.d_p(pools["p"].query(fake_p.detach())), mode)
    d_p_gan_seg = adv_loss_discriminator(b.d_p(p_seg), b.d_p(pools["p_seg"].query(fake_p_seg.detach())), mode)
    d_f_gan = adv_loss_discriminator(b.d_f(f), b.d_f(pools["f"].query(fake_f.detach())), mode)
    d_f_gan_seg = adv_loss_discriminator(b.d_f(f_seg), b.d_f(pools["f_seg"].query(fake_f_seg.detach())), mode)
    d_total = compose_total(d_p_gan, d_p_gan_seg, lam) + compose_total(d_f_gan, d_f_gan_seg, lam)
    if not torch.isfinite(d_total):
        _set_requires_grad(gens, True)
        raise NonFiniteLossError(f"non-finite discriminator loss at step {b.step + 1}")
    for name in ("d_p", "d_f"):
        state.optimizers[name].zero_grad(set_to_none=True)
    d_total.backward()
    for name in ("d_p", "d_f"):
        state.optimizers[name].step()

    # 4. generator update, discriminators frozen
    _set_requires_grad(discs, False)
    _set_requires_grad(gens, True)
    g_p_gan = adv_loss_generator(b.d_p(fake_p), mode)
    g_p_gan_seg = adv_loss_generator(b.d_p(fake_p_seg), mode)
    g_f_gan = adv_loss_generator(b.d_f(fake_f), mode)
    g_f_gan_seg = adv_loss_generator(b.d_f(fake_f_seg), mode)
    cyc = cycle_loss(f, b.g_f(fake_p)) + cycle_loss(p, b.g_p(fake_f))
    cyc_seg = cycle_loss(f_seg, b.g_f(fake_p_seg)) + cycle_loss(p_seg, b.g_p(fake_f_seg))
    g_total = (w.lambda_gan * (compose_total(g_p_gan, g_p_gan_seg, lam)
                               + compose_total(g_f_gan, g_f_gan_seg, lam))
               + w.lambda_cycle * compose_total(cyc, cyc_seg, lam))
    if cfg.identity_weight:
        g_total = g_total + cfg.identity_weight * (cycle_loss(p, b.g_p(p)) + cycle_loss(f, b.g_f(f)))
    report = LossReport(*(float(t.detach()) for t in (
        d_p_gan, d_p_gan_seg, d_f_gan, d_f_gan_seg, g_p_gan, g_p_gan_seg,
        g_f_gan, g_f_gan_seg, cyc, cyc_seg, d_total, g_total)))
    if not report.is_finite():
        _set_requires_grad(discs, True)
        raise NonFiniteLossError(f"non-finite generator loss at step {b.step + 1}", report)
    for name in ("g_p", "g_f"):
        state.optimizers[name].zero_grad(set_to_none=True)
    g_total.backward()
    for name in ("g_p", "g_f"):
        state.optimizers[name].step()
    _set_requires_grad(discs, True)

    b.step += 1
    return TrainStepReport(b.step, epoch, report, time.perf_counter() - t0, rng_hash())


# ---------------------------------------------------------------------------
# Checkpoints


def save_checkpoint(path, state: TrainState) -> Path:
    """Write atomically: a failed write leaves any previous file untouched."""
    path = Path(path)
    b = state.bundle
    payload = {
        "format_version": CHECKPOINT_VERSION,
        "train_config": state.cfg.to_dict(),
        "configs": b.configs(),
        "step": b.step,
        "networks": b.state_dict(),
        "train_state": state.state_dict(),
        "torch_rng": torch.get_rng_state(),
    }
    buf = io.BytesIO()
    torch.save(payload, buf)
    data = buf.getvalue()
    digest = hashlib.sha256(data).hexdigest().encode()
    tmp = path.with_name(path.name + ".tmp")
    try:
        with open(tmp, "wb") as fh:
            fh.write(CHECKPOINT_MAGIC)
            fh.write(f"{CHECKPOINT_VERSION}\n".encode())
            fh.write(digest + b"\n")
            fh.write(data)
        os.replace(tmp, path)
    except OSError as exc:
        tmp.unlink(missing_ok=True)
        raise CheckpointError(f"could not write checkpoint {path}: {exc}") from exc
    return path


@dataclass
class Checkpoint:
    bundle: ModelBundle
    train_config: TrainConfig
    train_state: dict
    torch_rng: torch.Tensor

    def restore(self) -> TrainState:
        state = TrainState(self.bundle, self.train_config)
        state.load_state_dict(self.train_state)
        torch.set_rng_state(self.torch_rng)
        return state


def load_checkpoint(path) -> Checkpoint:
    with open(path, "rb") as fh:
        raw = fh.read()
    if not raw.startswith(CHECKPOINT_MAGIC):
        raise CheckpointIntegrityError(f"{path}: not a checkpoint file")
    rest = raw[len(CHECKPOINT_MAGIC):]
    try:
        version_line, digest, data = rest.split(b"\n", 2)
        version = int(version_line)
    except ValueError:
        raise CheckpointIntegrityError(f"{path}: truncated checkpoint header") from None
    if version != CHECKPOINT_VERSION:
        raise CheckpointVersionError(
            f"{path}: checkpoint format version {version}, expected {CHECKPOINT_VERSION}")
    if hashlib.sha256(data).hexdigest().encode() != digest:
        raise CheckpointIntegrityError(f"{path}: checksum mismatch (truncated or corrupted)")
    payload = torch.load(io.BytesIO(data), map_location="cpu", weights_only=True)
    cfg = TrainConfig.from_dict(payload["train_config"])
    gen_cfg = GeneratorConfig(**payload["configs"]["generator"])
    disc_cfg = DiscriminatorConfig(**payload["configs"]["discriminator"])
    bundle = ModelBundle.create(gen_cfg, disc_cfg, seed=0)
    for net in bundle.networks().values():
        net.to(_dtype(cfg))
    bundle.load_state_dict(payload["networks"])
    bundle.step = int(payload["step"])
    return Checkpoint(bundle, cfg, payload["train_state"], payload["torch_rng"])


# ---------------------------------------------------------------------------
# Loop


@dataclass
class TrainResult:
    bundle: ModelBundle
    reports: List[TrainStepReport] = field(default_factory=list)
    checkpoints: List[Path] = field(default_factory=list)
    state: Optional[TrainState] = None


def steps_per_epoch(n_frozen: int, n_permanent: int, batch_size: int) -> int:
    return min(n_frozen, n_permanent) // batch_size


def train(frozen: DatasetManifest, permanent: DatasetManifest, cfg: TrainConfig,
          bundle: Optional[ModelBundle] = None, *, out_dir=None,
          resume: Optional[Checkpoint] = None, stop_after: Optional[int] = None,
          on_step: Optional[Callable[[TrainStepReport], None]] = None) -> TrainResult:
    """Run ``cfg.epochs`` passes over min(|F|, |P|) paired batches.

    With ``out_dir`` a ``train.log`` (config echo, then one line per step) and
    checkpoints ``step_XXXXXX.ckpt`` / ``final.ckpt`` are written there.
    ``stop_after`` ends the run after that global step (used to simulate an
    interruption); ``resume`` continues from a loaded checkpoint.
    """
    errors = cfg.validate()
    if errors:
        raise ValueError("; ".join(errors))
    dtype = _dtype(cfg)
    src_f = PatchSource(frozen, dtype)
    src_p = PatchSource(permanent, dtype)
    per_epoch = steps_per_epoch(len(src_f), len(src_p), cfg.batch_size)
    if per_epoch == 0:
        raise ValueError("manifests are smaller than one batch")
    total = per_epoch * cfg.epochs

    if resume is not None:
        state = resume.restore()
    else:
        torch.manual_seed(cfg.seed)
        bundle = bundle or ModelBundle.create(cfg.generator, cfg.discriminator, cfg.seed)
        state = TrainState(bundle, cfg)

    out = Path(out_dir) if out_dir is not None else None
    log_fh = None
    if out is not None:
        out.mkdir(parents=True, exist_ok=True)
        log_path = out / "train.log"
        if resume is None:
            log_fh = open(log_path, "w", encoding="utf-8")
            log_fh.write("# config: " + json.dumps(cfg.to_dict(), sort_keys=True) + "\n")
        else:
            log_fh = open(log_path, "a", encoding="utf-8")
    result = TrainResult(state.bundle, state=state)
    last = total if stop_after is None else min(total, stop_after)
    bs = cfg.batch_size
    try:
        while state.step < last:
            epoch, k = divmod(state.step, per_epoch)
            state.set_epoch_lr(epoch)
            order_f = epoch_order(len(src_f), cfg.seed, epoch, 0)
            order_p = epoch_order(len(src_p), cfg.seed, epoch, 1)
            f, fm = src_f.batch(order_f[k * bs:(k + 1) * bs])
            p, pm = src_p.batch(order_p[k * bs:(k + 1) * bs])
            report = train_step(state, f, p, fm, pm, epoch)
            result.reports.append(report)
            if log_fh:
                log_fh.write(report.log_line() + "\n")
                log_fh.flush()
            if on_step:
                on_step(report)
            if out is not None and cfg.checkpoint_interval and state.step % cfg.checkpoint_interval == 0:
                result.checkpoints.append(save_checkpoint(out / f"step_{state.step:06d}.ckpt", state))
        if out is not None and state.step == total:
            result.checkpoints.append(save_checkpoint(out / "final.ckpt", state))
    finally:
        if log_fh:
            log_fh.close()
    return result


# ---------------------------------------------------------------------------
# Inference


def _as_batch(patches) -> np.ndarray:
    if isinstance(patches, ImagePatch):
        return patches.pixels[None]
    if isinstance(patches, np.ndarray):
        return patches[None] if patches.ndim == 3 else patches
    return np.stack([p.pixels if isinstance(p, ImagePatch) else np.asarray(p) for p in patches])


@torch.no_grad()
def generate(bundle: ModelBundle, patches, generator: str = "g_p") -> np.ndarray:
    """Translate 8-bit frozen patches to permanent-like 8-bit patches (N x H x W x 3)."""
    pixels = _as_batch(patches)
    size = bundle.gen_cfg.image_size
    if pixels.ndim != 4 or pixels.shape[1:] != (size, size, 3):
        raise ValueError(f"expected {size}x{size}x3 patches, got {pixels.shape[1:]}")
    net: nn.Module = getattr(bundle, generator)
    was_training = net.training
    net.eval()
    try:
        param = next(net.parameters(), None)
        dtype = param.dtype if param is not None else torch.float32
        device = param.device if param is not None else "cpu"
        x = torch.stack([to_tensor(px, dtype) for px in pixels]).to(device)
        return to_pixels(net(x))
    finally:
        net.train(was_training)

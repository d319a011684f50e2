"""Training and run configuration.

The defaults are the SAN column of the training table: batch 1, 5 epochs,
generator lr 1e-3, discriminator lr 1e-4, lambda_gan 1, lambda_cycle 100,
lambda_seg 1.0 at 256x256. ``toy_profile`` shrinks the image and networks
for desk-scale runs without touching the optimisation hyperparameters.
"""

from __future__ import annotations

import dataclasses
import json
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Any, Dict, List, Optional

import yaml

from .losses import ADVERSARIAL_MODES, LossWeights
from .networks import TOY_DISCRIMINATOR, TOY_GENERATOR, DiscriminatorConfig, GeneratorConfig

PRECISIONS = ("float32", "float64")
LR_SCHEDULES = ("constant", "linear_decay")


class ConfigError(ValueError):
    def __init__(self, errors: List[str]):
        self.errors = list(errors)
        super().__init__("invalid configuration:\n  " + "\n  ".join(self.errors))


@dataclass
class TrainConfig:
    batch_size: int = 1
    epochs: int = 5
    lr_generator: float = 1e-3
    lr_discriminator: float = 1e-4
    betas: tuple = (0.5, 0.999)
    loss: LossWeights = field(default_factory=LossWeights)
    adversarial: str = "lsgan"
    seed: int = 0
    checkpoint_interval: int = 0  # steps; 0 writes only the final checkpoint
    device: str = "cpu"
    precision: str = "float32"
    identity_weight: float = 0.0
    history_size: int = 0
    lr_schedule: str = "constant"
    generator: GeneratorConfig = field(default_factory=GeneratorConfig)
    discriminator: DiscriminatorConfig = field(default_factory=DiscriminatorConfig)

    def __post_init__(self):
        self.betas = tuple(self.betas)

    def validate(self) -> List[str]:
        errors = []
        if not isinstance(self.batch_size, int) or self.batch_size < 1:
            errors.append(f"train.batch_size: must be an integer >= 1, got {self.batch_size!r}")
        if not isinstance(self.epochs, int) or self.epochs < 1:
            errors.append(f"train.epochs: must be an integer >= 1, got {self.epochs!r}")
        for name in ("lr_generator", "lr_discriminator"):
            v = getattr(self, name)
            if not isinstance(v, (int, float)) or not v > 0:
                errors.append(f"train.{name}: must be > 0, got {v!r}")
        if len(self.betas) != 2 or not all(0 <= b < 1 for b in self.betas):
            errors.append(f"train.betas: must be two values in [0, 1), got {self.betas!r}")
        if self.adversarial not in ADVERSARIAL_MODES:
            errors.append(f"train.adversarial: must be one of {ADVERSARIAL_MODES}, got {self.adversarial!r}")
        if self.precision not in PRECISIONS:
            errors.append(f"train.precision: must be one of {PRECISIONS}, got {self.precision!r}")
        if self.lr_schedule not in LR_SCHEDULES:
            errors.append(f"train.lr_schedule: must be one of {LR_SCHEDULES}, got {self.lr_schedule!r}")
        if not isinstance(self.checkpoint_interval, int) or self.checkpoint_interval < 0:
            errors.append("train.checkpoint_interval: must be an integer >= 0")
        if self.identity_weight < 0:
            errors.append("train.identity_weight: must be >= 0")
        if not isinstance(self.history_size, int) or self.history_size < 0:
            errors.append("train.history_size: must be an integer >= 0")
        errors += self.loss.validate()
        for prefix, cfg in (("model.generator", self.generator), ("model.discriminator", self.discriminator)):
            try:
                cfg.validate()
            except (ValueError, TypeError) as exc:
                errors.append(f"{prefix}: {exc}")
        if self.generator.image_size != self.discriminator.image_size:
            errors.append("model: generator and discriminator image_size differ")
        return errors

    def to_dict(self) -> Dict[str, Any]:
        d = asdict(self)
        d["betas"] = list(self.betas)
        d["discriminator"]["widths"] = list(self.discriminator.widths)
        return d

    @classmethod
    def from_dict(cls, data: Dict[str, Any]) -> "TrainConfig":
        data = dict(data)
        loss = LossWeights(**data.pop("loss", {}))
        gen = GeneratorConfig(**data.pop("generator", {}))
        disc = DiscriminatorConfig(**data.pop("discriminator", {}))
        return cls(loss=loss, generator=gen, discriminator=disc, **data)


def toy_profile(cfg: Optional[TrainConfig] = None, image_size: int = 64) -> TrainConfig:
    cfg = cfg or TrainConfig()
    gen = dataclasses.replace(TOY_GENERATOR, image_size=image_size)
    disc = dataclasses.replace(TOY_DISCRIMINATOR, image_size=image_size)
    return dataclasses.replace(cfg, generator=gen, discriminator=disc)


@dataclass
class RunConfig:
    frozen_manifest: Optional[str] = None
    permanent_manifest: Optional[str] = None
    output_dir: str = "runs/san"
    train: TrainConfig = field(default_factory=TrainConfig)

    def to_dict(self) -> Dict[str, Any]:
        t = self.train.to_dict()
        return {
            "data": {"frozen_manifest": self.frozen_manifest,
                     "permanent_manifest": self.permanent_manifest},
            "train": {k: v for k, v in t.items() if k not in ("loss", "generator", "discriminator")},
            "loss": t["loss"],
            "model": {"generator": t["generator"], "discriminator": t["discriminator"]},
            "output": {"dir": self.output_dir},
        }

    def dumps(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=True)


_SECTIONS = {
    "data": {"frozen_manifest", "permanent_manifest"},
    "train": {f.name for f in dataclasses.fields(TrainConfig)} - {"loss", "generator", "discriminator"},
    "loss": {f.name for f in dataclasses.fields(LossWeights)},
    "model": {"generator", "discriminator"},
    "output": {"dir"},
}
_MODEL_KEYS = {
    "generator": {f.name for f in dataclasses.fields(GeneratorConfig)},
    "discriminator": {f.name for f in dataclasses.fields(DiscriminatorConfig)},
}


def parse_run_config(data: Optional[Dict[str, Any]], toy: bool = False, validate: bool = True) -> RunConfig:
    """Build a RunConfig from nested mappings, collecting every problem before raising.

    ``validate=False`` skips the value checks so a caller can apply overrides first.
    """
    data = data or {}
    errors = []
    if not isinstance(data, dict):
        raise ConfigError(["config root must be a mapping"])
    for section, value in data.items():
        if section not in _SECTIONS:
            errors.append(f"{section}: unknown section")
            continue
        if not isinstance(value, dict):
            errors.append(f"{section}: must be a mapping")
            continue
        for key in value:
            if key not in _SECTIONS[section]:
                errors.append(f"{section}.{key}: unknown key")
        if section == "model":
            for sub, sub_value in value.items():
                if sub in _MODEL_KEYS and isinstance(sub_value, dict):
                    errors += [f"model.{sub}.{k}: unknown key" for k in sub_value
                               if k not in _MODEL_KEYS[sub]]
    if errors:
        raise ConfigError(errors)

    base = toy_profile() if toy else TrainConfig()
    model = data.get("model", {})
    gen = dataclasses.replace(base.generator, **model.get("generator", {}))
    disc = dataclasses.replace(base.discriminator, **model.get("discriminator", {}))
    if "image_size" in model.get("generator", {}) and "image_size" not in model.get("discriminator", {}):
        disc = dataclasses.replace(disc, image_size=gen.image_size)
    try:
        train = dataclasses.replace(
            base, loss=dataclasses.replace(base.loss, **data.get("loss", {})),
            generator=gen, discriminator=disc, **data.get("train", {}))
    except TypeError as exc:
        raise ConfigError([str(exc)]) from None
    errors = train.validate() if validate else []
    if errors:
        raise ConfigError(errors)
    d = data.get("data", {})
    return RunConfig(
        frozen_manifest=d.get("frozen_manifest"),
        permanent_manifest=d.get("permanent_manifest"),
        output_dir=data.get("output", {}).get("dir", RunConfig.output_dir),
        train=train,
    )


def load_run_config(path, toy: bool = False, validate: bool = True) -> RunConfig:
    path = Path(path)
    try:
        data = yaml.safe_load(path.read_text(encoding="utf-8"))
    except yaml.YAMLError as exc:
        raise ConfigError([f"{path}: not valid YAML: {exc}"]) from None
    cfg = parse_run_config(data, toy=toy, validate=validate)
    # relative manifest/output paths resolve against the config file
    for attr in ("frozen_manifest", "permanent_manifest", "output_dir"):
        value = getattr(cfg, attr)
        if value and not Path(value).is_absolute():
            setattr(cfg, attr, str((path.parent / value).resolve()))
    return cfg

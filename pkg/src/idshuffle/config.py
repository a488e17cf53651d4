"""Run configuration: dataclasses, JSON round-trip, validation, content hash.

A run is described by a single JSON document with five blocks (dataset,
model, loss, training, output). The canonicalized JSON's SHA-256 prefix is
stamped into checkpoints, metrics, and figure footers so every artifact is
traceable to the exact configuration that produced it.
"""

from __future__ import annotations

import dataclasses
import hashlib
import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any

from .errors import ConfigError

LAYOUTS = ("synthetic_manifest", "market_dirs")
BACKBONES = ("small_convnet", "resnet50_conv4_1")

# Spatial stride of each backbone variant; the generator additionally needs
# input sides divisible by 32 (see gan.Generator).
BACKBONE_STRIDE = {"small_convnet": 4, "resnet50_conv4_1": 16}


@dataclass
class DatasetConfig:
    layout: str = "synthetic_manifest"
    root: str = "data/synth"
    height: int = 96
    width: int = 32


@dataclass
class ModelConfig:
    backbone: str = "small_convnet"
    pretrained_backbone: bool = False  # resnet variant only
    # per-part feature dims: identity encoder / identity-unrelated encoder
    p_r: int = 64
    p_u: int = 16
    # mid channels of the two convs inside each encoder branch
    branch_channels_r: int = 32
    branch_channels_u: int = 16
    noise_dim: int = 32
    # number of train identities C; null means "infer from the dataset"
    num_classes: int | None = None
    gen_channels: list[int] = field(default_factory=lambda: [128, 64, 32, 16, 16])
    gen_dropout: float = 0.5
    disc_channels: list[int] = field(default_factory=lambda: [16, 32, 64, 64, 64])


@dataclass
class LossConfig:
    lambda_r: float = 20.0
    lambda_u_stage2: float = 1e-3
    lambda_u_stage3: float = 1e-2
    lambda_s: float = 10.0
    lambda_ps: float = 10.0
    lambda_d: float = 1.0
    lambda_c: float = 2.0


@dataclass
class TrainingConfig:
    epochs: list[int] = field(default_factory=lambda: [300, 200, 100])
    batch_p: int = 4
    batch_k: int = 4
    seed: int = 0
    deterministic: bool = True
    lr: float = 2e-4  # stages 1 and 2
    lr_stage3: float = 2e-5
    lr_disc: float = 2e-4
    flip_prob: float = 0.5
    erase_prob: float = 0.5
    erase_area: list[float] = field(default_factory=lambda: [0.02, 0.4])
    erase_aspect: list[float] = field(default_factory=lambda: [0.3, 3.33])
    # iterations per epoch; null derives max(1, num_train // (P*K))
    iters_per_epoch: int | None = None
    checkpoint_every: int = 1


@dataclass
class OutputConfig:
    run_dir: str = "runs/run0"


@dataclass
class RunConfig:
    dataset: DatasetConfig = field(default_factory=DatasetConfig)
    model: ModelConfig = field(default_factory=ModelConfig)
    loss: LossConfig = field(default_factory=LossConfig)
    training: TrainingConfig = field(default_factory=TrainingConfig)
    output: OutputConfig = field(default_factory=OutputConfig)

    # -- presets ----------------------------------------------------------

    @classmethod
    def desk(cls) -> "RunConfig":
        """Small configuration that trains in minutes on one CPU core."""
        cfg = cls()
        cfg.training.epochs = [30, 20, 10]
        return cfg

    @classmethod
    def paper_scale(cls) -> "RunConfig":
        """Full-scale dims: 384x128 input, 2048/512-dim features."""
        cfg = cls()
        cfg.dataset.height = 384
        cfg.dataset.width = 128
        cfg.model.p_r = 256
        cfg.model.p_u = 64
        cfg.model.branch_channels_r = 256
        cfg.model.branch_channels_u = 64
        cfg.model.noise_dim = 128
        cfg.training.epochs = [300, 200, 100]
        return cfg

    # -- serialization ----------------------------------------------------

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    @classmethod
    def from_dict(cls, data: dict) -> "RunConfig":
        if not isinstance(data, dict):
            raise ConfigError(f"config root must be an object, got {type(data).__name__}")
        cfg = cls()
        block_types = {
            "dataset": DatasetConfig,
            "model": ModelConfig,
            "loss": LossConfig,
            "training": TrainingConfig,
            "output": OutputConfig,
        }
        unknown = set(data) - set(block_types)
        if unknown:
            raise ConfigError(f"unknown config block(s): {sorted(unknown)}")
        for block_name, block_cls in block_types.items():
            if block_name not in data:
                continue
            block_data = data[block_name]
            if not isinstance(block_data, dict):
                raise ConfigError(f"config block '{block_name}' must be an object")
            valid = {f.name for f in dataclasses.fields(block_cls)}
            bad = set(block_data) - valid
            if bad:
                raise ConfigError(
                    f"unknown key(s) in config block '{block_name}': {sorted(bad)}"
                )
            block = getattr(cfg, block_name)
            for key, value in block_data.items():
                setattr(block, key, value)
        cfg.validate()
        return cfg

    @classmethod
    def load(cls, path: str | Path) -> "RunConfig":
        path = Path(path)
        if not path.is_file():
            raise ConfigError(f"config file not found: {path}")
        try:
            data = json.loads(path.read_text())
        except json.JSONDecodeError as exc:
            raise ConfigError(f"config file {path} is not valid JSON: {exc}") from exc
        return cls.from_dict(data)

    def save(self, path: str | Path) -> None:
        Path(path).write_text(json.dumps(self.to_dict(), indent=2, sort_keys=True) + "\n")

    def config_hash(self) -> str:
        # hash the experiment definition only; output location is not part
        # of the experiment's identity
        d = self.to_dict()
        d.pop("output", None)
        canon = json.dumps(d, sort_keys=True, separators=(",", ":"))
        return hashlib.sha256(canon.encode()).hexdigest()[:12]

    # -- validation -------------------------------------------------------

    def validate(self) -> "RunConfig":
        d, m, l, t = self.dataset, self.model, self.loss, self.training
        if d.layout not in LAYOUTS:
            raise ConfigError(f"dataset.layout must be one of {LAYOUTS}, got {d.layout!r}")
        if m.backbone not in BACKBONES:
            raise ConfigError(f"model.backbone must be one of {BACKBONES}, got {m.backbone!r}")
        if d.height <= 0 or d.width <= 0:
            raise ConfigError("dataset resolution must be positive")
        if d.height % 32 or d.width % 32:
            raise ConfigError(
                f"resolution {d.height}x{d.width} must be divisible by 32 "
                "(the generator upsamples a 1x1 seed through six stages)"
            )
        stride = BACKBONE_STRIDE[m.backbone]
        fmap_h = d.height // stride
        if fmap_h % 6:
            raise ConfigError(
                f"backbone '{m.backbone}' maps height {d.height} to {fmap_h}, "
                "which is not divisible by 6 (required for exact 2- and 3-way "
                "horizontal slicing); use a multiple of 96"
            )
        for name in ("p_r", "p_u", "branch_channels_r", "branch_channels_u", "noise_dim"):
            if getattr(m, name) < 1:
                raise ConfigError(f"model.{name} must be >= 1")
        if m.num_classes is not None and m.num_classes < 2:
            raise ConfigError("model.num_classes must be >= 2 (or null to infer)")
        if len(m.gen_channels) != 5:
            raise ConfigError("model.gen_channels must list 5 widths (stage 6 is fixed to RGB)")
        if len(m.disc_channels) != 5:
            raise ConfigError("model.disc_channels must list 5 trunk widths")
        if not 0.0 <= m.gen_dropout < 1.0:
            raise ConfigError("model.gen_dropout must be in [0, 1)")
        for f in dataclasses.fields(LossConfig):
            if getattr(l, f.name) < 0:
                raise ConfigError(f"loss.{f.name} must be nonnegative")
        if len(t.epochs) != 3 or any(int(e) < 0 for e in t.epochs):
            raise ConfigError("training.epochs must list 3 nonnegative stage lengths")
        if t.batch_p < 1:
            raise ConfigError("training.batch_p must be >= 1")
        if t.batch_k < 2:
            raise ConfigError("training.batch_k must be >= 2 (anchor/positive pairing)")
        for name in ("lr", "lr_stage3", "lr_disc"):
            if getattr(t, name) <= 0:
                raise ConfigError(f"training.{name} must be positive")
        for name in ("flip_prob", "erase_prob"):
            if not 0.0 <= getattr(t, name) <= 1.0:
                raise ConfigError(f"training.{name} must be in [0, 1]")
        for name in ("erase_area", "erase_aspect"):
            rng = getattr(t, name)
            if len(rng) != 2 or rng[0] <= 0 or rng[0] > rng[1]:
                raise ConfigError(f"training.{name} must be a positive (lo, hi) range")
        if t.iters_per_epoch is not None and t.iters_per_epoch < 1:
            raise ConfigError("training.iters_per_epoch must be >= 1 (or null)")
        if t.checkpoint_every < 1:
            raise ConfigError("training.checkpoint_every must be >= 1")
        return self


def apply_overrides(config: RunConfig, overrides: dict[str, Any]) -> RunConfig:
    """Apply dotted-path overrides like {"training.seed": 3}; flags win.

    Values may be raw python objects or JSON-encoded strings.
    """
    for path, value in overrides.items():
        parts = path.split(".")
        if len(parts) != 2:
            raise ConfigError(f"override key must be 'block.field', got {path!r}")
        block_name, field_name = parts
        if not hasattr(config, block_name):
            raise ConfigError(f"unknown config block in override: {block_name!r}")
        block = getattr(config, block_name)
        if field_name not in {f.name for f in dataclasses.fields(block)}:
            raise ConfigError(f"unknown config field in override: {path!r}")
        if isinstance(value, str):
            try:
                value = json.loads(value)
            except json.JSONDecodeError:
                pass  # keep as string (e.g. paths, enum names)
        setattr(block, field_name, value)
    config.validate()
    return config

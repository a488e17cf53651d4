"""Container wiring the backbone, encoder heads, generator and discriminator."""

from __future__ import annotations

import itertools

import torch
from torch import nn

from .config import RunConfig
from .encoders import (NUM_PARTS, GaussianCode, FeatureBundle, IdentityEncoder,
                       UnrelatedEncoder, build_backbone)
from .errors import ConfigError
from .gan import Discriminator, Generator


class DisentangleModel(nn.Module):
    """Full model; stages train different parameter subsets of this module."""

    def __init__(self, config: RunConfig, num_classes: int):
        super().__init__()
        m = config.model
        self.num_classes = num_classes
        self.noise_dim = m.noise_dim
        self.p_r, self.p_u = m.p_r, m.p_u
        self.backbone = build_backbone(m.backbone, m.pretrained_backbone)
        in_ch = self.backbone.out_channels
        self.id_encoder = IdentityEncoder(in_ch, m.branch_channels_r, m.p_r, num_classes)
        self.unrel_encoder = UnrelatedEncoder(in_ch, m.branch_channels_u, m.p_u)
        self.cond_dim = NUM_PARTS * (m.p_r + m.p_u) + m.noise_dim + num_classes
        self.generator = Generator(self.cond_dim, config.dataset.height,
                                   config.dataset.width, tuple(m.gen_channels),
                                   m.gen_dropout)
        self.discriminator = Discriminator(num_classes, tuple(m.disc_channels))

    # -- forward helpers ----------------------------------------------------

    def id_features(self, images: torch.Tensor) -> tuple[FeatureBundle, list[torch.Tensor]]:
        return self.id_encoder(self.backbone(images))

    def encode(self, images: torch.Tensor, mode: str = "sample",
               eps: torch.Tensor | None = None
               ) -> tuple[FeatureBundle, list[torch.Tensor], GaussianCode]:
        fmap = self.backbone(images)
        bundle, logits = self.id_encoder(fmap)
        code = self.unrel_encoder(fmap, mode=mode, eps=eps)
        return bundle, logits, code

    def sample_noise(self, batch_size: int, device=None) -> torch.Tensor:
        return torch.randn(batch_size, self.noise_dim, device=device)

    # -- parameter groups -----------------------------------------------------

    def baseline_modules(self) -> list[nn.Module]:
        """The stage-1 subset: backbone + identity encoder (with classifiers)."""
        return [self.backbone, self.id_encoder]

    def baseline_parameters(self):
        return itertools.chain(*(m.parameters() for m in self.baseline_modules()))

    def gan_generator_parameters(self):
        return itertools.chain(self.unrel_encoder.parameters(),
                               self.generator.parameters())

    def discriminator_parameters(self):
        return self.discriminator.parameters()


def build_model(config: RunConfig, num_classes: int | None = None) -> DisentangleModel:
    configured = config.model.num_classes
    if configured is None and num_classes is None:
        raise ConfigError("num_classes is not configured and no dataset count given")
    if configured is not None and num_classes is not None and configured != num_classes:
        raise ConfigError(
            f"model.num_classes={configured} conflicts with the dataset's "
            f"{num_classes} train identities")
    return DisentangleModel(config, configured if configured is not None else num_classes)

"""Generator and the two-headed discriminator.

The generator upsamples a 1x1 conditioning stack (identity features +
identity-unrelated features + noise + one-hot label) through six transposed
convolutions to the dataset resolution, which therefore must be divisible
by 32. The discriminator shares a five-block stride-2 trunk between a
patch-scoring domain head (two extra stride-1 blocks) and an identity
classifier head (one extra block + fully connected).
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import torch
from torch import nn

from .errors import ConfigError


@dataclass
class GeneratorInput:
    id_feature: torch.Tensor      # [B, 8*p_r]
    unrel_feature: torch.Tensor   # [B, 8*p_u]
    noise: torch.Tensor           # [B, noise_dim]
    label_onehot: torch.Tensor    # [B, C]

    def concat(self) -> torch.Tensor:
        return torch.cat(
            [self.id_feature, self.unrel_feature, self.noise, self.label_onehot], dim=1)

    @property
    def dim(self) -> int:
        return (self.id_feature.shape[1] + self.unrel_feature.shape[1]
                + self.noise.shape[1] + self.label_onehot.shape[1])


def one_hot_labels(labels, num_classes: int, device=None) -> torch.Tensor:
    """One-hot encode 1-based identity labels; labels < 1 give the all-zero
    vector (used when visualizing identities outside the training set)."""
    labels = torch.as_tensor(np.asarray(labels), dtype=torch.long, device=device)
    out = torch.zeros(labels.shape[0], num_classes, dtype=torch.float32, device=device)
    known = labels >= 1
    if bool(known.any()):
        idx = labels[known] - 1
        if int(idx.max()) >= num_classes:
            raise ConfigError(
                f"label {int(idx.max()) + 1} outside the {num_classes}-class head")
        out[known, idx] = 1.0
    return out


@dataclass
class DiscriminatorOutput:
    domain_patches: torch.Tensor  # [B, 1, h_d, w_d] real/fake probabilities
    class_logits: torch.Tensor    # [B, C]


class Generator(nn.Module):
    """Six transposed-conv stages from a 1x1 seed to an RGB image in [-1, 1]."""

    def __init__(self, cond_dim: int, height: int, width: int,
                 channels=(128, 64, 32, 16, 16), dropout: float = 0.5):
        super().__init__()
        if height % 32 or width % 32:
            raise ConfigError(
                f"generator output {height}x{width} must be divisible by 32")
        if len(channels) != 5:
            raise ConfigError("generator needs 5 intermediate channel widths")
        self.cond_dim = cond_dim
        self.height, self.width = height, width
        seed_h, seed_w = height // 32, width // 32

        def stage(cin, cout, kernel, stride, padding):
            return [nn.ConvTranspose2d(cin, cout, kernel, stride, padding, bias=False),
                    nn.BatchNorm2d(cout), nn.LeakyReLU(0.2, inplace=True),
                    nn.Dropout(dropout)]

        layers = stage(cond_dim, channels[0], (seed_h, seed_w), 1, 0)
        for cin, cout in zip(channels[:-1], channels[1:]):
            layers += stage(cin, cout, 4, 2, 1)
        layers += [nn.ConvTranspose2d(channels[-1], 3, 4, 2, 1), nn.Tanh()]
        self.net = nn.Sequential(*layers)

    def forward(self, cond: torch.Tensor) -> torch.Tensor:
        if cond.ndim != 2 or cond.shape[1] != self.cond_dim:
            raise ConfigError(
                f"conditioning dim mismatch: expected [B, {self.cond_dim}], "
                f"got {tuple(cond.shape)}")
        return self.net(cond[:, :, None, None])

    def generate(self, ginput: GeneratorInput) -> torch.Tensor:
        return self.forward(ginput.concat())


class Discriminator(nn.Module):
    """Shared trunk with PatchGAN domain head and identity-classifier head."""

    def __init__(self, num_classes: int, channels=(16, 32, 64, 64, 64)):
        super().__init__()
        if len(channels) != 5:
            raise ConfigError("discriminator needs 5 trunk channel widths")
        self.num_classes = num_classes

        def block(cin, cout, stride):
            kernel = 4 if stride == 2 else 3
            return [nn.Conv2d(cin, cout, kernel, stride, padding=1, bias=False),
                    nn.InstanceNorm2d(cout), nn.LeakyReLU(0.2, inplace=True)]

        trunk = []
        cin = 3
        for cout in channels:
            trunk += block(cin, cout, 2)
            cin = cout
        self.trunk = nn.Sequential(*trunk)
        self.domain_head = nn.Sequential(
            *block(cin, cin, 1), *block(cin, cin, 1),
            nn.Conv2d(cin, 1, 3, 1, padding=1), nn.Sigmoid())
        self.class_head = nn.Sequential(
            *block(cin, cin, 1), nn.AdaptiveAvgPool2d(1), nn.Flatten(),
            nn.Linear(cin, num_classes))

    def forward(self, images: torch.Tensor) -> DiscriminatorOutput:
        shared = self.trunk(images)
        return DiscriminatorOutput(domain_patches=self.domain_head(shared),
                                   class_logits=self.class_head(shared))


def interpolate_inputs(b1: GeneratorInput, b2: GeneratorInput, axis: str,
                       steps: int) -> list[GeneratorInput]:
    """Conditioning stacks along a linear path in one feature block.

    The chosen block ('identity' or 'unrelated') interpolates from b1 to b2;
    the other block, the noise, and the label are held from b1, so the
    endpoints reproduce b1 and b1-with-b2's-block exactly.
    """
    if steps < 2:
        raise ConfigError("interpolation needs steps >= 2")
    if axis not in ("identity", "unrelated"):
        raise ConfigError(f"unknown interpolation axis: {axis!r}")
    out = []
    for alpha in np.linspace(0.0, 1.0, steps):
        a = float(alpha)
        id_feat = (1.0 - a) * b1.id_feature + a * b2.id_feature \
            if axis == "identity" else b1.id_feature
        unrel = (1.0 - a) * b1.unrel_feature + a * b2.unrel_feature \
            if axis == "unrelated" else b1.unrel_feature
        out.append(GeneratorInput(id_feature=id_feat, unrel_feature=unrel,
                                  noise=b1.noise, label_onehot=b1.label_onehot))
    return out


def interpolate_generate(generator: Generator, b1: GeneratorInput, b2: GeneratorInput,
                         axis: str, steps: int) -> list[torch.Tensor]:
    return [generator.generate(g) for g in interpolate_inputs(b1, b2, axis, steps)]

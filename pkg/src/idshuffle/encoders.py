"""Shared convolutional backbone and the two encoder heads.

The identity encoder produces K=8 part features per image through three
branches that slice the backbone map into 1, 2, and 3 horizontal regions;
the identity-unrelated encoder mirrors that geometry but emits a Gaussian
(mu, logvar) code per part with reparameterized sampling.

Bundle slot order is fixed and is the concatenation order everywhere:

    0: part1 global
    1: part2 global        4: part3 global
    2: part2 local 1 (top) 5: part3 local 1 (top)
    3: part2 local 2       6: part3 local 2
                           7: part3 local 3 (bottom)

Branch convolutions are applied to each horizontal slice independently
(zero padding per slice), so a local feature depends only on its own rows
of the backbone map; the branch global feature is the elementwise max over
that branch's slice outputs.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import torch
from torch import nn

from .errors import ConfigError

NUM_PARTS = 8
BRANCH_SLICES = (1, 2, 3)
SLOT_BRANCH = ("part1", "part2", "part2", "part2", "part3", "part3", "part3", "part3")
SLOT_REGION = (0, 0, 1, 2, 0, 1, 2, 3)  # 0 = global, 1.. = slice from top
GLOBAL_SLOTS = (0, 1, 4)
LOCAL_SLOTS = (2, 3, 5, 6, 7)


@dataclass
class PartFeature:
    vector: torch.Tensor  # [..., p]
    branch: str
    region_index: int
    is_global: bool


class FeatureBundle:
    """K=8 part features packed as a [..., 8, p] tensor."""

    __slots__ = ("tensor",)

    def __init__(self, tensor: torch.Tensor):
        if tensor.ndim < 2 or tensor.shape[-2] != NUM_PARTS:
            raise ValueError(
                f"bundle tensor must have {NUM_PARTS} parts on dim -2, got {tuple(tensor.shape)}")
        self.tensor = tensor

    @property
    def p(self) -> int:
        return self.tensor.shape[-1]

    def concat(self) -> torch.Tensor:
        """Flatten to [..., 8p] in the documented slot order."""
        return self.tensor.reshape(*self.tensor.shape[:-2], NUM_PARTS * self.p)

    @classmethod
    def from_concat(cls, vec: torch.Tensor, p: int | None = None) -> "FeatureBundle":
        dim = vec.shape[-1]
        if p is None:
            if dim % NUM_PARTS:
                raise ValueError(f"concat length {dim} is not a multiple of {NUM_PARTS}")
            p = dim // NUM_PARTS
        if dim != NUM_PARTS * p:
            raise ValueError(f"concat length {dim} does not match {NUM_PARTS} parts of p={p}")
        return cls(vec.reshape(*vec.shape[:-1], NUM_PARTS, p))

    def parts(self) -> list[PartFeature]:
        return [PartFeature(vector=self.tensor[..., k, :], branch=SLOT_BRANCH[k],
                            region_index=SLOT_REGION[k], is_global=SLOT_REGION[k] == 0)
                for k in range(NUM_PARTS)]

    def select(self, idx) -> "FeatureBundle":
        """Gather along the batch dimension (e.g. anchor -> positive)."""
        return FeatureBundle(self.tensor[idx])

    def clone(self) -> "FeatureBundle":
        return FeatureBundle(self.tensor.clone())

    def detach(self) -> "FeatureBundle":
        return FeatureBundle(self.tensor.detach())

    def __repr__(self) -> str:
        return f"FeatureBundle(shape={tuple(self.tensor.shape)})"


def concat_bundle(bundle: FeatureBundle) -> torch.Tensor:
    return bundle.concat()


def reparameterize(mu: torch.Tensor, logvar: torch.Tensor,
                   eps: torch.Tensor | None = None) -> torch.Tensor:
    """mu + exp(0.5 * logvar) * eps with eps ~ N(0, 1) when not given."""
    if eps is None:
        eps = torch.randn_like(mu)
    return mu + torch.exp(0.5 * logvar) * eps


@dataclass
class GaussianCode:
    """Per-part Gaussian posterior of the identity-unrelated encoder."""

    mu: FeatureBundle
    logvar: FeatureBundle
    sample: FeatureBundle

    def select(self, idx) -> "GaussianCode":
        return GaussianCode(self.mu.select(idx), self.logvar.select(idx),
                            self.sample.select(idx))


def images_to_tensor(arrays, device=None) -> torch.Tensor:
    """Stack (H, W, 3) arrays in [-1, 1] into a float32 [B, 3, H, W] tensor."""
    batch = np.ascontiguousarray(np.stack([np.asarray(a) for a in arrays]))
    return torch.from_numpy(batch).permute(0, 3, 1, 2).contiguous().to(
        device=device, dtype=torch.float32)


# ---------------------------------------------------------------------------
# backbones


class SmallConvNet(nn.Module):
    """Four-block CPU-friendly backbone, total stride 4."""

    stride = 4
    out_channels = 256

    def __init__(self):
        super().__init__()
        def block(cin, cout, stride, kernel=3):
            return [nn.Conv2d(cin, cout, kernel, stride=stride,
                              padding=kernel // 2, bias=False),
                    nn.BatchNorm2d(cout), nn.LeakyReLU(0.1, inplace=True)]
        self.body = nn.Sequential(
            *block(3, 16, 2), *block(16, 32, 2), *block(32, 64, 1),
            *block(64, self.out_channels, 1, kernel=1))

    def forward(self, images: torch.Tensor) -> torch.Tensor:
        return self.body(images)


class ResNet50Conv41(nn.Module):
    """ResNet-50 cropped after the first block of conv4, total stride 16."""

    stride = 16
    out_channels = 1024

    def __init__(self, pretrained: bool = False):
        super().__init__()
        import torchvision
        weights = torchvision.models.ResNet50_Weights.IMAGENET1K_V2 if pretrained else None
        net = torchvision.models.resnet50(weights=weights)
        self.body = nn.Sequential(
            net.conv1, net.bn1, net.relu, net.maxpool,
            net.layer1, net.layer2, net.layer3[0])

    def forward(self, images: torch.Tensor) -> torch.Tensor:
        return self.body(images)


def build_backbone(variant: str, pretrained: bool = False) -> nn.Module:
    if variant == "small_convnet":
        if pretrained:
            raise ConfigError("small_convnet has no pretrained weights")
        return SmallConvNet()
    if variant == "resnet50_conv4_1":
        return ResNet50Conv41(pretrained=pretrained)
    raise ConfigError(f"unknown backbone variant: {variant!r}")


# ---------------------------------------------------------------------------
# encoder heads


class _PartBranch(nn.Module):
    """Two convs + per-region global max pooling for one slice count.

    Emits pooled (pre-bottleneck) vectors ordered [global, local1, ..].
    For a single-slice branch only the global vector is emitted.
    """

    def __init__(self, in_channels: int, mid_channels: int, num_slices: int):
        super().__init__()
        self.num_slices = num_slices
        self.conv = nn.Sequential(
            nn.Conv2d(in_channels, mid_channels, 3, padding=1, bias=False),
            nn.BatchNorm2d(mid_channels), nn.LeakyReLU(0.1, inplace=True),
            nn.Conv2d(mid_channels, mid_channels, 1, bias=False),
            nn.BatchNorm2d(mid_channels), nn.LeakyReLU(0.1, inplace=True))

    def forward(self, fmap: torch.Tensor) -> list[torch.Tensor]:
        height = fmap.shape[2]
        if height % self.num_slices:
            raise ConfigError(
                f"feature map height {height} not divisible into {self.num_slices} slices")
        if self.num_slices == 1:
            pooled = [self.conv(fmap).amax(dim=(2, 3))]
            return pooled
        step = height // self.num_slices
        slices = [fmap[:, :, i * step:(i + 1) * step] for i in range(self.num_slices)]
        out = self.conv(torch.cat(slices, dim=0))
        locals_ = [chunk.amax(dim=(2, 3)) for chunk in out.chunk(self.num_slices, dim=0)]
        branch_global = torch.stack(locals_, dim=0).amax(dim=0)
        return [branch_global] + locals_


def _build_branches(in_channels: int, mid_channels: int) -> nn.ModuleList:
    return nn.ModuleList(
        _PartBranch(in_channels, mid_channels, k) for k in BRANCH_SLICES)


def _run_branches(branches: nn.ModuleList, fmap: torch.Tensor) -> list[torch.Tensor]:
    feats: list[torch.Tensor] = []
    for branch in branches:
        feats.extend(branch(fmap))
    return feats  # slot order by construction


class IdentityEncoder(nn.Module):
    """E_R head: 8 part features of dim p plus one bias-free classifier each."""

    def __init__(self, in_channels: int, mid_channels: int, p: int, num_classes: int):
        super().__init__()
        self.p = p
        self.num_classes = num_classes
        self.branches = _build_branches(in_channels, mid_channels)
        self.bottlenecks = nn.ModuleList(
            nn.Sequential(nn.Linear(mid_channels, p, bias=False), nn.BatchNorm1d(p))
            for _ in range(NUM_PARTS))
        self.classifiers = nn.ModuleList(
            nn.Linear(p, num_classes, bias=False) for _ in range(NUM_PARTS))

    def forward(self, fmap: torch.Tensor) -> tuple[FeatureBundle, list[torch.Tensor]]:
        feats = _run_branches(self.branches, fmap)
        parts = [bn(f) for bn, f in zip(self.bottlenecks, feats)]
        bundle = FeatureBundle(torch.stack(parts, dim=1))
        logits = [clf(part) for clf, part in zip(self.classifiers, parts)]
        return bundle, logits


class UnrelatedEncoder(nn.Module):
    """E_U head: per-part Gaussian (mu, logvar) with reparameterized samples.

    The logvar head is initialized to zero so training starts at sigma = 1,
    i.e. at the KL prior.
    """

    def __init__(self, in_channels: int, mid_channels: int, p: int):
        super().__init__()
        self.p = p
        self.branches = _build_branches(in_channels, mid_channels)
        self.mu_heads = nn.ModuleList(
            nn.Sequential(nn.Linear(mid_channels, p, bias=False), nn.BatchNorm1d(p))
            for _ in range(NUM_PARTS))
        self.logvar_heads = nn.ModuleList(
            nn.Linear(mid_channels, p) for _ in range(NUM_PARTS))
        for head in self.logvar_heads:
            nn.init.zeros_(head.weight)
            nn.init.zeros_(head.bias)

    def forward(self, fmap: torch.Tensor, mode: str = "sample",
                eps: torch.Tensor | None = None) -> GaussianCode:
        if mode not in ("sample", "deterministic"):
            raise ValueError(f"unknown encode mode: {mode!r}")
        feats = _run_branches(self.branches, fmap)
        mu = torch.stack([head(f) for head, f in zip(self.mu_heads, feats)], dim=1)
        logvar = torch.stack([head(f) for head, f in zip(self.logvar_heads, feats)], dim=1)
        if mode == "deterministic":
            sample = mu
        else:
            sample = reparameterize(mu, logvar, eps)
        return GaussianCode(FeatureBundle(mu), FeatureBundle(logvar), FeatureBundle(sample))

"""Region-wise shuffling of local part features between paired bundles.

The operator exchanges a masked subset of the five local features between
two bundles at identical slot positions; global features never move. Masks
are Bernoulli(0.5) per local slot, resampled until at least one slot is
selected (an all-false mask would reduce the part-level objective to the
plain reconstruction already covered by the image-level one).
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import torch

from .encoders import LOCAL_SLOTS, NUM_PARTS, FeatureBundle

NUM_LOCALS = len(LOCAL_SLOTS)


@dataclass(frozen=True)
class ShuffleMask:
    """Swap flags over local slots (part2-local1, part2-local2, part3-local1..3)."""

    swap_local: tuple[bool, ...]

    def __post_init__(self):
        if len(self.swap_local) != NUM_LOCALS:
            raise ValueError(f"mask must cover {NUM_LOCALS} local slots")
        if not any(self.swap_local):
            raise ValueError("mask must select at least one local slot")

    def slot_flags(self) -> tuple[bool, ...]:
        """Expand to all 8 bundle slots (globals always False)."""
        flags = [False] * NUM_PARTS
        for slot, bit in zip(LOCAL_SLOTS, self.swap_local):
            flags[slot] = bool(bit)
        return tuple(flags)


def sample_mask(rng: np.random.Generator) -> ShuffleMask:
    """Draw swap flags Bernoulli(0.5) per slot, rejecting the all-false mask."""
    while True:
        bits = rng.random(NUM_LOCALS) < 0.5
        if bits.any():
            return ShuffleMask(tuple(bool(b) for b in bits))


def sample_mask_batch(batch_size: int, rng: np.random.Generator) -> np.ndarray:
    """Independent masks for a batch of pairs, as a (B, 5) bool array."""
    return np.stack([np.asarray(sample_mask(rng).swap_local) for _ in range(batch_size)])


def _slot_mask(mask, batch_shape, device) -> torch.Tensor:
    """Normalize a mask to a broadcastable bool tensor over bundle slots."""
    if isinstance(mask, ShuffleMask):
        local = torch.tensor(mask.swap_local, dtype=torch.bool, device=device)
    else:
        local = torch.as_tensor(np.asarray(mask), dtype=torch.bool, device=device)
        if local.shape[-1] != NUM_LOCALS:
            raise ValueError(f"mask last dim must be {NUM_LOCALS}, got {tuple(local.shape)}")
        if not bool(local.any(dim=-1).all()):
            raise ValueError("every mask row must select at least one local slot")
    slots = torch.zeros(*local.shape[:-1], NUM_PARTS, dtype=torch.bool, device=device)
    slots[..., list(LOCAL_SLOTS)] = local
    return slots.unsqueeze(-1)  # broadcast over the feature dim


def part_shuffle(a: FeatureBundle, p: FeatureBundle,
                 mask) -> tuple[FeatureBundle, FeatureBundle]:
    """Exchange masked local features between ``a`` and ``p``.

    ``mask`` is a ShuffleMask (shared by the whole batch) or a (..., 5) bool
    array with one row per batch element. Returns (S(a, p), S(p, a)) as new
    bundles; the inputs are left untouched.
    """
    if a.tensor.shape != p.tensor.shape:
        raise ValueError(
            f"bundle structure mismatch: {tuple(a.tensor.shape)} vs {tuple(p.tensor.shape)}")
    slots = _slot_mask(mask, a.tensor.shape[:-2], a.tensor.device)
    out_a = torch.where(slots, p.tensor, a.tensor)
    out_p = torch.where(slots, a.tensor, p.tensor)
    return FeatureBundle(out_a), FeatureBundle(out_p)

"""Training objectives.

Conventions shared by every loss here, chosen so per-iteration values match
single-pair hand calculations regardless of resolution or batch size:

* reconstruction terms use mean-per-pixel L1, then a sum over terms;
* classification/adversarial terms are a mean over the batch per term,
  summed over terms (2 reals + 6 fakes for the adversarial pair losses);
* the KL term sums over all part/code dimensions of one image and averages
  over the batch.

Identity labels are 1-based ({1..C}) at the data layer and converted here.
Discriminator domain outputs are probabilities; they are clamped to
[1e-7, 1 - 1e-7] before any log.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Iterable, Mapping

import torch

from .encoders import GaussianCode
from .errors import ConfigError

PROB_EPS = 1e-7

GEN_SIDE = "encoder_generator"
DISC_SIDE = "discriminator"

# term keys by side, in reporting order; missing terms count as zero
GEN_TERMS = ("id", "kl", "shuffle", "part_shuffle", "domain_g", "class_g")
GEN_LAMBDAS = ("lambda_r", "lambda_u", "lambda_s", "lambda_ps", "lambda_d", "lambda_c")
DISC_TERMS = ("domain_d", "class_d")
DISC_LAMBDAS = ("lambda_d", "lambda_c")


@dataclass
class LossWeights:
    """The six loss coefficients; lambda_u carries per-stage overrides."""

    lambda_r: float = 20.0
    lambda_u: float = 0.0
    lambda_s: float = 10.0
    lambda_ps: float = 10.0
    lambda_d: float = 1.0
    lambda_c: float = 2.0
    lambda_u_stage2: float = 1e-3
    lambda_u_stage3: float = 1e-2

    def __post_init__(self):
        for name in ("lambda_r", "lambda_u", "lambda_s", "lambda_ps",
                     "lambda_d", "lambda_c", "lambda_u_stage2", "lambda_u_stage3"):
            if getattr(self, name) < 0:
                raise ConfigError(f"loss weight {name} must be nonnegative")

    def at_stage(self, stage: int) -> "LossWeights":
        """Copy with lambda_u resolved for the given training stage."""
        if stage not in (1, 2, 3):
            raise ConfigError(f"stage must be 1, 2, or 3, got {stage}")
        lu = {1: 0.0, 2: self.lambda_u_stage2, 3: self.lambda_u_stage3}[stage]
        return LossWeights(self.lambda_r, lu, self.lambda_s, self.lambda_ps,
                           self.lambda_d, self.lambda_c,
                           self.lambda_u_stage2, self.lambda_u_stage3)


@dataclass
class LossReport:
    """Per-iteration scalar terms plus the weighted totals of both sides."""

    stage: int
    epoch: int
    iteration: int
    terms: dict[str, float] = field(default_factory=dict)
    total_g: float = 0.0
    total_d: float = 0.0

    def to_record(self) -> dict:
        rec = {"stage": self.stage, "epoch": self.epoch, "iter": self.iteration}
        rec.update({k: self.terms[k] for k in sorted(self.terms)})
        rec["total_g"] = self.total_g
        rec["total_d"] = self.total_d
        return rec


def _log_softmax(logits: torch.Tensor) -> torch.Tensor:
    """Numerically stable log softmax over the last dim (max subtraction)."""
    shifted = logits - logits.amax(dim=-1, keepdim=True)
    return shifted - shifted.exp().sum(dim=-1, keepdim=True).log()


def _check_labels(labels: torch.Tensor, num_classes: int) -> torch.Tensor:
    labels = labels.long()
    if labels.numel() and (int(labels.min()) < 1 or int(labels.max()) > num_classes):
        raise ValueError(
            f"labels must lie in 1..{num_classes}, got range "
            f"[{int(labels.min())}, {int(labels.max())}]")
    return labels - 1  # to 0-based


def _nll(logits: torch.Tensor, labels0: torch.Tensor) -> torch.Tensor:
    """Mean over the batch of -log softmax(logits)[label]."""
    logp = _log_softmax(logits)
    return -logp.gather(-1, labels0.unsqueeze(-1)).squeeze(-1).mean()


def id_loss(per_part_logits: Iterable[torch.Tensor], labels) -> torch.Tensor:
    """Sum over the K part classifiers of batch-mean cross entropy."""
    parts = list(per_part_logits)
    if not parts:
        raise ValueError("id_loss needs at least one part logit tensor")
    labels = torch.as_tensor(labels, device=parts[0].device)
    labels0 = _check_labels(labels, parts[0].shape[-1])
    total = parts[0].new_zeros(())
    for logits in parts:
        total = total + _nll(logits, labels0)
    return total


def _recon_terms(targets, generations, expected: int, op_name: str) -> torch.Tensor:
    t = torch.stack(list(targets)) if not torch.is_tensor(targets) else targets
    g = torch.stack(list(generations)) if not torch.is_tensor(generations) else generations
    if t.shape[0] != expected or g.shape[0] != expected:
        raise ValueError(f"{op_name} needs exactly {expected} (target, generation) terms, "
                         f"got {t.shape[0]} and {g.shape[0]}")
    if t.shape != g.shape:
        raise ValueError(f"{op_name} shape mismatch: targets {tuple(t.shape)} vs "
                         f"generations {tuple(g.shape)}")
    # per-term, per-image mean over pixels; sum over terms; mean over batch
    per = (t - g).abs().flatten(2).mean(dim=2)  # [terms, B]
    return per.sum(dim=0).mean()


def shuffle_loss(targets, generations) -> torch.Tensor:
    """Image-level shuffling loss: the four (i, j) reconstruction terms.

    ``targets[t]`` holds I_i for the t-th (i, j) cell in the order
    (a,a), (a,p), (p,a), (p,p); ``generations[t]`` the matching generator
    output fed with (identity features of I_j, unrelated features of I_i).
    Both are [4, B, C, H, W] (or length-4 sequences of [B, C, H, W]).
    """
    return _recon_terms(targets, generations, 4, "shuffle_loss")


def part_shuffle_loss(targets, generations) -> torch.Tensor:
    """Part-level shuffling loss: the two i != j region-shuffled terms."""
    return _recon_terms(targets, generations, 2, "part_shuffle_loss")


def kl_per_image(mu: torch.Tensor, logvar: torch.Tensor) -> torch.Tensor:
    """KL(N(mu, e^logvar) || N(0, I)) summed over all non-batch dims."""
    if not (torch.isfinite(mu).all() and torch.isfinite(logvar).all()):
        raise ValueError("kl loss received non-finite mu/logvar")
    if mu.shape != logvar.shape:
        raise ValueError(f"mu/logvar shape mismatch: {tuple(mu.shape)} vs {tuple(logvar.shape)}")
    per = 0.5 * (mu.pow(2) + logvar.exp() - logvar - 1.0)
    return per.flatten(1).sum(dim=1)


def kl_loss(code: GaussianCode) -> torch.Tensor:
    """Batch-mean closed-form KL of the unrelated code to the unit Gaussian."""
    return kl_per_image(code.mu.tensor, code.logvar.tensor).mean()


def _stack_patches(maps, what: str) -> torch.Tensor:
    t = torch.stack(list(maps)) if not torch.is_tensor(maps) else maps
    if t.ndim < 3:
        raise ValueError(f"{what} must be [terms, B, ...patches], got {tuple(t.shape)}")
    return t


def _patch_term(probs: torch.Tensor) -> torch.Tensor:
    """Sum over terms of batch-mean patch-mean -log(prob)."""
    clamped = probs.clamp(PROB_EPS, 1.0 - PROB_EPS)
    per = -clamped.log().flatten(2).mean(dim=2)  # [terms, B]
    return per.sum(dim=0).mean()


def domain_loss_d(real_probs, fake_probs) -> torch.Tensor:
    """Discriminator-side domain objective (minimized form).

    sum over real terms of -log D(real) plus sum over fake terms of
    -log(1 - D(fake)); each term is a patch-and-batch mean. Inputs are
    probability maps [terms, B, ...] (fakes detached by the caller).
    """
    real = _stack_patches(real_probs, "real probability maps")
    fake = _stack_patches(fake_probs, "fake probability maps")
    return _patch_term(real) + _patch_term(1.0 - fake)


def domain_loss_g(fake_probs) -> torch.Tensor:
    """Generator-side non-saturating domain objective: -log D(fake)."""
    fake = _stack_patches(fake_probs, "fake probability maps")
    return _patch_term(fake)


def class_loss(real_logits, fake_logits, labels) -> torch.Tensor:
    """Identity NLL under the class head for reals and all generated images.

    ``real_logits`` is [R, B, C] (R = 2 in training) or None on the
    generator side, where the real terms are constants; ``fake_logits`` is
    [F, B, C] with F = 6 (four image-level + two part-level generations).
    All terms share the pair's identity label.
    """
    fake = torch.stack(list(fake_logits)) if not torch.is_tensor(fake_logits) else fake_logits
    labels = torch.as_tensor(labels, device=fake.device)
    labels0 = _check_labels(labels, fake.shape[-1])
    total = fake.new_zeros(())
    if real_logits is not None:
        real = torch.stack(list(real_logits)) if not torch.is_tensor(real_logits) \
            else real_logits
        for term in real:
            total = total + _nll(term, labels0)
    for term in fake:
        total = total + _nll(term, labels0)
    return total


def total_loss(terms: Mapping[str, torch.Tensor | float], weights: LossWeights,
               side: str):
    """Weighted sum of the active terms for one side of the objective."""
    if side == GEN_SIDE:
        names, lambdas = GEN_TERMS, GEN_LAMBDAS
    elif side == DISC_SIDE:
        names, lambdas = DISC_TERMS, DISC_LAMBDAS
    else:
        raise ValueError(f"side must be '{GEN_SIDE}' or '{DISC_SIDE}', got {side!r}")
    unknown = set(terms) - set(GEN_TERMS) - set(DISC_TERMS)
    if unknown:
        raise ValueError(f"unknown loss term(s): {sorted(unknown)}")
    total = 0.0
    for name, lam in zip(names, lambdas):
        if name in terms:
            total = total + getattr(weights, lam) * terms[name]
    return total

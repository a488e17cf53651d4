"""Three-stage training: plans, optimizers, the iteration loop, checkpoints.

Stage 1 trains the backbone + identity encoder with the part-classifier
loss only (random erasing on). Stage 2 freezes that baseline (parameters
and normalization statistics) and trains the identity-unrelated encoder,
generator, and discriminator. Stage 3 fine-tunes everything end to end at
a lower learning rate with the KL weight raised.

Determinism contract: with ``training.deterministic`` set, runs are
single-threaded, every stage reseeds numpy and torch from (seed, stage),
and checkpoints carry both rng states plus optimizer state, so a resumed
run continues bit-for-bit where the interrupted one left off.
"""

from __future__ import annotations

import json
import logging
import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import torch

from .config import RunConfig
from .dataset import (AugmentationConfig, DatasetIndex, ErasingConfig, augment,
                      load_dataset, sample_pk_batch)
from .encoders import images_to_tensor
from .errors import ConfigError, TrainingFault
from .gan import GeneratorInput, one_hot_labels
from .losses import (DISC_SIDE, GEN_SIDE, LossReport, LossWeights, class_loss,
                     domain_loss_d, domain_loss_g, id_loss, kl_loss,
                     part_shuffle_loss, shuffle_loss, total_loss)
from .model import DisentangleModel, build_model
from .shuffle import part_shuffle, sample_mask_batch

logger = logging.getLogger(__name__)

CHECKPOINT_VERSION = 1
CHECKPOINT_DIR = "checkpoints"
METRICS_NAME = "metrics.jsonl"

# index layout of the six generations per pair: targets[t] is the image the
# t-th generation must reconstruct ("a" = anchor, "p" = its positive)
GENERATION_ORDER = ("aa", "ap", "pa", "pp", "ps_a", "ps_p")


@dataclass
class StagePlan:
    stage: int
    epochs: int
    lr: float
    lr_disc: float
    train_baseline: bool
    train_gan: bool
    erasing: bool

    def __post_init__(self):
        if self.stage not in (1, 2, 3):
            raise ConfigError(f"stage must be 1, 2, or 3, got {self.stage}")
        if self.erasing and self.stage != 1:
            raise ConfigError("random erasing is only permitted in stage 1")

    @classmethod
    def for_stage(cls, stage: int, config: RunConfig) -> "StagePlan":
        t = config.training
        if stage == 1:
            return cls(1, t.epochs[0], t.lr, t.lr_disc, train_baseline=True,
                       train_gan=False, erasing=t.erase_prob > 0)
        if stage == 2:
            return cls(2, t.epochs[1], t.lr, t.lr_disc, train_baseline=False,
                       train_gan=True, erasing=False)
        return cls(3, t.epochs[2], t.lr_stage3, t.lr_stage3, train_baseline=True,
                   train_gan=True, erasing=False)

    def augmentation(self, config: RunConfig) -> AugmentationConfig:
        t = config.training
        return AugmentationConfig(
            horizontal_flip_prob=t.flip_prob,
            random_erasing=ErasingConfig(
                enabled=self.erasing, probability=t.erase_prob,
                area_ratio=tuple(t.erase_area), aspect_ratio=tuple(t.erase_aspect)))


def schedule_lambda_u(stage: int, weights: LossWeights | None = None) -> float:
    """KL weight per stage: 0 in stage 1, then the configured ramp."""
    if weights is None:
        weights = LossWeights()
    return weights.at_stage(stage).lambda_u


def make_optimizers(plan: StagePlan, model: DisentangleModel) -> dict[str, torch.optim.Optimizer]:
    """Adam for encoder/generator parameters, momentum-SGD for discriminators."""
    if plan.stage == 1:
        enc_gen = list(model.baseline_parameters())
    elif plan.stage == 2:
        enc_gen = list(model.gan_generator_parameters())
    else:
        enc_gen = list(model.baseline_parameters()) + list(model.gan_generator_parameters())
    if not enc_gen:
        raise ConfigError(f"stage {plan.stage} has no trainable encoder/generator parameters")
    optimizers = {"enc_gen": torch.optim.Adam(enc_gen, lr=plan.lr, betas=(0.9, 0.999))}
    if plan.train_gan:
        disc = list(model.discriminator_parameters())
        if not disc:
            raise ConfigError("discriminator has no parameters")
        optimizers["disc"] = torch.optim.SGD(disc, lr=plan.lr_disc, momentum=0.9)
    return optimizers


def _apply_stage_modes(model: DisentangleModel, plan: StagePlan) -> None:
    model.train()
    model.requires_grad_(True)
    if not plan.train_baseline:
        # freeze parameters AND normalization statistics so the baseline
        # blocks stay bit-identical across the stage
        for module in model.baseline_modules():
            module.requires_grad_(False)
            module.eval()


def seed_all(seed: int, stage: int = 0) -> np.random.Generator:
    """Seed torch's global generator and return a fresh numpy generator."""
    torch.manual_seed((seed * 1_000_003 + stage) % (2 ** 63))
    return np.random.default_rng([seed, stage])


def set_deterministic_mode() -> None:
    torch.set_num_threads(1)


# ---------------------------------------------------------------------------
# checkpoints


def save_checkpoint(path: str | Path, model: DisentangleModel,
                    optimizers: dict[str, torch.optim.Optimizer], stage: int,
                    epoch: int, config: RunConfig, rng: np.random.Generator) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    torch.save({
        "version": CHECKPOINT_VERSION,
        "stage": stage,
        "epoch": epoch,
        "config": config.to_dict(),
        "config_hash": config.config_hash(),
        "num_classes": model.num_classes,
        "model": model.state_dict(),
        "optimizers": {name: opt.state_dict() for name, opt in optimizers.items()},
        "torch_rng": torch.get_rng_state(),
        "numpy_rng": rng.bit_generator.state,
    }, path)
    return path


def load_checkpoint(path: str | Path) -> dict:
    path = Path(path)
    if not path.is_file():
        raise ConfigError(f"checkpoint not found: {path}")
    ckpt = torch.load(path, map_location="cpu", weights_only=False)
    if ckpt.get("version") != CHECKPOINT_VERSION:
        raise ConfigError(
            f"checkpoint {path} has version {ckpt.get('version')}, "
            f"expected {CHECKPOINT_VERSION}")
    return ckpt


def restore_rng(ckpt: dict) -> np.random.Generator:
    torch.set_rng_state(ckpt["torch_rng"])
    rng = np.random.default_rng()
    rng.bit_generator.state = ckpt["numpy_rng"]
    return rng


def checkpoint_path(run_dir: str | Path, stage: int, epoch: int) -> Path:
    return Path(run_dir) / CHECKPOINT_DIR / f"stage{stage}_epoch{epoch}.ckpt"


def build_model_from_checkpoint(ckpt: dict) -> DisentangleModel:
    config = RunConfig.from_dict(ckpt["config"])
    model = build_model(config, ckpt["num_classes"])
    model.load_state_dict(ckpt["model"])
    return model


# ---------------------------------------------------------------------------
# the iteration


def _batch_tensors(batch, aug_cfg: AugmentationConfig, rng: np.random.Generator,
                   device):
    arrays = [augment(r.pixels, aug_cfg, rng) for r in batch.anchors]
    images = images_to_tensor(arrays, device=device)
    labels = torch.from_numpy(batch.labels).to(device)
    pair = torch.from_numpy(batch.pair_index).to(device)
    return images, labels, pair


def _build_generations(model: DisentangleModel, images, labels, pair, bundle_r,
                       code, rng):
    """The six generator outputs per pair and their reconstruction targets."""
    batch = images.shape[0]
    phi_r, phi_r_pos = bundle_r, bundle_r.select(pair)
    phi_u, phi_u_pos = code.sample, code.sample.select(pair)
    masks = sample_mask_batch(batch, rng)
    s_ap, s_pa = part_shuffle(phi_r, phi_r_pos, masks)

    # (i, j) grid of Eq-style terms: generation t reads identity features of
    # I_j and unrelated features of I_i, reconstructing I_i (GENERATION_ORDER)
    id_feats = [phi_r, phi_r_pos, phi_r, phi_r_pos, s_ap, s_pa]
    unrel_feats = [phi_u, phi_u, phi_u_pos, phi_u_pos, phi_u, phi_u_pos]
    images_pos = images[pair]
    targets = torch.stack([images, images, images_pos, images_pos,
                           images, images_pos])

    onehot = one_hot_labels(labels.cpu().numpy(), model.num_classes,
                            device=images.device)
    ginput = GeneratorInput(
        id_feature=torch.cat([f.concat() for f in id_feats], dim=0),
        unrel_feature=torch.cat([f.concat() for f in unrel_feats], dim=0),
        noise=model.sample_noise(len(id_feats) * batch, device=images.device),
        label_onehot=onehot.repeat(len(id_feats), 1))
    fakes_flat = model.generator.generate(ginput)
    return fakes_flat, targets


def _run_iteration(model: DisentangleModel, plan: StagePlan, weights: LossWeights,
                   optimizers, images, labels, pair, rng) -> tuple[dict, float, float]:
    """One optimization step; returns (term values, total_g, total_d)."""
    if plan.stage == 1:
        _, logits = model.id_features(images)
        terms = {"id": id_loss(logits, labels)}
        total_g = total_loss(terms, weights, GEN_SIDE)
        optimizers["enc_gen"].zero_grad()
        total_g.backward()
        optimizers["enc_gen"].step()
        return ({k: float(v.detach()) for k, v in terms.items()},
                float(total_g.detach()), 0.0)

    batch = images.shape[0]
    bundle_r, logits, code = model.encode(images, mode="sample")
    fakes_flat, targets = _build_generations(model, images, labels, pair,
                                             bundle_r, code, rng)
    n_gen = len(GENERATION_ORDER)

    # discriminator side first (fakes detached)
    d_real = model.discriminator(images)
    d_fake = model.discriminator(fakes_flat.detach())
    real_dom = torch.stack([d_real.domain_patches, d_real.domain_patches[pair]])
    real_cls = torch.stack([d_real.class_logits, d_real.class_logits[pair]])
    fake_dom = d_fake.domain_patches.reshape(n_gen, batch, *d_fake.domain_patches.shape[1:])
    fake_cls = d_fake.class_logits.reshape(n_gen, batch, -1)
    d_terms = {"domain_d": domain_loss_d(real_dom, fake_dom),
               "class_d": class_loss(real_cls, fake_cls, labels)}
    total_d = total_loss(d_terms, weights, DISC_SIDE)
    optimizers["disc"].zero_grad()
    total_d.backward()
    optimizers["disc"].step()

    # encoder/generator side against the updated discriminator
    d_gen = model.discriminator(fakes_flat)
    gen_dom = d_gen.domain_patches.reshape(n_gen, batch, *d_gen.domain_patches.shape[1:])
    gen_cls = d_gen.class_logits.reshape(n_gen, batch, -1)
    g_terms = {
        "kl": kl_loss(code) + kl_loss(code.select(pair)),
        "shuffle": shuffle_loss(targets[:4], fakes_flat.reshape(
            n_gen, batch, *fakes_flat.shape[1:])[:4]),
        "part_shuffle": part_shuffle_loss(targets[4:], fakes_flat.reshape(
            n_gen, batch, *fakes_flat.shape[1:])[4:]),
        "domain_g": domain_loss_g(gen_dom),
        "class_g": class_loss(None, gen_cls, labels),
    }
    if plan.stage == 3:
        g_terms["id"] = id_loss(logits, labels)
    total_g = total_loss(g_terms, weights, GEN_SIDE)
    optimizers["enc_gen"].zero_grad()
    total_g.backward()
    optimizers["enc_gen"].step()

    values = {k: float(v.detach()) for k, v in d_terms.items()}
    values.update({k: float(v.detach()) for k, v in g_terms.items()})
    return values, float(total_g.detach()), float(total_d.detach())


def train_stage(model: DisentangleModel, index: DatasetIndex, plan: StagePlan,
                weights: LossWeights, config: RunConfig, run_dir: str | Path,
                rng: np.random.Generator, metrics_fh=None, start_epoch: int = 0,
                optimizers: dict | None = None, callback=None
                ) -> tuple[Path | None, list[LossReport]]:
    """Run one stage from ``start_epoch`` (0 = fresh) through ``plan.epochs``.

    Emits one LossReport per iteration (written as a JSON line when a
    metrics handle is given) and a checkpoint per ``checkpoint_every``
    epochs plus always at the final epoch. Aborts with TrainingFault and a
    diagnostic dump if any loss term turns non-finite.
    """
    t = config.training
    device = next(model.parameters()).device
    run_dir = Path(run_dir)
    if optimizers is None:
        optimizers = make_optimizers(plan, model)
    _apply_stage_modes(model, plan)
    stage_weights = weights.at_stage(plan.stage)
    aug_cfg = plan.augmentation(config)
    num_train = len(index.split_indices("train"))
    iters = t.iters_per_epoch or max(1, num_train // (t.batch_p * t.batch_k))

    reports: list[LossReport] = []
    last_ckpt: Path | None = None
    for epoch in range(start_epoch + 1, plan.epochs + 1):
        for it in range(1, iters + 1):
            batch = sample_pk_batch(index, t.batch_p, t.batch_k, rng)
            images, labels, pair = _batch_tensors(batch, aug_cfg, rng, device)
            values, total_g, total_d = _run_iteration(
                model, plan, stage_weights, optimizers, images, labels, pair, rng)
            if not all(math.isfinite(v) for v in
                       list(values.values()) + [total_g, total_d]):
                raise TrainingFault(
                    "non-finite loss encountered",
                    diagnostics={"stage": plan.stage, "epoch": epoch, "iter": it,
                                 "terms": values,
                                 "batch_labels": batch.labels[:8].tolist(),
                                 "batch_paths": [r.path for r in batch.anchors[:4]]})
            report = LossReport(stage=plan.stage, epoch=epoch, iteration=it,
                                terms=values, total_g=total_g, total_d=total_d)
            reports.append(report)
            if metrics_fh is not None:
                metrics_fh.write(json.dumps(report.to_record(), sort_keys=True) + "\n")
                metrics_fh.flush()
            if callback is not None:
                callback(report)
        if epoch % t.checkpoint_every == 0 or epoch == plan.epochs:
            last_ckpt = save_checkpoint(
                checkpoint_path(run_dir, plan.stage, epoch), model, optimizers,
                plan.stage, epoch, config, rng)
            logger.info("stage %d epoch %d/%d done, checkpoint %s",
                        plan.stage, epoch, plan.epochs, last_ckpt)
    return last_ckpt, reports


# ---------------------------------------------------------------------------
# orchestration


def run_training(config: RunConfig, index: DatasetIndex | None = None,
                 stages=(1, 2, 3), resume_path: str | Path | None = None
                 ) -> dict[int, Path]:
    """Train the requested stages in order inside ``config.output.run_dir``.

    Starting at stage n > 1 without an in-process predecessor loads the
    stage n-1 final checkpoint from the run directory and fails loudly if
    it is missing. ``resume_path`` continues an interrupted stage from its
    saved epoch, rng, and optimizer state.
    """
    stages = sorted(set(int(s) for s in stages))
    if any(s not in (1, 2, 3) for s in stages):
        raise ConfigError(f"stages must be within 1..3, got {stages}")
    if config.training.deterministic:
        set_deterministic_mode()
    run_dir = Path(config.output.run_dir)
    run_dir.mkdir(parents=True, exist_ok=True)
    config.save(run_dir / "config.json")

    if index is None:
        index = load_dataset(config.dataset.root, config.dataset.layout,
                             (config.dataset.height, config.dataset.width))

    seed = config.training.seed
    seed_all(seed, stage=0)
    model = build_model(config, index.num_identities)
    weights = LossWeights(
        lambda_r=config.loss.lambda_r, lambda_s=config.loss.lambda_s,
        lambda_ps=config.loss.lambda_ps, lambda_d=config.loss.lambda_d,
        lambda_c=config.loss.lambda_c,
        lambda_u_stage2=config.loss.lambda_u_stage2,
        lambda_u_stage3=config.loss.lambda_u_stage3)

    resume = None
    if resume_path is not None:
        resume = load_checkpoint(resume_path)
        if resume["config_hash"] != config.config_hash():
            raise ConfigError(
                f"resume checkpoint {resume_path} was written by a different "
                f"config (hash {resume['config_hash']} != {config.config_hash()})")
        model.load_state_dict(resume["model"])
        if resume["stage"] not in stages:
            raise ConfigError(
                f"resume checkpoint is from stage {resume['stage']}, which is "
                f"not among the requested stages {stages}")
        stages = [s for s in stages if s >= resume["stage"]]

    have_state = resume is not None
    final_paths: dict[int, Path] = {}
    with (run_dir / METRICS_NAME).open("a") as metrics_fh:
        for stage in stages:
            plan = StagePlan.for_stage(stage, config)
            start_epoch = 0
            optimizers = None
            if resume is not None and resume["stage"] == stage:
                start_epoch = resume["epoch"]
                optimizers = make_optimizers(plan, model)
                _apply_stage_modes(model, plan)
                for name, opt in optimizers.items():
                    opt.load_state_dict(resume["optimizers"][name])
                rng = restore_rng(resume)
                resume = None
            else:
                if stage > 1 and not have_state:
                    prev_plan = StagePlan.for_stage(stage - 1, config)
                    expected = checkpoint_path(run_dir, stage - 1, prev_plan.epochs)
                    if not expected.is_file():
                        raise ConfigError(
                            f"stage {stage} requires the stage {stage - 1} "
                            f"checkpoint at {expected}; train it first")
                    model.load_state_dict(load_checkpoint(expected)["model"])
                rng = seed_all(seed, stage)
            ckpt, _ = train_stage(model, index, plan, weights, config, run_dir,
                                  rng, metrics_fh=metrics_fh,
                                  start_epoch=start_epoch, optimizers=optimizers)
            if ckpt is not None:
                final_paths[stage] = ckpt
            have_state = True
    return final_paths

"""Operator-facing command line: synth / train / eval / generate / retrieve.

Every command takes a single JSON config (flags win over file values) and
is deterministic under a fixed seed. Exit codes: 0 success, 2 config
error, 3 data error, 4 runtime/training fault.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

import numpy as np
import torch

from .config import RunConfig, apply_overrides
from .dataset import load_dataset
from .encoders import images_to_tensor
from .errors import ConfigError, DataError, TrainingFault
from .evaluation import (build_retrieval_set, distance_matrix, evaluate_retrieval,
                         extract_features)
from .figures import save_grid, tensor_to_uint8
from .gan import GeneratorInput, interpolate_generate, one_hot_labels
from .model import build_model
from .shuffle import ShuffleMask, part_shuffle
from .synth import SyntheticIdentitySpec, synth_generate
from .training import (build_model_from_checkpoint, load_checkpoint, run_training,
                       set_deterministic_mode)

logger = logging.getLogger(__name__)

GENERATE_MODES = ("reconstruct", "swap_identity", "part_shuffle_grid",
                  "interpolate_id", "interpolate_unrel")
# top-region vs bottom-region swap masks over the five local slots
UPPER_MASK = ShuffleMask((True, False, True, False, False))
LOWER_MASK = ShuffleMask((False, True, False, False, True))

MATCH_COLOR = (64, 200, 64)
MISS_COLOR = (220, 48, 48)
QUERY_COLOR = (80, 120, 255)


def _add_config_args(sp: argparse.ArgumentParser) -> None:
    sp.add_argument("--config", required=True, help="path to the run config JSON")
    sp.add_argument("--set", action="append", default=[], metavar="BLOCK.FIELD=VALUE",
                    help="override one config field (repeatable)")
    sp.add_argument("--seed", type=int, help="override training.seed")
    sp.add_argument("--run-dir", help="override output.run_dir")
    sp.add_argument("--data-root", help="override dataset.root")


def _load_config(args) -> RunConfig:
    cfg = RunConfig.load(args.config)
    overrides = {}
    for item in args.set:
        key, sep, value = item.partition("=")
        if not sep:
            raise ConfigError(f"--set expects BLOCK.FIELD=VALUE, got {item!r}")
        overrides[key] = value
    if args.seed is not None:
        overrides["training.seed"] = args.seed
    if args.run_dir:
        overrides["output.run_dir"] = args.run_dir
    if args.data_root:
        overrides["dataset.root"] = args.data_root
    return apply_overrides(cfg, overrides)


def _load_eval_setup(args, cfg: RunConfig):
    """Model from the checkpoint; data from the current config's root."""
    ckpt = load_checkpoint(args.ckpt)
    model = build_model_from_checkpoint(ckpt)
    model.eval()
    ckpt_cfg = RunConfig.from_dict(ckpt["config"])
    index = load_dataset(cfg.dataset.root, cfg.dataset.layout,
                         (ckpt_cfg.dataset.height, ckpt_cfg.dataset.width))
    return ckpt, model, index


def _figure_footer(cfg_hash: str, ckpt: dict) -> str:
    return f"config {cfg_hash}  stage {ckpt['stage']} epoch {ckpt['epoch']}"


def _figure_path(args, cfg: RunConfig, default_name: str) -> Path:
    if getattr(args, "out", None):
        return Path(args.out)
    return Path(cfg.output.run_dir) / "figures" / default_name


# ---------------------------------------------------------------------------
# commands


def cmd_synth(args) -> int:
    spec = SyntheticIdentitySpec.sample(args.ids, args.seed)
    manifest = synth_generate(
        spec, args.per_id, args.seed, args.out,
        resolution=(args.height, args.width), num_cameras=args.cameras,
        force=args.force)
    print(f"wrote {args.ids * args.per_id} images, manifest at {manifest}")
    return 0


def cmd_train(args) -> int:
    cfg = _load_config(args)
    stages = (1, 2, 3) if args.stage == "all" else (int(args.stage),)
    paths = run_training(cfg, stages=stages, resume_path=args.resume)
    for stage in sorted(paths):
        print(f"stage {stage} final checkpoint: {paths[stage]}")
    print(f"metrics: {Path(cfg.output.run_dir) / 'metrics.jsonl'}")
    return 0


def cmd_eval(args) -> int:
    cfg = _load_config(args)
    set_deterministic_mode()
    ckpt, model, index = _load_eval_setup(args, cfg)
    query = index.split_records("query")
    gallery = index.split_records("gallery")
    if not query or not gallery:
        raise DataError("evaluation requires non-empty query and gallery splits")
    result = evaluate_retrieval(build_retrieval_set(model, query, gallery))
    payload = result.to_json_dict()
    payload["checkpoint"] = str(args.ckpt)
    payload["config_hash"] = ckpt["config_hash"]
    out_path = Path(cfg.output.run_dir) / "eval.json"
    out_path.parent.mkdir(parents=True, exist_ok=True)
    out_path.write_text(json.dumps(payload, indent=2, sort_keys=True) + "\n")
    print(f"rank1 {payload['rank1']:.4f}  rank5 {payload['rank5']:.4f}  "
          f"rank10 {payload['rank10']:.4f}  mAP {payload['mAP']:.4f}  "
          f"({payload['num_queries']} queries)")
    print(f"eval results: {out_path}")
    return 0


def _pick_records(index, split: str, indices: list[int]):
    records = index.split_records(split)
    for i in indices:
        if i < 0 or i >= len(records):
            raise DataError(
                f"unknown image id {i} (split '{split}' has {len(records)} records)")
    return [records[i] for i in indices]


def cmd_generate(args) -> int:
    cfg = _load_config(args)
    set_deterministic_mode()
    ckpt, model, index = _load_eval_setup(args, cfg)
    if args.mode in ("swap_identity", "part_shuffle_grid", "interpolate_id",
                     "interpolate_unrel") and len(args.images) != 2:
        raise ConfigError(f"mode {args.mode} needs exactly 2 image ids")
    records = _pick_records(index, args.split, args.images)

    noise_seed = args.noise_seed if args.noise_seed is not None else cfg.training.seed
    torch.manual_seed(noise_seed)
    images = images_to_tensor([r.pixels for r in records])
    labels = [r.identity if 1 <= r.identity <= model.num_classes else 0
              for r in records]
    with torch.no_grad():
        bundle_r, _, code = model.encode(images, mode="deterministic")
        noise = model.sample_noise(len(records))
        onehot = one_hot_labels(labels, model.num_classes)

        def gen(id_bundle, unrel_bundle, rows):
            out = model.generator.generate(GeneratorInput(
                id_feature=id_bundle.concat()[rows], unrel_feature=unrel_bundle.concat()[rows],
                noise=noise[rows], label_onehot=onehot[rows]))
            return [tensor_to_uint8(img) for img in out]

        inputs = [tensor_to_uint8(img) for img in images]
        all_rows = list(range(len(records)))
        if args.mode == "reconstruct":
            recons = gen(bundle_r, code.sample, all_rows)
            grid = [[inputs[i], recons[i]] for i in all_rows]
        elif args.mode == "swap_identity":
            recons = gen(bundle_r, code.sample, all_rows)
            swapped = gen(bundle_r.select([1, 0]), code.sample, all_rows)
            grid = [[inputs[i], recons[i], swapped[i]] for i in all_rows]
        elif args.mode == "part_shuffle_grid":
            grid = []
            for mask in (UPPER_MASK, LOWER_MASK):
                s_ap, s_pa = part_shuffle(bundle_r.select([0]), bundle_r.select([1]), mask)
                row_a = gen(s_ap, code.sample.select([0]), [0])
                row_p = gen(s_pa, code.sample.select([1]), [0])
                grid.append([row_a[0], row_p[0]])
        else:  # interpolation modes
            axis = "identity" if args.mode == "interpolate_id" else "unrelated"
            b1 = GeneratorInput(bundle_r.concat()[0:1], code.sample.concat()[0:1],
                                noise[0:1], onehot[0:1])
            b2 = GeneratorInput(bundle_r.concat()[1:2], code.sample.concat()[1:2],
                                noise[0:1], onehot[0:1])
            steps = interpolate_generate(model.generator, b1, b2, axis, args.steps)
            grid = [[tensor_to_uint8(img[0]) for img in steps]]

    out_path = _figure_path(args, cfg, f"{args.mode}.png")
    save_grid(out_path, grid, footer=_figure_footer(ckpt["config_hash"], ckpt))
    print(f"figure: {out_path}")
    return 0


def cmd_retrieve(args) -> int:
    cfg = _load_config(args)
    set_deterministic_mode()
    ckpt, model, index = _load_eval_setup(args, cfg)
    query = index.split_records("query")
    gallery = index.split_records("gallery")
    if not query or not gallery:
        raise DataError("retrieval requires non-empty query and gallery splits")
    if args.query_index < 0 or args.query_index >= len(query):
        raise DataError(f"query id {args.query_index} not in the query split "
                        f"({len(query)} queries)")
    q = query[args.query_index]
    q_feat = extract_features(model, [q])
    g_feat = extract_features(model, gallery)
    dist = distance_matrix(q_feat, g_feat)[0]
    order = np.argsort(dist, kind="stable")
    valid = [int(j) for j in order
             if gallery[j].identity != -1
             and not (gallery[j].identity == q.identity and gallery[j].camera == q.camera)]
    top = valid[:args.top_k]

    results = [{"rank": r + 1, "gallery_index": j,
                "identity": gallery[j].identity, "camera": gallery[j].camera,
                "distance": float(dist[j]),
                "match": gallery[j].identity == q.identity}
               for r, j in enumerate(top)]
    payload = {"query": {"index": args.query_index, "identity": q.identity,
                         "camera": q.camera},
               "results": results, "config_hash": ckpt["config_hash"]}

    out_png = _figure_path(args, cfg, f"retrieval_q{args.query_index}.png")
    out_json = out_png.with_suffix(".json")
    row = [tensor_to_uint8(q.pixels)] + [tensor_to_uint8(gallery[j].pixels) for j in top]
    borders = [[QUERY_COLOR] + [MATCH_COLOR if r["match"] else MISS_COLOR
                                for r in results]]
    save_grid(out_png, [row], footer=_figure_footer(ckpt["config_hash"], ckpt),
              borders=borders)
    out_json.parent.mkdir(parents=True, exist_ok=True)
    out_json.write_text(json.dumps(payload, indent=2, sort_keys=True) + "\n")
    print(f"retrieval figure: {out_png}")
    print(f"retrieval ranking: {out_json}")
    return 0


# ---------------------------------------------------------------------------
# parser


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(
        prog="idshuffle",
        description="identity-disentangled person re-identification pipeline")
    sub = p.add_subparsers(dest="command", required=True)

    sp = sub.add_parser("synth", help="render a synthetic dataset")
    sp.add_argument("--out", required=True, help="output dataset directory")
    sp.add_argument("--ids", type=int, default=10)
    sp.add_argument("--per-id", type=int, default=20)
    sp.add_argument("--seed", type=int, default=0)
    sp.add_argument("--height", type=int, default=96)
    sp.add_argument("--width", type=int, default=32)
    sp.add_argument("--cameras", type=int, default=6)
    sp.add_argument("--force", action="store_true",
                    help="overwrite a non-empty output directory")
    sp.set_defaults(func=cmd_synth)

    sp = sub.add_parser("train", help="run the staged training schedule")
    _add_config_args(sp)
    sp.add_argument("--stage", choices=("1", "2", "3", "all"), default="all")
    sp.add_argument("--resume", help="checkpoint to continue an interrupted stage")
    sp.set_defaults(func=cmd_train)

    sp = sub.add_parser("eval", help="retrieval evaluation of a checkpoint")
    _add_config_args(sp)
    sp.add_argument("--ckpt", required=True)
    sp.set_defaults(func=cmd_eval)

    sp = sub.add_parser("generate", help="render generation figure grids")
    _add_config_args(sp)
    sp.add_argument("--ckpt", required=True)
    sp.add_argument("--mode", choices=GENERATE_MODES, required=True)
    sp.add_argument("--images", type=int, nargs="+", required=True,
                    help="record indices within --split")
    sp.add_argument("--split", choices=("train", "query", "gallery"), default="query")
    sp.add_argument("--steps", type=int, default=8)
    sp.add_argument("--noise-seed", type=int)
    sp.add_argument("--out")
    sp.set_defaults(func=cmd_generate)

    sp = sub.add_parser("retrieve", help="top-k retrieval gallery for one query")
    _add_config_args(sp)
    sp.add_argument("--ckpt", required=True)
    sp.add_argument("--query-index", type=int, required=True)
    sp.add_argument("--top-k", type=int, default=10)
    sp.add_argument("--out")
    sp.set_defaults(func=cmd_retrieve)
    return p


def run(argv=None) -> int:
    logging.basicConfig(level=logging.INFO,
                        format="%(levelname)s %(name)s: %(message)s")
    args = build_parser().parse_args(argv)
    try:
        return int(args.func(args) or 0)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 2
    except DataError as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return 3
    except TrainingFault as exc:
        print(f"training fault: {exc}", file=sys.stderr)
        return 4


def main() -> None:
    sys.exit(run())


if __name__ == "__main__":
    main()

"""Dataset ingestion, augmentation, and identity-paired batch sampling.

Two layouts are supported: real Market-1501-style directories
(``bounding_box_train/``, ``query/``, ``bounding_box_test/``) and the
synthetic manifest written by :mod:`idshuffle.synth`. Pixels are loaded
eagerly as float32 arrays in [-1, 1]; train identities are re-indexed to a
dense {1..C}.

This module is torch-free on purpose: records, sampling, and augmentation
are all plain numpy driven by an explicit ``numpy.random.Generator``.
"""

from __future__ import annotations

import json
import logging
import re
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from PIL import Image

from .errors import DataError
from .synth import MANIFEST_NAME

logger = logging.getLogger(__name__)

JUNK_ID = -1        # excluded from ranking entirely
DISTRACTOR_ID = 0   # kept in the gallery as a guaranteed non-match

SPLITS = ("train", "query", "gallery")
MARKET_DIRS = {"train": "bounding_box_train", "query": "query", "gallery": "bounding_box_test"}

_MARKET_RE = re.compile(r"^(-1|\d{4})_c(\d+)s\d+_\d+_\d+\.(jpg|jpeg|png)$", re.IGNORECASE)


@dataclass
class ImageRecord:
    """One person image with its labels; pixels are (H, W, 3) in [-1, 1]."""

    pixels: np.ndarray
    identity: int
    camera: int
    split: str
    path: str = ""
    attributes: dict | None = None
    nuisance: dict | None = None


@dataclass
class DatasetIndex:
    records: list[ImageRecord]
    by_identity: dict[int, list[int]]  # train identity -> record indices
    num_identities: int
    resolution: tuple[int, int]

    def split_indices(self, split: str) -> list[int]:
        return [i for i, r in enumerate(self.records) if r.split == split]

    def split_records(self, split: str) -> list[ImageRecord]:
        return [r for r in self.records if r.split == split]


@dataclass
class PairBatch:
    """P*K_img anchor/positive pairs; positives are re-used anchor records.

    ``pair_index[i]`` is the position within ``anchors`` holding
    ``positives[i]``, so models can encode each image once and gather.
    """

    anchors: list[ImageRecord]
    positives: list[ImageRecord]
    labels: np.ndarray
    pair_index: np.ndarray

    def __len__(self) -> int:
        return len(self.anchors)


@dataclass
class ErasingConfig:
    enabled: bool = False
    probability: float = 0.5
    area_ratio: tuple[float, float] = (0.02, 0.4)
    aspect_ratio: tuple[float, float] = (0.3, 3.33)


@dataclass
class AugmentationConfig:
    horizontal_flip_prob: float = 0.5
    random_erasing: ErasingConfig = field(default_factory=ErasingConfig)


def parse_market_filename(name: str) -> tuple[int, int]:
    """Parse ``IIII_cCsS_FFFFFF_NN.jpg`` into (identity, camera).

    Identity ``-1`` marks junk boxes and ``0000`` distractors; both are kept
    out of training by the loader.
    """
    m = _MARKET_RE.match(name)
    if m is None:
        raise DataError(f"cannot parse Market-1501 filename: {name!r}")
    return int(m.group(1)), int(m.group(2))


def _load_pixels(path: Path, resolution: tuple[int, int]) -> np.ndarray:
    height, width = resolution
    try:
        with Image.open(path) as img:
            img = img.convert("RGB").resize((width, height), Image.BILINEAR)
    except (OSError, SyntaxError) as exc:
        raise DataError(f"unreadable image file {path}: {exc}") from exc
    return np.asarray(img, dtype=np.float32) / 127.5 - 1.0


def _reindex_train(records: list[ImageRecord]) -> dict[int, int]:
    """Drop singleton train identities, return old-id -> dense 1..C map."""
    counts: dict[int, int] = {}
    for r in records:
        if r.split == "train":
            counts[r.identity] = counts.get(r.identity, 0) + 1
    singletons = {i for i, c in counts.items() if c < 2}
    for i in sorted(singletons):
        logger.warning("dropping train identity %d: only one image (cannot pair)", i)
    kept = sorted(i for i in counts if i not in singletons)
    return {old: new for new, old in enumerate(kept, start=1)}


def _load_market(root: Path, resolution) -> list[ImageRecord]:
    records = []
    for split, dirname in MARKET_DIRS.items():
        directory = root / dirname
        if not directory.is_dir():
            raise DataError(f"missing Market-1501 split directory: {directory}")
        names = sorted(p.name for p in directory.iterdir()
                       if p.suffix.lower() in (".jpg", ".jpeg", ".png"))
        if not names:
            raise DataError(f"split directory {directory} contains no images")
        for name in names:
            identity, camera = parse_market_filename(name)
            if split == "train" and identity in (JUNK_ID, DISTRACTOR_ID):
                continue
            records.append(ImageRecord(
                pixels=_load_pixels(directory / name, resolution),
                identity=identity, camera=camera, split=split,
                path=str(directory / name)))
    return records


def _load_synthetic(root: Path, resolution) -> list[ImageRecord]:
    manifest = root / MANIFEST_NAME
    if not manifest.is_file():
        raise DataError(f"missing synthetic manifest: {manifest}")
    records = []
    for line_no, line in enumerate(manifest.read_text().splitlines(), start=1):
        if not line.strip():
            continue
        try:
            row = json.loads(line)
        except json.JSONDecodeError as exc:
            raise DataError(f"{manifest}:{line_no}: invalid JSON: {exc}") from exc
        missing = {"file", "identity", "camera", "split"} - set(row)
        if missing:
            raise DataError(f"{manifest}:{line_no}: missing keys {sorted(missing)}")
        if row["split"] not in SPLITS:
            raise DataError(f"{manifest}:{line_no}: unknown split {row['split']!r}")
        records.append(ImageRecord(
            pixels=_load_pixels(root / row["file"], resolution),
            identity=int(row["identity"]), camera=int(row["camera"]),
            split=row["split"], path=str(root / row["file"]),
            attributes=row.get("attributes"), nuisance=row.get("nuisance")))
    return records


def load_dataset(root: str | Path, layout: str,
                 resolution: tuple[int, int] = (96, 32)) -> DatasetIndex:
    """Load a dataset directory into memory and densely re-index train ids."""
    root = Path(root)
    if not root.is_dir():
        raise DataError(f"dataset root not found: {root}")
    if layout == "market_dirs":
        records = _load_market(root, resolution)
    elif layout == "synthetic_manifest":
        records = _load_synthetic(root, resolution)
    else:
        raise DataError(f"unknown dataset layout: {layout!r}")

    id_map = _reindex_train(records)
    kept: list[ImageRecord] = []
    for r in records:
        if r.split == "train":
            if r.identity not in id_map:
                continue  # dropped singleton
            r.identity = id_map[r.identity]
        elif layout == "synthetic_manifest":
            # synthetic query/gallery share the train identity space
            if r.identity not in id_map:
                logger.warning("dropping %s record of untrainable identity %d",
                               r.split, r.identity)
                continue
            r.identity = id_map[r.identity]
        kept.append(r)

    by_identity: dict[int, list[int]] = {}
    for i, r in enumerate(kept):
        if r.split == "train":
            by_identity.setdefault(r.identity, []).append(i)

    counts = {s: sum(1 for r in kept if r.split == s) for s in SPLITS}
    if counts["train"] == 0:
        raise DataError("train split is empty after filtering")
    logger.info("loaded %s: %d identities, splits %s", root, len(id_map), counts)
    return DatasetIndex(records=kept, by_identity=by_identity,
                        num_identities=len(id_map), resolution=tuple(resolution))


def sample_pk_batch(index: DatasetIndex, P: int = 4, K_img: int = 4,
                    rng: np.random.Generator | None = None) -> PairBatch:
    """Sample P identities x K_img images and pair each image with a
    same-identity partner backed by a different record."""
    if rng is None:
        rng = np.random.default_rng()
    identities = sorted(index.by_identity)
    if P > len(identities):
        raise DataError(f"batch needs P={P} identities but only {len(identities)} available")

    anchors: list[ImageRecord] = []
    pair_index = np.empty(P * K_img, dtype=np.int64)
    chosen = rng.choice(len(identities), size=P, replace=False)
    for g, id_pos in enumerate(chosen):
        rec_ids = index.by_identity[identities[id_pos]]
        if len(rec_ids) >= K_img:
            picks = rng.choice(len(rec_ids), size=K_img, replace=False)
        else:
            # keep every distinct record at least once, top up with repeats
            picks = np.concatenate([
                rng.permutation(len(rec_ids)),
                rng.choice(len(rec_ids), size=K_img - len(rec_ids), replace=True)])
        group = [rec_ids[p] for p in picks]
        base = g * K_img
        for i, rec in enumerate(group):
            candidates = [j for j, other in enumerate(group) if other != rec]
            pair_index[base + i] = base + candidates[rng.integers(len(candidates))]
        anchors.extend(index.records[r] for r in group)

    labels = np.array([r.identity for r in anchors], dtype=np.int64)
    positives = [anchors[j] for j in pair_index]
    return PairBatch(anchors=anchors, positives=positives,
                     labels=labels, pair_index=pair_index)


def augment(image: np.ndarray, config: AugmentationConfig,
            rng: np.random.Generator) -> np.ndarray:
    """Random horizontal flip plus (optionally) random erasing.

    Returns a new array; values stay in [-1, 1] and the shape is unchanged.
    Degenerate erase rectangles are retried up to 100 times, then skipped.
    """
    out = np.array(image)
    height, width = out.shape[:2]
    if rng.random() < config.horizontal_flip_prob:
        out = out[:, ::-1].copy()
    er = config.random_erasing
    if er.enabled and rng.random() < er.probability:
        for _ in range(100):
            area = height * width * rng.uniform(*er.area_ratio)
            aspect = rng.uniform(*er.aspect_ratio)
            eh = int(round(np.sqrt(area * aspect)))
            ew = int(round(np.sqrt(area / aspect)))
            if 0 < eh < height and 0 < ew < width:
                y = rng.integers(0, height - eh + 1)
                x = rng.integers(0, width - ew + 1)
                out[y:y + eh, x:x + ew] = rng.uniform(
                    -1.0, 1.0, size=(eh, ew, out.shape[2])).astype(out.dtype)
                break
    return out

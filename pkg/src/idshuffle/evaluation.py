"""Retrieval evaluation: feature extraction, distances, CMC and mAP.

Protocol: single query, Euclidean distance between identity-feature
concatenations, ties broken by gallery index. Per query, gallery entries
sharing BOTH identity and camera with the query are excluded, junk entries
(identity -1) are removed from the ranking, and distractors (identity 0)
stay as guaranteed non-matches. Queries left without any valid match are
skipped with a warning.

``evaluate_oracle`` recomputes everything with explicit per-item loops and
an insertion-style ranking; the production path must match it exactly.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np
import torch

from .dataset import DISTRACTOR_ID, JUNK_ID, ImageRecord
from .encoders import images_to_tensor
from .errors import DataError, TrainingFault

logger = logging.getLogger(__name__)


@dataclass
class RetrievalSet:
    query_features: np.ndarray
    gallery_features: np.ndarray
    query_ids: np.ndarray
    gallery_ids: np.ndarray
    query_cams: np.ndarray
    gallery_cams: np.ndarray

    def __post_init__(self):
        qf, gf = np.asarray(self.query_features), np.asarray(self.gallery_features)
        if qf.ndim != 2 or gf.ndim != 2 or qf.shape[1] != gf.shape[1]:
            raise ValueError(f"feature matrices must be 2-D with equal dims, "
                             f"got {qf.shape} and {gf.shape}")
        if not (np.isfinite(qf).all() and np.isfinite(gf).all()):
            raise ValueError("retrieval features must be finite")
        if len(self.query_ids) != qf.shape[0] or len(self.gallery_ids) != gf.shape[0]:
            raise ValueError("id arrays must match feature row counts")


@dataclass
class EvalResult:
    cmc: np.ndarray          # cmc[k-1] = fraction of queries matched in top-k
    map: float
    aps: list[float] = field(default_factory=list)
    num_queries: int = 0     # queries actually evaluated
    num_skipped: int = 0

    def rank(self, k: int) -> float:
        if len(self.cmc) == 0:
            return 0.0
        return float(self.cmc[min(k, len(self.cmc)) - 1])

    def to_json_dict(self) -> dict:
        return {"rank1": self.rank(1), "rank5": self.rank(5),
                "rank10": self.rank(10), "mAP": float(self.map),
                "num_queries": int(self.num_queries)}


def extract_features(model, records: list[ImageRecord],
                     batch_size: int = 64, l2_normalize: bool = False,
                     device=None) -> np.ndarray:
    """Concatenated identity features per record, rows in record order.

    Runs in eval mode with no augmentation; restores the model's previous
    training flag afterwards.
    """
    was_training = model.training
    model.eval()
    feats = []
    try:
        with torch.no_grad():
            for start in range(0, len(records), batch_size):
                chunk = records[start:start + batch_size]
                images = images_to_tensor([r.pixels for r in chunk], device=device)
                bundle, _ = model.id_features(images)
                feats.append(bundle.concat().cpu().numpy())
    finally:
        model.train(was_training)
    out = np.concatenate(feats, axis=0) if feats else np.zeros((0, 0), dtype=np.float32)
    bad = np.nonzero(~np.isfinite(out).all(axis=1))[0]
    if bad.size:
        record = records[int(bad[0])]
        raise TrainingFault(f"non-finite features for record {record.path or int(bad[0])}")
    if l2_normalize and out.size:
        norms = np.linalg.norm(out, axis=1, keepdims=True)
        out = out / np.maximum(norms, 1e-12)
    return out


def distance_matrix(Q: np.ndarray, G: np.ndarray, chunk: int = 256) -> np.ndarray:
    """Pairwise Euclidean distances, float64, computed by direct differences."""
    Q = np.asarray(Q, dtype=np.float64)
    G = np.asarray(G, dtype=np.float64)
    if Q.ndim != 2 or G.ndim != 2 or Q.shape[1] != G.shape[1]:
        raise ValueError(f"feature dims differ: {Q.shape} vs {G.shape}")
    out = np.empty((Q.shape[0], G.shape[0]), dtype=np.float64)
    for start in range(0, Q.shape[0], chunk):
        diff = Q[start:start + chunk, None, :] - G[None, :, :]
        out[start:start + chunk] = np.sqrt(np.einsum("qgd,qgd->qg", diff, diff))
    return out


def _as_int_array(x, n: int, name: str) -> np.ndarray:
    arr = np.asarray(x, dtype=np.int64)
    if arr.shape != (n,):
        raise ValueError(f"{name} must have shape ({n},), got {arr.shape}")
    return arr


def evaluate(dist: np.ndarray, q_ids, g_ids, q_cams, g_cams,
             ranks: tuple[int, ...] = (1, 5, 10)) -> EvalResult:
    """CMC curve and mAP from a distance matrix under the exclusion protocol."""
    dist = np.asarray(dist, dtype=np.float64)
    if dist.ndim != 2:
        raise ValueError("dist must be a 2-D matrix")
    n_q, n_g = dist.shape
    q_ids = _as_int_array(q_ids, n_q, "q_ids")
    g_ids = _as_int_array(g_ids, n_g, "g_ids")
    q_cams = _as_int_array(q_cams, n_q, "q_cams")
    g_cams = _as_int_array(g_cams, n_g, "g_cams")

    firsts = []
    aps: list[float] = []
    skipped = 0
    for i in range(n_q):
        order = np.argsort(dist[i], kind="stable")
        keep = (g_ids != JUNK_ID) & ~((g_ids == q_ids[i]) & (g_cams == q_cams[i]))
        ranked = order[keep[order]]
        matches = g_ids[ranked] == q_ids[i]
        if not matches.any():
            skipped += 1
            logger.warning("query %d has no valid gallery match after exclusion; skipped", i)
            continue
        firsts.append(int(np.argmax(matches)))
        cum = np.cumsum(matches)
        hit_pos = np.nonzero(matches)[0]
        precisions = cum[hit_pos] / (hit_pos + 1)
        aps.append(float(np.sum(precisions) / len(hit_pos)))

    if not firsts:
        raise DataError("no query has a valid gallery match after exclusion")
    n_eval = len(firsts)
    counts = np.bincount(np.asarray(firsts), minlength=n_g)
    cmc = np.cumsum(counts[:n_g]) / n_eval
    return EvalResult(cmc=cmc, map=float(np.mean(np.asarray(aps))), aps=aps,
                      num_queries=n_eval, num_skipped=skipped)


def evaluate_oracle(dist: np.ndarray, q_ids, g_ids, q_cams, g_cams) -> EvalResult:
    """Exhaustive re-implementation used to cross-check :func:`evaluate`.

    Ranking is built by explicit insertion on (distance, gallery index);
    exclusion, hit counting, and precision accumulation are per-item loops.
    """
    dist = np.asarray(dist, dtype=np.float64)
    n_q, n_g = dist.shape
    q_ids = _as_int_array(q_ids, n_q, "q_ids")
    g_ids = _as_int_array(g_ids, n_g, "g_ids")
    q_cams = _as_int_array(q_cams, n_q, "q_cams")
    g_cams = _as_int_array(g_cams, n_g, "g_cams")

    per_query_first = []
    aps = []
    skipped = 0
    for i in range(n_q):
        entries: list[tuple[float, int]] = []
        for j in range(n_g):
            if g_ids[j] == JUNK_ID:
                continue
            if g_ids[j] == q_ids[i] and g_cams[j] == q_cams[i]:
                continue
            # insertion keyed by (distance, index)
            pos = 0
            while pos < len(entries) and entries[pos] < (dist[i, j], j):
                pos += 1
            entries.insert(pos, (float(dist[i, j]), j))
        matches = [int(g_ids[j] == q_ids[i]) for _, j in entries]
        if sum(matches) == 0:
            skipped += 1
            continue
        first = None
        hits = 0
        precisions = []
        for rank_pos, m in enumerate(matches, start=1):
            if m:
                hits += 1
                if first is None:
                    first = rank_pos - 1
                precisions.append(hits / rank_pos)
        per_query_first.append(first)
        aps.append(float(np.sum(np.asarray(precisions, dtype=np.float64)) / hits))

    if not per_query_first:
        raise DataError("no query has a valid gallery match after exclusion")
    n_eval = len(per_query_first)
    cmc = np.empty(n_g, dtype=np.float64)
    for k in range(n_g):
        cmc[k] = sum(1 for f in per_query_first if f <= k) / n_eval
    return EvalResult(cmc=cmc, map=float(np.mean(np.asarray(aps, dtype=np.float64))),
                      aps=aps, num_queries=n_eval, num_skipped=skipped)


def build_retrieval_set(model, query_records, gallery_records,
                        l2_normalize: bool = False) -> RetrievalSet:
    if not query_records or not gallery_records:
        raise DataError("evaluation needs non-empty query and gallery splits")
    return RetrievalSet(
        query_features=extract_features(model, query_records, l2_normalize=l2_normalize),
        gallery_features=extract_features(model, gallery_records, l2_normalize=l2_normalize),
        query_ids=np.array([r.identity for r in query_records]),
        gallery_ids=np.array([r.identity for r in gallery_records]),
        query_cams=np.array([r.camera for r in query_records]),
        gallery_cams=np.array([r.camera for r in gallery_records]))


def evaluate_retrieval(rset: RetrievalSet) -> EvalResult:
    dist = distance_matrix(rset.query_features, rset.gallery_features)
    return evaluate(dist, rset.query_ids, rset.gallery_ids,
                    rset.query_cams, rset.gallery_cams)


def linear_probe_accuracy(train_features: np.ndarray, train_labels,
                          test_features: np.ndarray, test_labels) -> float:
    """Held-out accuracy of a multinomial logistic probe on frozen features."""
    from sklearn.linear_model import LogisticRegression
    from sklearn.pipeline import make_pipeline
    from sklearn.preprocessing import StandardScaler

    clf = make_pipeline(
        StandardScaler(),
        LogisticRegression(max_iter=3000, random_state=0))
    clf.fit(np.asarray(train_features, dtype=np.float64), np.asarray(train_labels))
    return float(clf.score(np.asarray(test_features, dtype=np.float64),
                           np.asarray(test_labels)))

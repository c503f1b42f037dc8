"""Retrieval metrics (mAP / CMC) with camera-aware junk filtering, and Grad-CAM saliency."""

from __future__ import annotations

import json
import logging
import warnings
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Sequence

import numpy as np
import torch
import torch.nn.functional as F

from vtbr.errors import ProtocolError
from vtbr.model import FORWARD, VTBRModel, direction_nll, global_pool, pad_batch, project

log = logging.getLogger(__name__)


@dataclass
class RankingResult:
    """Valid gallery indices by ascending distance; junk entries are dropped."""

    order: np.ndarray
    distances: np.ndarray
    valid: np.ndarray


def euclidean_distances(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    # direct differences: equal distances stay exactly equal, so ties break by gallery index
    out = np.empty((len(a), len(b)))
    for i in range(len(a)):
        diff = b - a[i]
        out[i] = np.sqrt((diff * diff).sum(1))
    return out


def rank_gallery(query_emb, gallery_emb, query_meta: tuple[int, int], gallery_ids, gallery_cams) -> RankingResult:
    q = np.asarray(query_emb, dtype=np.float64).reshape(1, -1)
    g = np.asarray(gallery_emb, dtype=np.float64)
    if g.ndim != 2 or g.shape[1] != q.shape[1]:
        raise ProtocolError(f"embedding dims differ: query {q.shape[1]}, gallery {g.shape}")
    return _rank_from_distances(euclidean_distances(q, g)[0], query_meta, gallery_ids, gallery_cams)


def _rank_from_distances(dist, query_meta, gallery_ids, gallery_cams) -> RankingResult:
    qid, qcam = query_meta
    gids = np.asarray(gallery_ids)
    gcams = np.asarray(gallery_cams)
    valid = ~((gids == qid) & (gcams == qcam))
    if not valid.any():
        raise ProtocolError(f"query (id={qid}, cam={qcam}) has no valid gallery entries")
    order = np.argsort(dist, kind="stable")
    order = order[valid[order]]
    return RankingResult(order, dist[order], valid)


def relevance_flags(query_id: int, gallery_ids) -> np.ndarray:
    return np.asarray(gallery_ids) == query_id


def average_precision(ranking: RankingResult, relevance) -> float | None:
    """Mean of precision@rank over the relevant valid items; None if there are none."""
    hits = np.asarray(relevance, dtype=bool)[ranking.order]
    n_rel = int(hits.sum())
    if n_rel == 0:
        return None
    ranks = np.flatnonzero(hits) + 1
    precisions = np.arange(1, n_rel + 1) / ranks
    return float(precisions.mean())


def first_hit(ranking: RankingResult, relevance) -> int | None:
    hits = np.flatnonzero(np.asarray(relevance, dtype=bool)[ranking.order])
    return int(hits[0]) + 1 if len(hits) else None


def compute_cmc(rankings: Sequence[RankingResult], relevance: Sequence, max_rank: int | None = None) -> np.ndarray:
    """cmc[r-1] = fraction of queries (with any valid match) whose first match is at rank <= r."""
    if max_rank is None:
        max_rank = max(len(r.order) for r in rankings)
    firsts = [first_hit(r, rel) for r, rel in zip(rankings, relevance)]
    firsts = [f for f in firsts if f is not None]
    cmc = np.zeros(max_rank)
    if not firsts:
        return cmc
    for f in firsts:
        if f <= max_rank:
            cmc[f - 1:] += 1
    return cmc / len(firsts)


@dataclass
class EvalReport:
    mAP: float
    cmc: dict[int, float]
    protocol: dict = field(default_factory=dict)
    counts: dict = field(default_factory=dict)
    meta: dict = field(default_factory=dict)

    def to_dict(self) -> dict:
        return {
            "mAP": self.mAP,
            "cmc": {str(k): v for k, v in sorted(self.cmc.items())},
            "protocol": self.protocol,
            "counts": self.counts,
            "meta": self.meta,
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=True, indent=2) + "\n"

    def save(self, path: str | Path):
        Path(path).write_text(self.to_json(), encoding="utf-8")


def retrieval_metrics(query_emb, query_ids, query_cams, gallery_emb, gallery_ids, gallery_cams, ranks=(1, 5, 10)):
    """mAP, CMC dict and counts for a query/gallery embedding set."""
    dist = euclidean_distances(query_emb, gallery_emb)
    gallery_ids = np.asarray(gallery_ids)
    aps, rankings, rels = [], [], []
    excluded = 0
    for i, (qid, qcam) in enumerate(zip(query_ids, query_cams)):
        ranking = _rank_from_distances(dist[i], (qid, qcam), gallery_ids, gallery_cams)
        rel = relevance_flags(qid, gallery_ids)
        ap = average_precision(ranking, rel)
        if ap is None:
            excluded += 1
            continue
        aps.append(ap)
        rankings.append(ranking)
        rels.append(rel)
    if excluded:
        warnings.warn(f"{excluded} queries have no valid match and are excluded from mAP/CMC")
    full = len(gallery_ids)
    cmc_curve = compute_cmc(rankings, rels, full) if rankings else np.zeros(full)
    wanted = sorted({r for r in ranks if r <= full} | {full})
    cmc = {r: float(cmc_curve[r - 1]) for r in wanted}
    counts = {"queries": len(query_ids), "gallery": full, "evaluated": len(aps), "excluded_queries": excluded}
    mAP = float(np.mean(aps)) if aps else 0.0
    return mAP, cmc, counts


def expected_random_ap(n_valid: int, n_relevant: int) -> float:
    """E[AP] when the n_valid items are ranked uniformly at random."""
    n, r = n_valid, n_relevant
    if r == 0:
        raise ValueError("no relevant items")
    if n == 1:
        return 1.0
    harmonic = float(np.sum(1.0 / np.arange(1, n + 1)))
    return (harmonic + (r - 1) / (n - 1) * (n - harmonic)) / n


def permutation_baseline(query_ids, query_cams, gallery_ids, gallery_cams) -> float:
    """Expected mAP of a ranking that ignores the images, from the split counts alone."""
    gids = np.asarray(gallery_ids)
    gcams = np.asarray(gallery_cams)
    vals = []
    for qid, qcam in zip(query_ids, query_cams):
        valid = ~((gids == qid) & (gcams == qcam))
        rel = int(((gids == qid) & valid).sum())
        if rel:
            vals.append(expected_random_ap(int(valid.sum()), rel))
    return float(np.mean(vals)) if vals else 0.0


@dataclass
class RetrievalSet:
    query_images: np.ndarray
    query_ids: np.ndarray
    query_cams: np.ndarray
    gallery_images: np.ndarray
    gallery_ids: np.ndarray
    gallery_cams: np.ndarray
    domain: str = ""


Encoder = Callable[[torch.Tensor], torch.Tensor]


@torch.no_grad()
def extract_embeddings(encoder: Encoder, images, batch_size: int = 256) -> np.ndarray:
    """Pooled embeddings; 4-D encoder outputs are globally averaged over space."""
    module = encoder if isinstance(encoder, torch.nn.Module) else None
    was = module.training if module is not None else False
    if module is not None:
        module.eval()
    try:
        images = torch.as_tensor(np.asarray(images))
        outs = []
        for i in range(0, len(images), batch_size):
            out = encoder(images[i:i + batch_size])
            outs.append(global_pool(out) if out.dim() == 4 else out)
    finally:
        if module is not None:
            module.train(was)
    return torch.cat(outs).double().numpy()


def evaluate(encoder: Encoder, data: RetrievalSet, protocol: dict | None = None, ranks=(1, 5, 10)) -> EvalReport:
    q = extract_embeddings(encoder, data.query_images)
    g = extract_embeddings(encoder, data.gallery_images)
    mAP, cmc, counts = retrieval_metrics(q, data.query_ids, data.query_cams, g, data.gallery_ids, data.gallery_cams, ranks)
    proto = {"test_domain": data.domain}
    proto.update(protocol or {})
    return EvalReport(mAP, cmc, proto, counts)


def cross_domain_eval(encoder: Encoder, target: RetrievalSet, train_domain: str, protocol: dict | None = None,
                      ranks=(1, 5, 10)) -> EvalReport:
    """Direct transfer: no adaptation on the target domain."""
    proto = {"train_domain": train_domain, "transfer": "direct"}
    proto.update(protocol or {})
    return evaluate(encoder, target, proto, ranks)


def saliency_map(model: VTBRModel, image, token_ids: Sequence[int]) -> np.ndarray:
    """Grad-CAM of the forward caption log-probability w.r.t. the last feature map, in [0, 1]."""
    was = model.training
    model.eval()
    try:
        x = torch.as_tensor(np.asarray(image), dtype=next(model.parameters()).dtype)
        if x.dim() == 3:
            x = x[None]
        feats = model.visual(x)
        feats.retain_grad()
        ids = pad_batch([list(token_ids)], model.cfg.max_len)
        logprob = -direction_nll(project(feats, model), ids, FORWARD, model, reduction="sum")
        model.zero_grad(set_to_none=True)
        logprob.backward()
        grads = feats.grad[0]
        weights = grads.mean(dim=(1, 2))
        cam = F.relu((weights[:, None, None] * feats[0]).sum(0)).detach()
        cam = F.interpolate(cam[None, None], size=x.shape[-2:], mode="bilinear", align_corners=False)[0, 0]
        model.zero_grad(set_to_none=True)
    finally:
        model.train(was)
    peak = float(cam.max())
    if peak <= 0.0:
        warnings.warn("saliency is identically zero for this image/caption")
        return np.zeros(tuple(x.shape[-2:]), dtype=np.float32)
    return (cam / peak).clamp(0.0, 1.0).numpy().astype(np.float32)


def save_saliency(heat: np.ndarray, stem: str | Path):
    """Write ``<stem>.pgm`` (8-bit) and ``<stem>.f32`` (raw little-endian floats)."""
    stem = Path(stem)
    h, w = heat.shape
    pix = np.clip(np.round(heat * 255.0), 0, 255).astype(np.uint8)
    with open(stem.with_suffix(".pgm"), "wb") as fh:
        fh.write(f"P5\n{w} {h}\n255\n".encode("ascii"))
        fh.write(pix.tobytes())
    np.ascontiguousarray(heat, dtype="<f4").tofile(stem.with_suffix(".f32"))

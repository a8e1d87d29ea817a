"""Retrieval evaluation: ranking, fusion re-ranking, R@K / mAP, and FID.

Text queries retrieve gallery images by cosine similarity of projected
features; the top-K candidates can then be re-scored by the fusion matching
head. Relevance is identity-based: every gallery image of the query's
identity counts as a correct hit.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch

from .corpus import CorpusManifest, ValidationError, atomic_write_text
from .curation import load_image
from .encoders import AlignmentModel, image_to_tensor
from .synth import Vocabulary, tokenize

DEFAULT_CANDIDATES = 512


@dataclass
class FeatureStats:
    """Gaussian fit of a feature set: sample mean and unbiased covariance."""

    mu: np.ndarray
    sigma: np.ndarray


def feature_stats(features: np.ndarray) -> FeatureStats:
    features = np.asarray(features, dtype=np.float64)
    if features.ndim != 2 or features.shape[0] < 2:
        raise ValueError("feature_stats needs at least 2 samples of shape (n, d)")
    mu = features.mean(axis=0)
    sigma = np.cov(features, rowvar=False, ddof=1)
    sigma = np.atleast_2d(sigma)
    return FeatureStats(mu=mu, sigma=sigma)


def fid(a: FeatureStats, b: FeatureStats) -> float:
    """||mu_a - mu_b||^2 + tr(S_a + S_b - 2 (S_a S_b)^{1/2}), clamped at 0.

    The cross term uses tr((S_b^{1/2} S_a S_b^{1/2})^{1/2}), computed by
    eigendecomposition with negative eigenvalues clamped to zero.
    """
    if a.mu.shape != b.mu.shape or a.sigma.shape != b.sigma.shape:
        raise ValueError("feature statistics have mismatched dimensions")
    diff = a.mu - b.mu
    vals_b, vecs_b = np.linalg.eigh((b.sigma + b.sigma.T) / 2.0)
    root_b = (vecs_b * np.sqrt(np.clip(vals_b, 0.0, None))) @ vecs_b.T
    inner = root_b @ a.sigma @ root_b
    vals = np.linalg.eigvalsh((inner + inner.T) / 2.0)
    tr_sqrt = float(np.sqrt(np.clip(vals, 0.0, None)).sum())
    value = float(diff @ diff + np.trace(a.sigma) + np.trace(b.sigma) - 2.0 * tr_sqrt)
    return max(value, 0.0)


@dataclass
class RetrievalIndex:
    """Unit-norm gallery/query features plus identity-based relevance.

    The gallery is kept sorted by id so similarity ties resolve to ascending
    gallery id regardless of insertion order.
    """

    gallery_ids: list[str]
    gallery: np.ndarray
    query_ids: list[str]
    queries: np.ndarray
    relevance: dict[str, set[str]]

    def __post_init__(self):
        if len(self.gallery_ids) == 0:
            raise ValueError("gallery must be non-empty")
        order = sorted(range(len(self.gallery_ids)), key=lambda i: self.gallery_ids[i])
        self.gallery_ids = [self.gallery_ids[i] for i in order]
        self.gallery = np.asarray(self.gallery, dtype=np.float64)[order]
        self.queries = np.asarray(self.queries, dtype=np.float64)
        for qid in self.query_ids:
            if not self.relevance.get(qid):
                raise ValidationError("query has no relevant gallery item", qid)


def rank_candidates(index: RetrievalIndex, k: int | None = None) -> list[list[str]]:
    """Per query: gallery ids by descending similarity, ties by ascending id,
    truncated to k (default min(512, gallery size))."""
    g = len(index.gallery_ids)
    if k is None:
        k = min(DEFAULT_CANDIDATES, g)
    if k < 1:
        raise ValueError("k must be >= 1")
    sims = index.queries @ index.gallery.T
    ranked = []
    for q in range(len(index.query_ids)):
        order = np.argsort(-sims[q], kind="stable")[:k]
        ranked.append([index.gallery_ids[i] for i in order])
    return ranked


def rerank(
    candidates: list[str], match_scores: list[float], stage1_scores: list[float]
) -> list[str]:
    """Reorder by descending match probability; ties fall back to the stage-1
    similarity and then ascending id. A permutation of its input."""
    rows = list(zip(candidates, match_scores, stage1_scores))
    rows.sort(key=lambda r: (-r[1], -r[2], r[0]))
    return [r[0] for r in rows]


def recall_at_k(ranked: list[list[str]], relevance: dict[str, set[str]], query_ids: list[str], k: int) -> float:
    """Fraction of queries with at least one relevant id in the top k."""
    if k < 1:
        raise ValueError("k must be >= 1")
    hits = 0
    for qid, candidates in zip(query_ids, ranked):
        top = candidates[: min(k, len(candidates))]
        if any(c in relevance[qid] for c in top):
            hits += 1
    return hits / len(ranked) if ranked else 0.0


def mean_average_precision(
    ranked: list[list[str]], relevance: dict[str, set[str]], query_ids: list[str]
) -> float:
    """Mean over queries of the average precision at each relevant rank."""
    aps = []
    for qid, candidates in zip(query_ids, ranked):
        relevant = relevance[qid]
        hits = 0
        precision_sum = 0.0
        for rank, cand in enumerate(candidates, start=1):
            if cand in relevant:
                hits += 1
                precision_sum += hits / rank
        aps.append(precision_sum / len(relevant) if relevant else 0.0)
    return float(np.mean(aps)) if aps else 0.0


@dataclass
class EvalReport:
    """Retrieval metrics plus run identifiers; field names are stable."""

    r1: float
    r5: float
    r10: float
    map: float
    map_stage1: float
    k: int
    rerank: bool
    num_queries: int
    num_gallery: int
    checkpoint: str = ""
    manifest: str = ""

    def to_dict(self) -> dict:
        return {
            "r1": self.r1, "r5": self.r5, "r10": self.r10,
            "map": self.map, "map_stage1": self.map_stage1,
            "k": self.k, "rerank": self.rerank,
            "num_queries": self.num_queries, "num_gallery": self.num_gallery,
            "checkpoint": self.checkpoint, "manifest": self.manifest,
        }

    def save(self, path: str | Path) -> None:
        atomic_write_text(path, json.dumps(self.to_dict(), indent=2) + "\n")

    def table(self) -> str:
        rows = [
            ("R@1", self.r1), ("R@5", self.r5), ("R@10", self.r10),
            ("mAP", self.map), ("mAP (stage 1)", self.map_stage1),
        ]
        lines = [f"queries={self.num_queries} gallery={self.num_gallery} "
                 f"k={self.k} rerank={'on' if self.rerank else 'off'}"]
        lines += [f"  {name:<14}{value:8.4f}" for name, value in rows]
        return "\n".join(lines)


@dataclass
class CorpusEmbeddings:
    """Everything evaluate/fid needs from one manifest pass."""

    record_ids: list[str]
    identities: list[str | None]
    image_feats: np.ndarray        # unit-norm projected pooled image features
    image_feats_raw: np.ndarray    # projected, pre-normalization (FID source)
    text_feats: np.ndarray         # unit-norm projected pooled caption features
    image_seqs: torch.Tensor       # fusion key/value sequences (pooled + grid)
    caption_embs: torch.Tensor     # contextual caption token embeddings
    caption_masks: torch.Tensor


@torch.no_grad()
def embed_corpus(
    model: AlignmentModel,
    vocab: Vocabulary,
    manifest: CorpusManifest,
    base_dir: str | Path,
    batch_size: int = 64,
) -> CorpusEmbeddings:
    model.eval()
    base = Path(base_dir)
    mc = model.config
    ids, identities = [], []
    img_feats, img_raw, txt_feats = [], [], []
    img_seqs, cap_embs, cap_masks = [], [], []
    records = manifest.records
    for lo in range(0, len(records), batch_size):
        chunk = records[lo : lo + batch_size]
        images = torch.stack(
            [image_to_tensor(load_image(base / r.image_ref)) for r in chunk]
        )
        toks = [tokenize(r.caption, vocab, mc.max_text_len) for r in chunk]
        cap_ids = torch.tensor([t.ids for t in toks], dtype=torch.long)
        cap_mask = torch.tensor([t.mask for t in toks], dtype=torch.long)

        patch_tokens = model.vision(images)
        image_seq = model.image_tokens(patch_tokens)
        raw = model.vision_proj(image_seq[:, 0])
        feat = torch.nn.functional.normalize(raw, dim=-1, eps=1e-12)

        cap_emb = model.text(cap_ids, cap_mask)
        pooled = model.pooled_text(cap_emb, cap_mask)
        tfeat = torch.nn.functional.normalize(model.text_proj(pooled), dim=-1, eps=1e-12)

        ids.extend(r.record_id for r in chunk)
        identities.extend(r.identity_id for r in chunk)
        img_feats.append(feat.numpy())
        img_raw.append(raw.numpy())
        txt_feats.append(tfeat.numpy())
        img_seqs.append(image_seq)
        cap_embs.append(cap_emb)
        cap_masks.append(cap_mask)

    return CorpusEmbeddings(
        record_ids=ids,
        identities=identities,
        image_feats=np.concatenate(img_feats).astype(np.float64),
        image_feats_raw=np.concatenate(img_raw).astype(np.float64),
        text_feats=np.concatenate(txt_feats).astype(np.float64),
        image_seqs=torch.cat(img_seqs),
        caption_embs=torch.cat(cap_embs),
        caption_masks=torch.cat(cap_masks),
    )


def build_index(emb: CorpusEmbeddings) -> RetrievalIndex:
    """Queries = captions, gallery = images, relevance = shared identity."""
    by_identity: dict[str, set[str]] = {}
    for rid, ident in zip(emb.record_ids, emb.identities):
        if ident is None:
            raise ValidationError("record lacks identity_id; retrieval ground truth undefined", rid)
        by_identity.setdefault(ident, set()).add(rid)
    relevance = {
        rid: by_identity[ident] for rid, ident in zip(emb.record_ids, emb.identities)
    }
    return RetrievalIndex(
        gallery_ids=list(emb.record_ids),
        gallery=emb.image_feats,
        query_ids=list(emb.record_ids),
        queries=emb.text_feats,
        relevance=relevance,
    )


@torch.no_grad()
def _match_probs_for_query(
    model: AlignmentModel,
    emb: CorpusEmbeddings,
    query_pos: int,
    candidate_positions: list[int],
    pair_batch: int = 256,
) -> list[float]:
    probs: list[float] = []
    text_emb = emb.caption_embs[query_pos]
    text_mask = emb.caption_masks[query_pos]
    for lo in range(0, len(candidate_positions), pair_batch):
        chunk = candidate_positions[lo : lo + pair_batch]
        v = emb.image_seqs[chunk]
        t = text_emb.unsqueeze(0).expand(len(chunk), -1, -1)
        tm = text_mask.unsqueeze(0).expand(len(chunk), -1)
        probs.extend(model.matching_probability(t, tm, v).tolist())
    return probs


@torch.no_grad()
def evaluate(
    model: AlignmentModel,
    vocab: Vocabulary,
    manifest: CorpusManifest,
    base_dir: str | Path,
    k: int = DEFAULT_CANDIDATES,
    use_rerank: bool = True,
    checkpoint_name: str = "",
    manifest_name: str = "",
) -> EvalReport:
    """Two-stage protocol: rank the full gallery by cosine similarity, then
    optionally re-rank the top-k candidates with the fusion matching head.

    R@K uses the final ordering (re-ranked inside k, stage-1 beyond); mAP is
    reported for the final ordering and for the stage-1 ordering.
    """
    if k < 1:
        raise ValueError("k must be >= 1")
    emb = embed_corpus(model, vocab, manifest, base_dir)
    index = build_index(emb)
    g = len(index.gallery_ids)
    k = min(k, g)
    full = rank_candidates(index, k=g)
    pos_of = {rid: i for i, rid in enumerate(emb.record_ids)}
    qpos = [pos_of[qid] for qid in index.query_ids]

    if use_rerank:
        sims = index.queries @ index.gallery.T
        id_col = {rid: j for j, rid in enumerate(index.gallery_ids)}
        final = []
        for qi, ranking in enumerate(full):
            head, tail = ranking[:k], ranking[k:]
            cand_pos = [pos_of[rid] for rid in head]
            probs = _match_probs_for_query(model, emb, qpos[qi], cand_pos)
            stage1 = [float(sims[qi, id_col[rid]]) for rid in head]
            final.append(rerank(head, probs, stage1) + tail)
    else:
        final = full

    return EvalReport(
        r1=recall_at_k(final, index.relevance, index.query_ids, 1),
        r5=recall_at_k(final, index.relevance, index.query_ids, 5),
        r10=recall_at_k(final, index.relevance, index.query_ids, 10),
        map=mean_average_precision(final, index.relevance, index.query_ids),
        map_stage1=mean_average_precision(full, index.relevance, index.query_ids),
        k=k,
        rerank=use_rerank,
        num_queries=len(index.query_ids),
        num_gallery=g,
        checkpoint=checkpoint_name,
        manifest=manifest_name,
    )


@torch.no_grad()
def corpus_fid(
    model: AlignmentModel,
    vocab: Vocabulary,
    manifest_a: CorpusManifest,
    base_a: str | Path,
    manifest_b: CorpusManifest,
    base_b: str | Path,
) -> float:
    """FID between two corpora over projected (pre-normalization) pooled
    image features from the supplied checkpoint's vision tower."""
    feats_a = embed_corpus(model, vocab, manifest_a, base_a).image_feats_raw
    feats_b = embed_corpus(model, vocab, manifest_b, base_b).image_feats_raw
    return fid(feature_stats(feats_a), feature_stats(feats_b))

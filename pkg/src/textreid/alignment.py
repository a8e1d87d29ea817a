"""Alignment objectives: two contrastive losses, two matching losses, MLM.

Pair granularities share one machinery: in-batch symmetric contrastive loss
over projected features, similarity-proportional hard-negative sampling, and
binary match classification on fused [CLS] embeddings. The combined loss is

    total = itc + itm + mlm + beta * (rpc + rpm)

where the region terms pair one sampled region per record with its phrase.
Records without regions fall back to the whole-image box plus the caption.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import torch
import torch.nn.functional as F

from .corpus import BoundingBox
from .encoders import AlignmentModel, region_patch_indices
from .synth import MASK_ID, SPECIAL_TOKENS, TokenSequence, Vocabulary

PROB_EPS = 1e-7  # match probabilities are clamped to [eps, 1-eps] before log


@dataclass(frozen=True)
class LossWeights:
    """Weight of the region-level terms in the combined loss."""

    beta: float = 0.8

    def __post_init__(self):
        if self.beta < 0:
            raise ValueError("beta must be >= 0")


@dataclass(frozen=True)
class MaskedTokens:
    """One sequence after mask corruption; ground truth is the original ids."""

    original: tuple[int, ...]
    corrupted: tuple[int, ...]
    positions: tuple[int, ...]


@dataclass
class TrainBatch:
    """Model-ready tensors for one step: N image-text + N region-phrase pairs."""

    images: torch.Tensor          # (B, 3, H, W) in [0, 1]
    caption_ids: torch.Tensor     # (B, Lt)
    caption_mask: torch.Tensor    # (B, Lt)
    mlm_ids: torch.Tensor         # (B, Lt) corrupted caption ids
    mlm_positions: torch.Tensor   # (B, Lt) bool
    region_boxes: list[BoundingBox]
    phrase_ids: torch.Tensor      # (B, Lp)
    phrase_mask: torch.Tensor     # (B, Lp)
    record_ids: list[str]

    @property
    def size(self) -> int:
        return self.images.shape[0]


@dataclass
class NegativePlan:
    """Hard-negative partner indices; frozen so the loss is a deterministic
    function of (batch, parameters) given the plan."""

    text_neg: torch.Tensor | None = None    # (N,) negative caption per image
    image_neg: torch.Tensor | None = None   # (N,) negative image per caption
    phrase_neg: torch.Tensor | None = None  # (N,) negative phrase per region
    region_neg: torch.Tensor | None = None  # (N,) negative region per phrase


def contrastive_loss(x: torch.Tensor, y: torch.Tensor, temperature: torch.Tensor) -> torch.Tensor:
    """Symmetric in-batch softmax contrastive loss; diagonal pairs are positives.

    Equals -1/2 * mean_i [log softmax_row(i,i) + log softmax_col(i,i)] of the
    temperature-scaled cosine similarity matrix. Zero for a single pair.
    """
    if x.shape[0] == 0:
        raise ValueError("contrastive_loss needs at least one pair")
    sim = x @ y.t() / temperature
    targets = torch.arange(x.shape[0], device=x.device)
    return 0.5 * (F.cross_entropy(sim, targets) + F.cross_entropy(sim.t(), targets))


def sample_hard_negative(
    sim_row: torch.Tensor,
    positive_index: int,
    temperature: torch.Tensor,
    generator: torch.Generator,
) -> int:
    """Sample j != positive with probability proportional to exp(s_j / tau)."""
    n = sim_row.shape[0]
    if n < 2:
        raise ValueError("no negative exists for a single-entry row")
    logits = (sim_row.detach() / temperature.detach()).to(torch.float64)
    logits[positive_index] = float("-inf")
    probs = F.softmax(logits, dim=0)
    return int(torch.multinomial(probs, 1, generator=generator).item())


def match_bce(probs: torch.Tensor, labels: torch.Tensor) -> torch.Tensor:
    """Mean binary cross-entropy with probabilities clamped away from {0, 1}."""
    p = probs.clamp(PROB_EPS, 1.0 - PROB_EPS)
    labels = labels.to(p.dtype)
    return -(labels * p.log() + (1.0 - labels) * (1.0 - p).log()).mean()


def matching_loss(
    model: AlignmentModel,
    text_emb: torch.Tensor,
    text_mask: torch.Tensor,
    vision_tokens: torch.Tensor,
    vision_mask: torch.Tensor | None,
    labels: torch.Tensor,
) -> tuple[torch.Tensor, torch.Tensor]:
    """Fuse each pair, classify the fused [CLS], return (loss, probabilities)."""
    probs = model.matching_probability(text_emb, text_mask, vision_tokens, vision_mask)
    return match_bce(probs, labels), probs


def apply_mask(
    tokens: TokenSequence,
    vocab: Vocabulary,
    mask_prob: float = 0.25,
    rng: np.random.Generator | None = None,
) -> MaskedTokens:
    """Select each non-special real token with ``mask_prob``; selected tokens
    become [MASK] w.p. 0.8, a random regular token w.p. 0.1, or stay unchanged
    w.p. 0.1. Positions are recorded even when unchanged."""
    if rng is None:
        raise ValueError("apply_mask requires an explicit rng for reproducibility")
    corrupted = list(tokens.ids)
    positions: list[int] = []
    n_special = len(SPECIAL_TOKENS)
    for i, (tid, real) in enumerate(zip(tokens.ids, tokens.mask)):
        if not real or tid < n_special:
            continue
        if rng.random() >= mask_prob:
            continue
        positions.append(i)
        r = rng.random()
        if r < 0.8:
            corrupted[i] = MASK_ID
        elif r < 0.9 and vocab.num_regular > 0:
            corrupted[i] = n_special + int(rng.integers(vocab.num_regular))
    return MaskedTokens(
        original=tokens.ids, corrupted=tuple(corrupted), positions=tuple(positions)
    )


def mlm_loss(logits: torch.Tensor, targets: torch.Tensor) -> torch.Tensor:
    """Mean cross-entropy over mask positions; zero when nothing is masked."""
    if targets.numel() == 0:
        return torch.zeros((), dtype=logits.dtype, device=logits.device)
    return F.cross_entropy(logits, targets)


def build_region_sequences(
    patch_tokens: torch.Tensor, boxes: list[BoundingBox], grid: tuple[int, int]
) -> tuple[torch.Tensor, torch.Tensor]:
    """Per-record pseudo-[CLS] + overlapped patch embeddings, zero-padded.

    Returns (sequences (B, S, D), mask (B, S)) with S = 1 + max patch count.
    """
    b, _, dim = patch_tokens.shape
    index_lists = [region_patch_indices(box, grid) for box in boxes]
    max_sel = max(len(ix) for ix in index_lists)
    seq = patch_tokens.new_zeros((b, 1 + max_sel, dim))
    mask = torch.zeros((b, 1 + max_sel), dtype=torch.long, device=patch_tokens.device)
    for i, indices in enumerate(index_lists):
        sel = patch_tokens[i, indices]
        seq[i, 0] = sel.mean(dim=0)
        seq[i, 1 : 1 + len(indices)] = sel
        mask[i, : 1 + len(indices)] = 1
    return seq, mask


def _sample_negative_pairs(sim, temperature, generator):
    """Row-wise then column-wise hard negatives, in a fixed draw order."""
    n = sim.shape[0]
    y_neg = torch.tensor(
        [sample_hard_negative(sim[i], i, temperature, generator) for i in range(n)],
        dtype=torch.long,
    )
    x_neg = torch.tensor(
        [sample_hard_negative(sim[:, i], i, temperature, generator) for i in range(n)],
        dtype=torch.long,
    )
    return y_neg, x_neg


def _matching_inputs(text_emb, text_mask, vision_tokens, vision_mask, text_neg, vision_neg):
    """Stack [positives, text-negative pairs, vision-negative pairs]."""
    n = text_emb.shape[0]
    if text_neg is None:
        labels = torch.ones(n)
        return text_emb, text_mask, vision_tokens, vision_mask, labels
    t = torch.cat([text_emb, text_emb[text_neg], text_emb], dim=0)
    tm = torch.cat([text_mask, text_mask[text_neg], text_mask], dim=0)
    v = torch.cat([vision_tokens, vision_tokens, vision_tokens[vision_neg]], dim=0)
    vm = None
    if vision_mask is not None:
        vm = torch.cat([vision_mask, vision_mask, vision_mask[vision_neg]], dim=0)
    labels = torch.cat([torch.ones(n), torch.zeros(2 * n)])
    return t, tm, v, vm, labels


def combined_loss(
    model: AlignmentModel,
    batch: TrainBatch,
    weights: LossWeights,
    generator: torch.Generator | None = None,
    plan: NegativePlan | None = None,
    mode: str = "pretrain",
    return_details: bool = False,
):
    """Evaluate the full objective on one batch.

    Returns (total, breakdown) or (total, breakdown, details). The breakdown
    maps term names to floats; pretrain mode reports all five terms (beta = 0
    still evaluates the region terms, contributing an exact zero), finetune
    mode evaluates and reports only itc/itm/mlm.

    Hard negatives come from ``plan`` when given; otherwise they are drawn
    from ``generator`` in a fixed order (caption negatives, image negatives,
    then phrase negatives, region negatives).
    """
    if mode not in ("pretrain", "finetune"):
        raise ValueError(f"unknown mode {mode!r}")
    if plan is None and generator is None:
        raise ValueError("need a generator when no negative plan is supplied")
    n = batch.size
    grid = model.config.grid

    patch_tokens = model.vision(batch.images)
    image_seq = model.image_tokens(patch_tokens)
    image_feat = F.normalize(model.vision_proj(image_seq[:, 0]), dim=-1, eps=1e-12)

    caption_emb = model.text(batch.caption_ids, batch.caption_mask)
    caption_feat = F.normalize(
        model.text_proj(model.pooled_text(caption_emb, batch.caption_mask)), dim=-1, eps=1e-12
    )

    itc = contrastive_loss(image_feat, caption_feat, model.temp_global.value)

    plan = plan or NegativePlan()
    details: dict = {}

    # Image-text matching on positives plus hard negatives (when N > 1).
    if n > 1 and plan.text_neg is None:
        sim_global = image_feat.detach() @ caption_feat.detach().t()
        plan.text_neg, plan.image_neg = _sample_negative_pairs(
            sim_global, model.temp_global.value, generator
        )
    t, tm, v, vm, itm_labels = _matching_inputs(
        caption_emb, batch.caption_mask, image_seq, None, plan.text_neg, plan.image_neg
    )
    itm, itm_probs = matching_loss(model, t, tm, v, vm, itm_labels)

    # MLM over the corrupted captions fused with their own images.
    mlm_emb = model.text(batch.mlm_ids, batch.caption_mask)
    fused = model.fusion(mlm_emb, batch.caption_mask, image_seq)
    pos = batch.mlm_positions
    mlm_logits = model.mlm_head(fused[pos])
    mlm_targets = batch.caption_ids[pos]
    mlm = mlm_loss(mlm_logits, mlm_targets)

    breakdown = {"itc": itc.detach().item(), "itm": itm.detach().item(), "mlm": mlm.detach().item()}
    total = itc + itm + mlm

    if mode == "pretrain":
        region_seq, region_mask = build_region_sequences(patch_tokens, batch.region_boxes, grid)
        region_feat = F.normalize(model.vision_proj(region_seq[:, 0]), dim=-1, eps=1e-12)
        phrase_emb = model.text(batch.phrase_ids, batch.phrase_mask)
        phrase_feat = F.normalize(
            model.text_proj(model.pooled_text(phrase_emb, batch.phrase_mask)), dim=-1, eps=1e-12
        )
        rpc = contrastive_loss(region_feat, phrase_feat, model.temp_region.value)

        if n > 1 and plan.phrase_neg is None:
            sim_region = region_feat.detach() @ phrase_feat.detach().t()
            plan.phrase_neg, plan.region_neg = _sample_negative_pairs(
                sim_region, model.temp_region.value, generator
            )
        t, tm, v, vm, rpm_labels = _matching_inputs(
            phrase_emb, batch.phrase_mask, region_seq, region_mask,
            plan.phrase_neg, plan.region_neg,
        )
        rpm, rpm_probs = matching_loss(model, t, tm, v, vm, rpm_labels)

        total = total + weights.beta * (rpc + rpm)
        breakdown["rpc"] = rpc.detach().item()
        breakdown["rpm"] = rpm.detach().item()
        if return_details:
            details["rpc"] = {
                "x": region_feat.detach(), "y": phrase_feat.detach(),
                "temp": model.temp_region.value.detach(),
            }
            details["rpm"] = {"probs": rpm_probs.detach(), "labels": rpm_labels}

    breakdown["total"] = total.detach().item()
    if return_details:
        details["itc"] = {
            "x": image_feat.detach(), "y": caption_feat.detach(),
            "temp": model.temp_global.value.detach(),
        }
        details["itm"] = {"probs": itm_probs.detach(), "labels": itm_labels}
        details["mlm"] = {"logits": mlm_logits.detach(), "targets": mlm_targets}
        details["plan"] = plan
        return total, breakdown, details
    return total, breakdown

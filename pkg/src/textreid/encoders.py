"""Toy-scale vision / text / fusion transformers with region-aware wiring.

The vision tower embeds non-overlapping patches; region features are indexed
out of the full-image patch grid (never re-encoded) and pooled into a
pseudo-[CLS]. The fusion tower runs text self-attention plus cross-attention
into the visual token sequence. Projections are bias-free linear maps
followed by L2 normalization.
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass
from pathlib import Path

import torch
import torch.nn as nn
import torch.nn.functional as F

from .corpus import BoundingBox, ValidationError, box_extent
from .synth import ConfigurationError, Vocabulary


@dataclass(frozen=True)
class ModelConfig:
    """Architecture knobs; defaults are the desk-scale toy configuration."""

    image_size: int = 64
    patch_size: int = 16
    embed_dim: int = 128
    num_heads: int = 4
    vision_layers: int = 4
    text_layers: int = 4
    fusion_layers: int = 4
    proj_dim: int = 64
    max_text_len: int = 24
    max_phrase_len: int = 12
    vocab_size: int = 0

    def validate(self) -> None:
        if self.image_size % self.patch_size != 0:
            raise ConfigurationError(
                f"image_size {self.image_size} not divisible by patch_size {self.patch_size}"
            )
        if self.embed_dim % self.num_heads != 0:
            raise ConfigurationError(
                f"embed_dim {self.embed_dim} not divisible by num_heads {self.num_heads}"
            )
        if self.max_phrase_len > self.max_text_len:
            raise ConfigurationError("max_phrase_len must be <= max_text_len")
        if self.vocab_size < 5:
            raise ConfigurationError("vocab_size must cover the specials plus content tokens")

    @property
    def grid(self) -> tuple[int, int]:
        g = self.image_size // self.patch_size
        return (g, g)

    @property
    def num_patches(self) -> int:
        g = self.image_size // self.patch_size
        return g * g


@dataclass
class PatchGrid:
    """Row-major per-patch embeddings for a single image."""

    embeddings: torch.Tensor  # (rows*cols, embed_dim)
    rows: int
    cols: int

    def __post_init__(self):
        if self.embeddings.shape[0] != self.rows * self.cols:
            raise ValueError("embedding count does not match grid geometry")


class TemperatureParam(nn.Module):
    """Learnable softmax temperature, kept positive via log parameterization."""

    def __init__(self, init: float = 0.07):
        super().__init__()
        self.log_temp = nn.Parameter(torch.tensor(math.log(init), dtype=torch.float32))

    @property
    def value(self) -> torch.Tensor:
        return self.log_temp.exp()


class SelfAttentionBlock(nn.Module):
    """Pre-norm transformer block: self-attention + MLP."""

    def __init__(self, dim: int, heads: int):
        super().__init__()
        self.norm1 = nn.LayerNorm(dim)
        self.attn = nn.MultiheadAttention(dim, heads, batch_first=True)
        self.norm2 = nn.LayerNorm(dim)
        self.mlp = nn.Sequential(
            nn.Linear(dim, dim * 4), nn.GELU(), nn.Linear(dim * 4, dim)
        )

    def forward(self, x, key_padding_mask=None):
        h = self.norm1(x)
        x = x + self.attn(h, h, h, key_padding_mask=key_padding_mask, need_weights=False)[0]
        return x + self.mlp(self.norm2(x))


class FusionBlock(nn.Module):
    """Text self-attention, then cross-attention into visual tokens, then MLP."""

    def __init__(self, dim: int, heads: int):
        super().__init__()
        self.norm1 = nn.LayerNorm(dim)
        self.self_attn = nn.MultiheadAttention(dim, heads, batch_first=True)
        self.norm2 = nn.LayerNorm(dim)
        self.cross_attn = nn.MultiheadAttention(dim, heads, batch_first=True)
        self.norm3 = nn.LayerNorm(dim)
        self.mlp = nn.Sequential(
            nn.Linear(dim, dim * 4), nn.GELU(), nn.Linear(dim * 4, dim)
        )

    def forward(self, x, text_padding_mask, vision_tokens, vision_padding_mask=None):
        h = self.norm1(x)
        x = x + self.self_attn(h, h, h, key_padding_mask=text_padding_mask, need_weights=False)[0]
        h = self.norm2(x)
        x = x + self.cross_attn(
            h, vision_tokens, vision_tokens,
            key_padding_mask=vision_padding_mask, need_weights=False,
        )[0]
        return x + self.mlp(self.norm3(x))


class VisionEncoder(nn.Module):
    def __init__(self, config: ModelConfig):
        super().__init__()
        self.config = config
        self.patch_embed = nn.Conv2d(
            3, config.embed_dim, kernel_size=config.patch_size, stride=config.patch_size
        )
        self.pos_embed = nn.Parameter(torch.randn(1, config.num_patches, config.embed_dim) * 0.02)
        self.blocks = nn.ModuleList(
            SelfAttentionBlock(config.embed_dim, config.num_heads)
            for _ in range(config.vision_layers)
        )
        self.norm = nn.LayerNorm(config.embed_dim)

    def forward(self, images: torch.Tensor) -> torch.Tensor:
        """images: (B, 3, H, W) floats in [0, 1] -> (B, num_patches, dim)."""
        _, _, h, w = images.shape
        if h != self.config.image_size or w != self.config.image_size:
            raise ConfigurationError(
                f"image size {h}x{w} does not match configured {self.config.image_size}"
            )
        x = self.patch_embed(images).flatten(2).transpose(1, 2)
        x = x + self.pos_embed
        for block in self.blocks:
            x = block(x)
        return self.norm(x)


class TextEncoder(nn.Module):
    def __init__(self, config: ModelConfig):
        super().__init__()
        self.config = config
        self.token_embed = nn.Embedding(config.vocab_size, config.embed_dim)
        self.pos_embed = nn.Parameter(torch.randn(1, config.max_text_len, config.embed_dim) * 0.02)
        self.blocks = nn.ModuleList(
            SelfAttentionBlock(config.embed_dim, config.num_heads)
            for _ in range(config.text_layers)
        )
        self.norm = nn.LayerNorm(config.embed_dim)

    def forward(self, ids: torch.Tensor, mask: torch.Tensor) -> torch.Tensor:
        """ids/mask: (B, L) with L <= max_text_len -> (B, L, dim)."""
        length = ids.shape[1]
        if length > self.config.max_text_len:
            raise ConfigurationError(f"sequence length {length} exceeds {self.config.max_text_len}")
        x = self.token_embed(ids) + self.pos_embed[:, :length]
        padding = mask == 0
        for block in self.blocks:
            x = block(x, key_padding_mask=padding)
        return self.norm(x)


class FusionEncoder(nn.Module):
    def __init__(self, config: ModelConfig):
        super().__init__()
        self.blocks = nn.ModuleList(
            FusionBlock(config.embed_dim, config.num_heads) for _ in range(config.fusion_layers)
        )
        self.norm = nn.LayerNorm(config.embed_dim)

    def forward(self, text_emb, text_mask, vision_tokens, vision_mask=None):
        """Cross-attend text (query) into vision tokens (key/value).

        text_emb: (B, L, D); text_mask: (B, L) with 1 = real token;
        vision_tokens: (B, S, D); vision_mask: optional (B, S), 1 = real.
        Output keeps the text length; position 0 is the fused [CLS].
        """
        if vision_tokens.ndim != 3 or vision_tokens.shape[1] == 0:
            raise ValueError("vision token sequence must be non-empty")
        if vision_mask is not None and bool((vision_mask.sum(dim=1) == 0).any()):
            raise ValueError("every sample needs at least one real vision token")
        text_padding = text_mask == 0
        vision_padding = None if vision_mask is None else vision_mask == 0
        x = text_emb
        for block in self.blocks:
            x = block(x, text_padding, vision_tokens, vision_padding)
        return self.norm(x)


def region_patch_indices(box: BoundingBox, grid: tuple[int, int]) -> list[int]:
    """Row-major indices of patch cells whose intersection with the box has
    strictly positive area. Never empty for a valid box."""
    rows, cols = grid
    if rows < 1 or cols < 1:
        raise ValueError("grid must be at least 1x1")
    x0, y0, x1, y1 = box_extent(box)
    out = []
    for r in range(rows):
        cy0, cy1 = r / rows, (r + 1) / rows
        if min(y1, cy1) - max(y0, cy0) <= 0:
            continue
        for c in range(cols):
            cx0, cx1 = c / cols, (c + 1) / cols
            if min(x1, cx1) - max(x0, cx0) > 0:
                out.append(r * cols + c)
    return out


def encode_region(grid: PatchGrid, box: BoundingBox) -> torch.Tensor:
    """Pseudo-[CLS] (mean of overlapped patch embeddings) + those embeddings."""
    indices = region_patch_indices(box, (grid.rows, grid.cols))
    selected = grid.embeddings[indices]
    pooled = selected.mean(dim=0, keepdim=True)
    return torch.cat([pooled, selected], dim=0)


def project(x: torch.Tensor, projection: nn.Linear) -> torch.Tensor:
    """Bias-free linear map followed by epsilon-guarded L2 normalization."""
    return F.normalize(projection(x), dim=-1, eps=1e-12)


class AlignmentModel(nn.Module):
    """All towers plus projection/matching/MLM heads and both temperatures."""

    def __init__(self, config: ModelConfig):
        super().__init__()
        config.validate()
        self.config = config
        self.vision = VisionEncoder(config)
        self.text = TextEncoder(config)
        self.fusion = FusionEncoder(config)
        self.vision_proj = nn.Linear(config.embed_dim, config.proj_dim, bias=False)
        self.text_proj = nn.Linear(config.embed_dim, config.proj_dim, bias=False)
        self.match_head = nn.Linear(config.embed_dim, 2)
        self.mlm_head = nn.Linear(config.embed_dim, config.vocab_size)
        self.temp_global = TemperatureParam()
        self.temp_region = TemperatureParam()

    def pooled_text(self, token_emb: torch.Tensor, mask: torch.Tensor) -> torch.Tensor:
        """Mean over real token positions."""
        m = mask.to(token_emb.dtype).unsqueeze(-1)
        return (token_emb * m).sum(dim=1) / m.sum(dim=1).clamp_min(1.0)

    def image_tokens(self, patch_tokens: torch.Tensor) -> torch.Tensor:
        """Fusion key/value sequence for whole images: pooled vector + grid."""
        pooled = patch_tokens.mean(dim=1, keepdim=True)
        return torch.cat([pooled, patch_tokens], dim=1)

    def matching_probability(self, text_emb, text_mask, vision_tokens, vision_mask=None):
        """Match probability from the 2-way head on the fused [CLS]."""
        fused = self.fusion(text_emb, text_mask, vision_tokens, vision_mask)
        logits = self.match_head(fused[:, 0])
        return F.softmax(logits, dim=-1)[:, 1]


def encode_image(model: AlignmentModel, image: torch.Tensor) -> PatchGrid:
    """Single-image wrapper returning the patch grid (eval-style forward)."""
    if image.ndim == 3:
        image = image.unsqueeze(0)
    tokens = model.vision(image)[0]
    rows, cols = model.config.grid
    return PatchGrid(embeddings=tokens, rows=rows, cols=cols)


def image_to_tensor(image, dtype=torch.float32) -> torch.Tensor:
    """HxWx3 uint8 array -> (3, H, W) float tensor in [0, 1]."""
    import numpy as np

    arr = np.asarray(image, dtype=np.float32) / 255.0
    return torch.from_numpy(arr).permute(2, 0, 1).to(dtype)


CHECKPOINT_FORMAT = 1


def save_checkpoint(
    path: str | Path,
    model: AlignmentModel,
    vocab: Vocabulary,
    optimizer_state: dict | None = None,
    step: int = 0,
    config_hash: str = "",
    train_config: dict | None = None,
    rng_state: torch.Tensor | None = None,
) -> None:
    """Atomically serialize model, optimizer, schedule position, and config."""
    import io
    import os
    import tempfile

    payload = {
        "format": CHECKPOINT_FORMAT,
        "model_config": asdict(model.config),
        "vocab_tokens": vocab.tokens,
        "model_state": model.state_dict(),
        "optimizer_state": optimizer_state,
        "step": step,
        "config_hash": config_hash,
        "train_config": train_config,
        "torch_rng": rng_state if rng_state is not None else torch.get_rng_state(),
    }
    path = Path(path)
    buf = io.BytesIO()
    torch.save(payload, buf)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=path.name + ".", suffix=".tmp")
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(buf.getvalue())
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def load_checkpoint(path: str | Path) -> dict:
    payload = torch.load(Path(path), map_location="cpu", weights_only=False)
    if payload.get("format") != CHECKPOINT_FORMAT:
        raise ValidationError(f"unsupported checkpoint format {payload.get('format')!r}")
    return payload


def model_from_checkpoint(payload: dict) -> tuple[AlignmentModel, Vocabulary]:
    """Rebuild the model; shape mismatches fail loudly via strict loading."""
    config = ModelConfig(**payload["model_config"])
    vocab = Vocabulary(payload["vocab_tokens"])
    if config.vocab_size != len(vocab):
        raise ValidationError(
            f"checkpoint vocab_size {config.vocab_size} != stored vocabulary {len(vocab)}"
        )
    model = AlignmentModel(config)
    model.load_state_dict(payload["model_state"], strict=True)
    model.eval()
    return model, vocab

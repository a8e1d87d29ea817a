"""Deterministic synthetic pedestrian-like corpus with exact region ground truth.

Each identity is a closed-vocabulary attribute assignment over five body
zones. Records render those attributes as colored, textured rectangles at
known (jittered) positions, so every region-phrase annotation is exact by
construction and retrieval ground truth is the identity label.
"""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import numpy as np
from PIL import Image

from .corpus import BoundingBox, CorpusManifest, CorpusRecord, RegionAnnotation, atomic_write_text


class ConfigurationError(ValueError):
    """Raised when sizes/settings are mutually inconsistent."""


ZONES = ("head", "torso", "legs", "feet", "carried")

ZONE_SHAPES = {
    "head": ("hat", "cap", "hood"),
    "torso": ("shirt", "jacket", "vest"),
    "legs": ("jeans", "shorts", "trousers"),
    "feet": ("boots", "sneakers", "sandals"),
    "carried": ("backpack", "handbag", "suitcase"),
}

COLORS = {
    "red": (204, 32, 32),
    "blue": (32, 64, 204),
    "green": (32, 168, 64),
    "yellow": (228, 208, 40),
    "purple": (140, 44, 190),
    "orange": (240, 132, 28),
    "pink": (238, 118, 170),
    "brown": (128, 80, 40),
}

# Normalized (x0, y0, x1, y1) layout of a centered standing figure.
_BASE_RECTS = {
    "head": (0.375, 0.03, 0.625, 0.21),
    "torso": (0.3125, 0.23, 0.6875, 0.52),
    "legs": (0.34, 0.54, 0.66, 0.80),
    "feet": (0.34, 0.82, 0.66, 0.96),
    "carried": (0.72, 0.32, 0.95, 0.66),
}

CLS_TOKEN = "[CLS]"
PAD_TOKEN = "[PAD]"
MASK_TOKEN = "[MASK]"
UNK_TOKEN = "[UNK]"
SPECIAL_TOKENS = (CLS_TOKEN, PAD_TOKEN, MASK_TOKEN, UNK_TOKEN)
CLS_ID, PAD_ID, MASK_ID, UNK_ID = 0, 1, 2, 3


@dataclass(frozen=True)
class IdentitySpec:
    """One synthetic person: a (shape, color) pick per body zone."""

    identity_id: str
    attributes: dict[str, tuple[str, str]]

    def attribute_key(self) -> tuple:
        return tuple(self.attributes[z] for z in ZONES)

    def fragments(self) -> list[str]:
        return [f"{self.attributes[z][1]} {self.attributes[z][0]}" for z in ZONES]


@dataclass(frozen=True)
class RenderParams:
    """Rendering knobs; image_size must divide evenly into encoder patches."""

    image_size: int = 64
    patch_size: int = 16
    background_seed: int = 0
    jitter_pos: float = 0.02
    jitter_scale: float = 0.08

    def validate(self) -> None:
        if self.image_size <= 0 or self.patch_size <= 0:
            raise ConfigurationError("image_size and patch_size must be positive")
        if self.image_size % self.patch_size != 0:
            raise ConfigurationError(
                f"image_size {self.image_size} not divisible by patch_size {self.patch_size}"
            )


class Vocabulary:
    """Closed token vocabulary; specials occupy indices 0-3."""

    def __init__(self, tokens: list[str]):
        for i, tok in enumerate(SPECIAL_TOKENS):
            if tokens[i] != tok:
                raise ValueError(f"index {i} must be {tok}, got {tokens[i]!r}")
        if len(set(tokens)) != len(tokens):
            raise ValueError("duplicate tokens in vocabulary")
        self._tokens = list(tokens)
        self._index = {tok: i for i, tok in enumerate(tokens)}

    def __len__(self) -> int:
        return len(self._tokens)

    def __contains__(self, token: str) -> bool:
        return token in self._index

    def token(self, index: int) -> str:
        return self._tokens[index]

    def index(self, token: str) -> int:
        return self._index.get(token, UNK_ID)

    @property
    def tokens(self) -> list[str]:
        return list(self._tokens)

    @property
    def num_regular(self) -> int:
        return len(self._tokens) - len(SPECIAL_TOKENS)

    def save(self, path: str | Path) -> None:
        # One non-special token per line; line number = index - 4.
        body = "".join(tok + "\n" for tok in self._tokens[len(SPECIAL_TOKENS):])
        atomic_write_text(path, body)

    @classmethod
    def load(cls, path: str | Path) -> "Vocabulary":
        lines = Path(path).read_text(encoding="utf-8").splitlines()
        return cls(list(SPECIAL_TOKENS) + [ln for ln in lines if ln])

    @classmethod
    def from_tokens(cls, regular_tokens) -> "Vocabulary":
        ordered = sorted(set(regular_tokens) - set(SPECIAL_TOKENS))
        return cls(list(SPECIAL_TOKENS) + ordered)


@dataclass(frozen=True)
class TokenSequence:
    """Fixed-length token ids with an attention mask (1 = real token)."""

    ids: tuple[int, ...]
    mask: tuple[int, ...]

    def __len__(self) -> int:
        return len(self.ids)

    @property
    def num_real(self) -> int:
        return int(sum(self.mask))


def build_vocabulary(manifest: CorpusManifest) -> Vocabulary:
    """Collect every whitespace token from captions and phrases, sorted."""
    if not manifest.records:
        raise ValueError("cannot build a vocabulary from an empty manifest")
    tokens: set[str] = set()
    for record in manifest.records:
        tokens.update(record.caption.split())
        for region in record.regions:
            tokens.update(region.phrase.split())
    return Vocabulary.from_tokens(tokens)


def closed_vocabulary() -> Vocabulary:
    """The full attribute + template vocabulary, independent of which
    identities a particular corpus sampled. Generated corpora share it, so
    models trained on one evaluate cleanly on another."""
    tokens = set(COLORS)
    for shapes in ZONE_SHAPES.values():
        tokens.update(shapes)
    tokens.update("a person with and".split())
    return Vocabulary.from_tokens(tokens)


def tokenize(text: str, vocab: Vocabulary, max_len: int) -> TokenSequence:
    """[CLS] + word ids, truncated to max_len and right-padded with [PAD]."""
    if max_len < 2:
        raise ValueError("max_len must be >= 2")
    ids = [CLS_ID] + [vocab.index(w) for w in text.split()]
    ids = ids[:max_len]
    mask = [1] * len(ids)
    pad = max_len - len(ids)
    return TokenSequence(ids=tuple(ids + [PAD_ID] * pad), mask=tuple(mask + [0] * pad))


def _rng(*entropy: int) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence(entropy))


def sample_identities(
    num_identities: int, seed: int, prefix: str | None = None
) -> list[IdentitySpec]:
    """Draw unique attribute assignments; any two identities differ somewhere."""
    if num_identities < 1:
        raise ValueError("num_identities must be >= 1")
    prefix = f"s{seed}" if prefix is None else prefix
    rng = _rng(seed, 101)
    colors = list(COLORS)
    identities: list[IdentitySpec] = []
    seen: set[tuple] = set()
    attempts = 0
    while len(identities) < num_identities:
        attempts += 1
        if attempts > 1000 * num_identities:
            raise ValueError("attribute space exhausted; reduce num_identities")
        attrs = {
            z: (ZONE_SHAPES[z][int(rng.integers(len(ZONE_SHAPES[z])))],
                colors[int(rng.integers(len(colors)))])
            for z in ZONES
        }
        key = tuple(attrs[z] for z in ZONES)
        if key in seen:
            continue
        seen.add(key)
        identities.append(
            IdentitySpec(identity_id=f"{prefix}-{len(identities):04d}", attributes=attrs)
        )
    return identities


def _jitter_rect(
    base: tuple[float, float, float, float],
    size: int,
    rng: np.random.Generator,
    params: RenderParams,
) -> tuple[int, int, int, int]:
    x0, y0, x1, y1 = base
    cx, cy = (x0 + x1) / 2, (y0 + y1) / 2
    w, h = x1 - x0, y1 - y0
    cx += float(rng.uniform(-params.jitter_pos, params.jitter_pos))
    cy += float(rng.uniform(-params.jitter_pos, params.jitter_pos))
    s = float(rng.uniform(1.0 - params.jitter_scale, 1.0 + params.jitter_scale))
    w, h = w * s, h * s
    px0 = int(round((cx - w / 2) * size))
    py0 = int(round((cy - h / 2) * size))
    px1 = int(round((cx + w / 2) * size))
    py1 = int(round((cy + h / 2) * size))
    px0 = max(0, min(px0, size - 2))
    py0 = max(0, min(py0, size - 2))
    px1 = max(px0 + 2, min(px1, size))
    py1 = max(py0 + 2, min(py1, size))
    return px0, py0, px1, py1


def _paint(img: np.ndarray, rect: tuple[int, int, int, int], rgb, pattern: int) -> None:
    x0, y0, x1, y1 = rect
    color = np.array(rgb, dtype=np.uint8)
    dark = (color * 0.45).astype(np.uint8)
    block = img[y0:y1, x0:x1]
    block[:] = color
    stripe = max(2, img.shape[0] // 16)
    if pattern == 1:
        rows = (np.arange(y0, y1) // stripe) % 2 == 1
        block[rows] = dark
    elif pattern == 2:
        cols = (np.arange(x0, x1) // stripe) % 2 == 1
        block[:, cols] = dark


def render_record(
    identity: IdentitySpec, params: RenderParams, seed: int, record_index: int
) -> tuple[np.ndarray, dict[str, tuple[int, int, int, int]]]:
    """Render one record; pure function of (identity, params, seed, index)."""
    size = params.image_size
    bg_rng = _rng(params.background_seed, 11, record_index)
    img = np.empty((size, size, 3), dtype=np.uint8)
    base = float(bg_rng.uniform(90, 150))
    tint = bg_rng.uniform(-8, 8, size=3)
    noise = bg_rng.normal(0.0, 10.0, size=(size, size, 1))
    img[:] = np.clip(base + tint[None, None, :] + noise, 0, 255).astype(np.uint8)

    layout_rng = _rng(seed, 13, record_index)
    rects: dict[str, tuple[int, int, int, int]] = {}
    for zone in ZONES:
        shape, color = identity.attributes[zone]
        rect = _jitter_rect(_BASE_RECTS[zone], size, layout_rng, params)
        _paint(img, rect, COLORS[color], ZONE_SHAPES[zone].index(shape))
        rects[zone] = rect
    return img, rects


def caption_for(
    identity: IdentitySpec, zone_order: list[int], caption_style: str
) -> tuple[str, list[str]]:
    """Build the caption and the ordered per-zone phrases for a record."""
    frags = identity.fragments()
    ordered = [frags[i] for i in zone_order]
    if caption_style == "full":
        caption = "a person with " + " and ".join(ordered)
    elif caption_style == "regions":
        caption = " ".join(ordered)
    else:
        raise ValueError(f"unknown caption_style {caption_style!r}")
    return caption, ordered


def generate_corpus(
    num_identities: int,
    images_per_identity: int,
    params: RenderParams,
    seed: int,
    out_dir: str | Path,
    split: str = "train",
    identity_prefix: str | None = None,
    caption_style: str = "full",
) -> tuple[CorpusManifest, Vocabulary]:
    """Render a corpus under ``out_dir`` and return (manifest, vocabulary).

    Identical arguments reproduce byte-identical images and manifest content.
    Images land in ``out_dir/images/``; the manifest is returned, not saved.
    """
    if num_identities < 1 or images_per_identity < 1:
        raise ValueError("counts must be >= 1")
    params.validate()
    out_dir = Path(out_dir)
    (out_dir / "images").mkdir(parents=True, exist_ok=True)

    identities = sample_identities(num_identities, seed, identity_prefix)
    size = params.image_size
    records: list[CorpusRecord] = []
    index = 0
    for identity in identities:
        for j in range(images_per_identity):
            img, rects = render_record(identity, params, seed, index)
            order_rng = _rng(seed, 17, index)
            zone_order = [int(i) for i in order_rng.permutation(len(ZONES))]
            caption, phrases = caption_for(identity, zone_order, caption_style)

            regions = []
            for pos, zone_idx in enumerate(zone_order):
                zone = ZONES[zone_idx]
                x0, y0, x1, y1 = rects[zone]
                box = BoundingBox(
                    cx=(x0 + x1) / 2 / size,
                    cy=(y0 + y1) / 2 / size,
                    w=(x1 - x0) / size,
                    h=(y1 - y0) / size,
                )
                regions.append(
                    RegionAnnotation(box=box, phrase=phrases[pos], confidence=1.0)
                )

            record_id = f"{identity.identity_id}-{j:03d}"
            image_ref = f"images/{record_id}.png"
            Image.fromarray(img).save(out_dir / image_ref, format="PNG")
            records.append(
                CorpusRecord(
                    record_id=record_id,
                    image_ref=image_ref,
                    caption=caption,
                    regions=tuple(regions),
                    identity_id=identity.identity_id,
                )
            )
            index += 1

    manifest = CorpusManifest(records=records, split=split, vocab_ref="vocab.txt")
    manifest.validate(base_dir=out_dir)
    return manifest, closed_vocabulary()

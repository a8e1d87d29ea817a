"""Corpus curation: quality filters, text augmentation, region annotation.

Filters are pure per-record predicates: kept records pass through unchanged,
and every decision lands in a FilterReport. External tools (pose detector,
open-set region detector) are interfaces; deterministic scripted stubs ship
in-repo and an HTTP adapter lets real tools plug in later.
"""

from __future__ import annotations

import base64
import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Protocol

import numpy as np
import requests
from PIL import Image

from .corpus import BoundingBox, CorpusRecord, RegionAnnotation, ValidationError

logger = logging.getLogger(__name__)

MAX_KEYPOINTS = 18  # pose-skeleton joint count upper bound


class ImageFormatError(ValueError):
    """Input raster is not 3-channel 8-bit RGB."""


@dataclass
class FilterReport:
    """Outcome of one filter pass over a record list."""

    filter_name: str
    input_count: int = 0
    kept_count: int = 0
    rejections: dict[str, int] = field(default_factory=dict)
    decisions: dict[str, str] = field(default_factory=dict)  # record_id -> "kept" | reason

    def keep(self, record_id: str) -> None:
        self.decisions[record_id] = "kept"
        self.kept_count += 1

    def reject(self, record_id: str, reason: str) -> None:
        self.decisions[record_id] = reason
        self.rejections[reason] = self.rejections.get(reason, 0) + 1

    def check(self) -> None:
        total = self.kept_count + sum(self.rejections.values())
        if total != self.input_count or len(self.decisions) != self.input_count:
            raise AssertionError("filter report does not account for every record exactly once")

    def to_dict(self) -> dict:
        return {
            "filter": self.filter_name,
            "input": self.input_count,
            "kept": self.kept_count,
            "rejections": dict(sorted(self.rejections.items())),
            "decisions": self.decisions,
        }


@dataclass(frozen=True)
class KeypointResult:
    record_id: str
    count: int

    def __post_init__(self):
        if not (0 <= self.count <= MAX_KEYPOINTS):
            raise ValidationError(
                f"keypoint count {self.count} outside [0, {MAX_KEYPOINTS}]", self.record_id
            )


@dataclass(frozen=True)
class DetectorConfig:
    """Open-set detector thresholds; both default to 0.35."""

    text_threshold: float = 0.35
    box_threshold: float = 0.35

    def __post_init__(self):
        for name in ("text_threshold", "box_threshold"):
            v = getattr(self, name)
            if not (0.0 < v < 1.0):
                raise ValidationError(f"{name} {v} outside (0, 1)")


@dataclass(frozen=True)
class RegionCandidate:
    """One detector proposal. ``text_score`` falls back to ``score`` when absent."""

    box: BoundingBox
    phrase: str
    score: float
    text_score: float | None = None


class KeypointProvider(Protocol):
    def keypoints(self, record: CorpusRecord, image_path: Path) -> KeypointResult: ...


class RegionDetector(Protocol):
    def detect(self, image: np.ndarray, caption: str) -> list[RegionCandidate]: ...


def load_image(path: str | Path) -> np.ndarray:
    """Load an 8-bit RGB raster as an HxWx3 uint8 array."""
    with Image.open(path) as img:
        if img.mode != "RGB":
            raise ImageFormatError(f"{path}: expected RGB image, got mode {img.mode!r}")
        return np.asarray(img, dtype=np.uint8)


def grayscale_statistic(image: np.ndarray) -> float:
    """Mean over pixels of the population variance of (R-G, G-B, R-B).

    Zero exactly when R = G = B everywhere; grows with chromaticity and is
    invariant under a channel-uniform brightness shift.
    """
    if image.ndim != 3 or image.shape[2] != 3:
        raise ImageFormatError(f"expected HxWx3 array, got shape {image.shape}")
    chan = image.astype(np.float64)
    diffs = np.stack(
        [chan[..., 0] - chan[..., 1], chan[..., 1] - chan[..., 2], chan[..., 0] - chan[..., 2]],
        axis=-1,
    )
    return float(diffs.var(axis=-1).mean())


def filter_grayscale(
    records: list[CorpusRecord], threshold: float, base_dir: str | Path
) -> tuple[list[CorpusRecord], FilterReport]:
    """Reject records whose grayscale statistic is strictly below ``threshold``."""
    if threshold < 0:
        raise ValueError("threshold must be >= 0")
    base = Path(base_dir)
    report = FilterReport("grayscale", input_count=len(records))
    kept = []
    for record in records:
        try:
            stat = grayscale_statistic(load_image(base / record.image_ref))
        except ImageFormatError:
            report.reject(record.record_id, "format_error")
            continue
        except OSError:
            report.reject(record.record_id, "io_error")
            continue
        if stat < threshold:
            report.reject(record.record_id, "grayscale")
        else:
            report.keep(record.record_id)
            kept.append(record)
    report.check()
    return kept, report


def filter_keypoints(
    records: list[CorpusRecord],
    detector: KeypointProvider,
    min_count: int = 8,
    base_dir: str | Path = ".",
) -> tuple[list[CorpusRecord], FilterReport]:
    """Reject records whose detected keypoint count is below ``min_count``."""
    base = Path(base_dir)
    report = FilterReport("keypoints", input_count=len(records))
    kept = []
    for record in records:
        try:
            result = detector.keypoints(record, base / record.image_ref)
        except Exception:
            report.reject(record.record_id, "detector_error")
            continue
        if result.count < min_count:
            report.reject(record.record_id, "keypoints")
        else:
            report.keep(record.record_id)
            kept.append(record)
    report.check()
    return kept, report


def filter_file_size(
    records: list[CorpusRecord], min_bytes: int, base_dir: str | Path
) -> tuple[list[CorpusRecord], FilterReport]:
    """Optional guard on compressed file size; disabled upstream when min_bytes = 0."""
    base = Path(base_dir)
    report = FilterReport("file_size", input_count=len(records))
    kept = []
    for record in records:
        try:
            size = (base / record.image_ref).stat().st_size
        except OSError:
            report.reject(record.record_id, "io_error")
            continue
        if size < min_bytes:
            report.reject(record.record_id, "file_size")
        else:
            report.keep(record.record_id)
            kept.append(record)
    report.check()
    return kept, report


_EDA_OPS = ("synonym_replacement", "random_insertion", "random_swap", "random_deletion")


def augment_text(
    caption: str,
    n_variants: int = 20,
    seed: int = 0,
    synonym_table: dict[str, list[str]] | None = None,
    alpha: float = 0.1,
) -> list[str]:
    """Produce ``n_variants`` lightweight edits of ``caption``.

    Each variant applies one randomly chosen edit op with n = floor(alpha *
    word_count) edits, so alpha = 0 returns exact copies and deletion can
    never remove more than floor(alpha * len) words.
    """
    if not caption:
        raise ValueError("caption must be non-empty")
    if n_variants < 1:
        raise ValueError("n_variants must be >= 1")
    table = synonym_table or {}
    variants = []
    for v in range(n_variants):
        rng = np.random.default_rng(np.random.SeedSequence((seed, 41, v)))
        words = caption.split()
        n_edits = int(alpha * len(words))
        op = _EDA_OPS[int(rng.integers(len(_EDA_OPS)))]
        if n_edits > 0:
            words = _apply_eda_op(words, op, n_edits, table, rng)
        variants.append(" ".join(words))
    return variants


def _apply_eda_op(words, op, n_edits, table, rng):
    words = list(words)
    if op == "synonym_replacement":
        candidates = [i for i, w in enumerate(words) if table.get(w)]
        rng.shuffle(candidates)
        for i in candidates[:n_edits]:
            options = table[words[i]]
            words[i] = options[int(rng.integers(len(options)))]
    elif op == "random_insertion":
        sources = [w for w in words if table.get(w)]
        for _ in range(n_edits):
            if not sources:
                break
            src = sources[int(rng.integers(len(sources)))]
            options = table[src]
            pos = int(rng.integers(len(words) + 1))
            words.insert(pos, options[int(rng.integers(len(options)))])
    elif op == "random_swap":
        for _ in range(n_edits):
            if len(words) < 2:
                break
            i, j = rng.choice(len(words), size=2, replace=False)
            words[int(i)], words[int(j)] = words[int(j)], words[int(i)]
    elif op == "random_deletion":
        n_delete = min(n_edits, len(words) - 1)
        if n_delete > 0:
            drop = set(int(i) for i in rng.choice(len(words), size=n_delete, replace=False))
            words = [w for i, w in enumerate(words) if i not in drop]
    return words


def annotate_regions(
    records: list[CorpusRecord],
    detector: RegionDetector,
    config: DetectorConfig,
    base_dir: str | Path,
) -> list[CorpusRecord]:
    """Attach detector candidates passing both thresholds as region annotations.

    Detector failure on a record passes it through with M = 0 and a warning;
    records may legitimately end up with no regions.
    """
    base = Path(base_dir)
    out = []
    for record in records:
        try:
            image = load_image(base / record.image_ref)
            candidates = detector.detect(image, record.caption)
        except Exception as exc:
            logger.warning("region detector failed on %s: %s", record.record_id, exc)
            out.append(
                CorpusRecord(
                    record_id=record.record_id,
                    image_ref=record.image_ref,
                    caption=record.caption,
                    regions=(),
                    identity_id=record.identity_id,
                )
            )
            continue
        regions = []
        for cand in candidates:
            text_score = cand.score if cand.text_score is None else cand.text_score
            if cand.score >= config.box_threshold and text_score >= config.text_threshold:
                regions.append(
                    RegionAnnotation(box=cand.box, phrase=cand.phrase, confidence=cand.score)
                )
        out.append(
            CorpusRecord(
                record_id=record.record_id,
                image_ref=record.image_ref,
                caption=record.caption,
                regions=tuple(regions),
                identity_id=record.identity_id,
            )
        )
    return out


class ScriptedKeypointProvider:
    """Deterministic stub: counts per record_id with an optional default."""

    def __init__(self, counts: dict[str, int], default: int | None = None):
        self.counts = counts
        self.default = default

    def keypoints(self, record: CorpusRecord, image_path: Path) -> KeypointResult:
        if record.record_id in self.counts:
            return KeypointResult(record.record_id, int(self.counts[record.record_id]))
        if self.default is None:
            raise KeyError(f"no keypoint count scripted for {record.record_id}")
        return KeypointResult(record.record_id, int(self.default))


class ScriptedRegionDetector:
    """Deterministic stub keyed by caption; '*' supplies a fallback entry."""

    def __init__(self, candidates: dict[str, list[RegionCandidate]]):
        self.candidates = candidates

    def detect(self, image: np.ndarray, caption: str) -> list[RegionCandidate]:
        if caption in self.candidates:
            return list(self.candidates[caption])
        if "*" in self.candidates:
            return list(self.candidates["*"])
        return []

    @classmethod
    def from_json_obj(cls, obj: dict) -> "ScriptedRegionDetector":
        table = {}
        for caption, items in obj.items():
            cands = []
            for it in items:
                cx, cy, w, h = (float(v) for v in it["bbox"])
                cands.append(
                    RegionCandidate(
                        box=BoundingBox(cx, cy, w, h),
                        phrase=str(it["phrase"]),
                        score=float(it["score"]),
                        text_score=(
                            float(it["text_score"]) if it.get("text_score") is not None else None
                        ),
                    )
                )
            table[caption] = cands
        return cls(table)


class HttpRegionDetector:
    """Adapter for a remote open-set detector.

    Request: POST JSON {"caption": str, "image_png_b64": str}.
    Response: JSON list of {"bbox": [cx, cy, w, h], "phrase": str,
    "score": float, "text_score": float (optional)}.
    """

    def __init__(self, endpoint: str, timeout: float = 30.0):
        self.endpoint = endpoint
        self.timeout = timeout

    def detect(self, image: np.ndarray, caption: str) -> list[RegionCandidate]:
        import io

        buf = io.BytesIO()
        Image.fromarray(image).save(buf, format="PNG")
        payload = {
            "caption": caption,
            "image_png_b64": base64.b64encode(buf.getvalue()).decode("ascii"),
        }
        resp = requests.post(self.endpoint, json=payload, timeout=self.timeout)
        resp.raise_for_status()
        out = []
        for it in resp.json():
            cx, cy, w, h = (float(v) for v in it["bbox"])
            out.append(
                RegionCandidate(
                    box=BoundingBox(cx, cy, w, h),
                    phrase=str(it["phrase"]),
                    score=float(it["score"]),
                    text_score=(
                        float(it["text_score"]) if it.get("text_score") is not None else None
                    ),
                )
            )
        return out

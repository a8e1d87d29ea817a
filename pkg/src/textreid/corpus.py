"""Data model and manifest I/O for region-annotated image-text corpora.

A corpus is a line-delimited UTF-8 manifest (one JSON object per line) plus
lossless 8-bit RGB raster files referenced by relative path. The first line
is a header carrying ``schema_version``, the split label, and an optional
vocabulary reference; every following line is one record.
"""

from __future__ import annotations

import json
import os
import tempfile
from dataclasses import dataclass, field
from pathlib import Path

SCHEMA_VERSION = 1
SPLITS = ("train", "val", "test")


class CorpusError(Exception):
    """Base class for corpus data-model errors."""


class ManifestParseError(CorpusError):
    """A manifest line could not be parsed."""

    def __init__(self, path, line_no: int, message: str):
        self.path = str(path)
        self.line_no = line_no
        super().__init__(f"{path}:{line_no}: {message}")


class ValidationError(CorpusError):
    """A record or box violates a data-model invariant."""

    def __init__(self, message: str, record_id: str | None = None, field_name: str | None = None):
        self.record_id = record_id
        self.field_name = field_name
        prefix = ""
        if record_id is not None:
            prefix = f"record {record_id!r}"
            if field_name is not None:
                prefix += f", field {field_name!r}"
            prefix += ": "
        super().__init__(prefix + message)


@dataclass(frozen=True)
class BoundingBox:
    """Normalized center/size box: (cx, cy) in [0, 1], (w, h) in (0, 1].

    The whole-image box is exactly (0.5, 0.5, 1, 1). Boxes may extend past
    the image edge; the derived extent is clipped and must keep positive area.
    """

    cx: float
    cy: float
    w: float
    h: float

    def validate(self, record_id: str | None = None) -> None:
        if not (0.0 <= self.cx <= 1.0 and 0.0 <= self.cy <= 1.0):
            raise ValidationError(
                f"box center ({self.cx}, {self.cy}) outside [0, 1]", record_id, "bbox"
            )
        if not (0.0 < self.w <= 1.0 and 0.0 < self.h <= 1.0):
            raise ValidationError(
                f"box size ({self.w}, {self.h}) outside (0, 1]", record_id, "bbox"
            )
        x0 = max(0.0, self.cx - self.w / 2.0)
        x1 = min(1.0, self.cx + self.w / 2.0)
        y0 = max(0.0, self.cy - self.h / 2.0)
        y1 = min(1.0, self.cy + self.h / 2.0)
        if not (x0 < x1 and y0 < y1):
            raise ValidationError("clipped box area is zero", record_id, "bbox")

    @property
    def is_full_image(self) -> bool:
        return (self.cx, self.cy, self.w, self.h) == (0.5, 0.5, 1.0, 1.0)


FULL_IMAGE_BOX = BoundingBox(0.5, 0.5, 1.0, 1.0)


def box_extent(box: BoundingBox) -> tuple[float, float, float, float]:
    """Return the clipped axis-aligned extent (x0, y0, x1, y1) of ``box``.

    Raises ValidationError for degenerate boxes whose clipped area is zero.
    """
    box.validate()
    x0 = max(0.0, box.cx - box.w / 2.0)
    x1 = min(1.0, box.cx + box.w / 2.0)
    y0 = max(0.0, box.cy - box.h / 2.0)
    y1 = min(1.0, box.cy + box.h / 2.0)
    return (x0, y0, x1, y1)


@dataclass(frozen=True)
class RegionAnnotation:
    """A bounding-boxed image region plus the phrase describing it."""

    box: BoundingBox
    phrase: str
    confidence: float

    def validate(self, record_id: str | None = None) -> None:
        self.box.validate(record_id)
        if not self.phrase:
            raise ValidationError("region phrase is empty", record_id, "phrase")
        if not (0.0 <= self.confidence <= 1.0):
            raise ValidationError(
                f"confidence {self.confidence} outside [0, 1]", record_id, "confidence"
            )


@dataclass(frozen=True)
class CorpusRecord:
    """One image-text pair with M >= 0 region-phrase annotations.

    ``identity_id`` is a synthetic-corpus extension used only to define
    retrieval ground truth; curated corpora may leave it unset.
    """

    record_id: str
    image_ref: str
    caption: str
    regions: tuple[RegionAnnotation, ...] = ()
    identity_id: str | None = None

    def validate(self) -> None:
        if not self.record_id:
            raise ValidationError("record_id is empty", self.record_id, "id")
        if not self.image_ref:
            raise ValidationError("image_ref is empty", self.record_id, "image")
        for region in self.regions:
            region.validate(self.record_id)


@dataclass
class CorpusManifest:
    """An ordered collection of records plus split/vocab metadata."""

    records: list[CorpusRecord] = field(default_factory=list)
    split: str = "train"
    vocab_ref: str | None = None
    schema_version: int = SCHEMA_VERSION

    def validate(self, base_dir: str | Path | None = None) -> None:
        if self.split not in SPLITS:
            raise ValidationError(f"split {self.split!r} not one of {SPLITS}")
        seen: set[str] = set()
        for record in self.records:
            record.validate()
            if record.record_id in seen:
                raise ValidationError("duplicate record_id", record.record_id, "id")
            seen.add(record.record_id)
        if base_dir is not None:
            base = Path(base_dir)
            for record in self.records:
                if not (base / record.image_ref).is_file():
                    raise ValidationError(
                        f"image_ref {record.image_ref!r} does not resolve under {base}",
                        record.record_id,
                        "image",
                    )

    def image_path(self, record: CorpusRecord, base_dir: str | Path) -> Path:
        return Path(base_dir) / record.image_ref


def _record_to_obj(record: CorpusRecord) -> dict:
    obj: dict = {
        "id": record.record_id,
        "image": record.image_ref,
        "caption": record.caption,
        "regions": [
            {
                "bbox": [r.box.cx, r.box.cy, r.box.w, r.box.h],
                "phrase": r.phrase,
                "confidence": r.confidence,
            }
            for r in record.regions
        ],
    }
    if record.identity_id is not None:
        obj["identity"] = record.identity_id
    return obj


def _record_from_obj(obj: dict, path, line_no: int) -> CorpusRecord:
    try:
        regions = []
        for r in obj.get("regions") or []:
            cx, cy, w, h = (float(v) for v in r["bbox"])
            regions.append(
                RegionAnnotation(
                    box=BoundingBox(cx, cy, w, h),
                    phrase=str(r["phrase"]),
                    confidence=float(r["confidence"]),
                )
            )
        return CorpusRecord(
            record_id=str(obj["id"]),
            image_ref=str(obj["image"]),
            caption=str(obj["caption"]),
            regions=tuple(regions),
            identity_id=(str(obj["identity"]) if "identity" in obj else None),
        )
    except (KeyError, TypeError, ValueError) as exc:
        raise ManifestParseError(path, line_no, f"malformed record: {exc}") from exc


def _dumps(obj: dict) -> str:
    # Compact, UTF-8-preserving, key order as constructed: the byte-exact
    # round-trip contract depends on this exact serialization.
    return json.dumps(obj, ensure_ascii=False, separators=(",", ":"))


def save_manifest(manifest: CorpusManifest, path: str | Path) -> None:
    """Write ``manifest`` atomically; load_manifest(save_manifest(m)) == m."""
    manifest.validate()
    path = Path(path)
    header: dict = {"schema_version": manifest.schema_version, "split": manifest.split}
    if manifest.vocab_ref is not None:
        header["vocab"] = manifest.vocab_ref
    lines = [_dumps(header)]
    lines.extend(_dumps(_record_to_obj(r)) for r in manifest.records)
    atomic_write_text(path, "\n".join(lines) + "\n")


def load_manifest(path: str | Path, check_images: bool = True) -> CorpusManifest:
    """Parse and validate a line-delimited manifest file.

    Record order equals file order. Parse failures carry the line number;
    invariant violations name the offending record and field.
    """
    path = Path(path)
    try:
        text = path.read_text(encoding="utf-8")
    except OSError as exc:
        raise CorpusError(f"cannot read manifest {path}: {exc}") from exc

    records: list[CorpusRecord] = []
    split = "train"
    vocab_ref = None
    schema_version = SCHEMA_VERSION
    first_content = True
    for line_no, line in enumerate(text.splitlines(), start=1):
        if not line.strip():
            continue
        try:
            obj = json.loads(line)
        except json.JSONDecodeError as exc:
            raise ManifestParseError(path, line_no, f"invalid JSON: {exc.msg}") from exc
        if not isinstance(obj, dict):
            raise ManifestParseError(path, line_no, "line is not a JSON object")
        if first_content and "schema_version" in obj:
            first_content = False
            schema_version = int(obj["schema_version"])
            split = str(obj.get("split", "train"))
            vocab_ref = str(obj["vocab"]) if "vocab" in obj else None
            continue
        first_content = False
        records.append(_record_from_obj(obj, path, line_no))

    manifest = CorpusManifest(
        records=records, split=split, vocab_ref=vocab_ref, schema_version=schema_version
    )
    manifest.validate(base_dir=path.parent if check_images else None)
    return manifest


def atomic_write_text(path: str | Path, text: str) -> None:
    """Write text via a temp file + rename so failures never leave partial files."""
    path = Path(path)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=path.name + ".", suffix=".tmp")
    try:
        with os.fdopen(fd, "w", encoding="utf-8") as fh:
            fh.write(text)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def atomic_write_bytes(path: str | Path, data: bytes) -> None:
    """Binary twin of atomic_write_text."""
    path = Path(path)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=path.name + ".", suffix=".tmp")
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(data)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise

"""Desk-scale text-based person retrieval with region-phrase alignment."""

from .corpus import (
    FULL_IMAGE_BOX,
    BoundingBox,
    CorpusManifest,
    CorpusRecord,
    RegionAnnotation,
    box_extent,
    load_manifest,
    save_manifest,
)
from .synth import RenderParams, TokenSequence, Vocabulary, build_vocabulary, generate_corpus, tokenize

__version__ = "0.1.0"

__all__ = [
    "BoundingBox",
    "CorpusManifest",
    "CorpusRecord",
    "FULL_IMAGE_BOX",
    "RegionAnnotation",
    "RenderParams",
    "TokenSequence",
    "Vocabulary",
    "box_extent",
    "build_vocabulary",
    "generate_corpus",
    "load_manifest",
    "save_manifest",
    "tokenize",
]

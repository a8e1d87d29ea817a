"""Command-line entry point: gen-corpus, curate, train, evaluate, fid.

Exit codes: 0 success, 1 usage error, 2 validation/config error, 3 runtime
failure. Manifests, checkpoints, and reports are written atomically, so a
nonzero exit never leaves a partially-written artifact. Stdout is a human
summary; files are the machine interface. Setting TEXTREID_OUT_ROOT re-roots
relative output paths.
"""

from __future__ import annotations

import argparse
import dataclasses
import json
import os
import sys
from dataclasses import dataclass, replace
from pathlib import Path

import numpy as np
import torch

from .config import apply_to_dataclass, load_kv_config, split_prefixed
from .corpus import (
    CorpusError,
    CorpusManifest,
    ManifestParseError,
    ValidationError,
    atomic_write_text,
    load_manifest,
    save_manifest,
)
from .curation import (
    DetectorConfig,
    ImageFormatError,
    ScriptedKeypointProvider,
    ScriptedRegionDetector,
    annotate_regions,
    augment_text,
    filter_file_size,
    filter_grayscale,
    filter_keypoints,
)
from .encoders import ModelConfig, load_checkpoint, model_from_checkpoint
from .evaluation import corpus_fid, evaluate
from .synth import (
    ConfigurationError,
    RenderParams,
    Vocabulary,
    build_vocabulary,
    generate_corpus,
)
from .training import (
    ConfigMismatchError,
    TrainConfig,
    TrainingDiverged,
    paper_profile,
    train,
)

EXIT_OK = 0
EXIT_USAGE = 1
EXIT_VALIDATION = 2
EXIT_RUNTIME = 3

OUT_ROOT_ENV = "TEXTREID_OUT_ROOT"


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):  # argparse would sys.exit(2); we own the codes
        raise UsageError(message)


@dataclass(frozen=True)
class CurateSettings:
    """Curation stage configuration (config-file keys match field names)."""

    grayscale_threshold: float = 2.0
    keypoint_min: int = 8
    text_threshold: float = 0.35
    box_threshold: float = 0.35
    eda_alpha: float = 0.1
    eda_variants: int = 0
    eda_seed: int = 0
    min_file_bytes: int = 0


def _out_path(raw: str) -> Path:
    path = Path(raw)
    root = os.environ.get(OUT_ROOT_ENV)
    if root and not path.is_absolute():
        return Path(root) / path
    return path


def build_parser() -> _Parser:
    parser = _Parser(prog="textreid", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen-corpus", help="render a synthetic region-annotated corpus")
    p.add_argument("--identities", type=int, required=True)
    p.add_argument("--per-identity", type=int, required=True)
    p.add_argument("--size", type=int, default=64)
    p.add_argument("--patch-size", type=int, default=16)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True)
    p.add_argument("--split", default="train", choices=["train", "val", "test"])
    p.add_argument("--prefix", default=None, help="identity id prefix (default s<seed>)")
    p.add_argument("--caption-style", default="full", choices=["full", "regions"])
    p.add_argument("--bg-seed", type=int, default=0)
    p.add_argument("--jitter-pos", type=float, default=0.02)
    p.add_argument("--jitter-scale", type=float, default=0.08)
    p.set_defaults(func=cmd_gen_corpus)

    p = sub.add_parser("curate", help="filter / augment / annotate a corpus")
    p.add_argument("--in", dest="in_manifest", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--config", default=None, help="key = value settings file")
    p.add_argument("--report", default=None, help="filter report path (default <out>.report.json)")
    p.add_argument("--keypoints", default=None, help="JSON {record_id: keypoint count}")
    p.add_argument("--annotations", default=None,
                   help="JSON {caption: [{bbox, phrase, score[, text_score]}]}")
    p.add_argument("--synonyms", default=None, help="JSON {word: [synonyms]}")
    p.add_argument("--grayscale-threshold", type=float, default=None)
    p.add_argument("--keypoint-min", type=int, default=None)
    p.add_argument("--text-threshold", type=float, default=None)
    p.add_argument("--box-threshold", type=float, default=None)
    p.add_argument("--eda-alpha", type=float, default=None)
    p.add_argument("--eda-variants", type=int, default=None)
    p.add_argument("--eda-seed", type=int, default=None)
    p.add_argument("--min-file-bytes", type=int, default=None)
    p.set_defaults(func=cmd_curate)

    p = sub.add_parser("train", help="pretrain or fine-tune the alignment model")
    p.add_argument("--manifest", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--config", default=None, help="key = value file; model_* keys set the model")
    p.add_argument("--vocab", default=None, help="vocabulary file (default: manifest's)")
    p.add_argument("--mode", default=None, choices=["pretrain", "finetune"])
    p.add_argument("--profile", default=None, choices=["paper"])
    p.add_argument("--seed", type=int, default=None)
    p.add_argument("--epochs", type=int, default=None)
    p.add_argument("--batch-size", type=int, default=None)
    p.add_argument("--beta", type=float, default=None)
    p.add_argument("--peak-lr", type=float, default=None)
    p.add_argument("--final-lr", type=float, default=None)
    p.add_argument("--warmup", type=int, default=None)
    p.add_argument("--image-size", type=int, default=None)
    p.add_argument("--patch-size", type=int, default=None)
    p.add_argument("--max-text-len", type=int, default=None)
    p.add_argument("--checkpoint-every", type=int, default=None)
    p.add_argument("--resume", default=None, help="continue from a checkpoint")
    p.add_argument("--init", default=None, help="warm-start weights from a checkpoint")
    p.add_argument("--workers", type=int, default=None)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("evaluate", help="text-to-image retrieval metrics")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--manifest", required=True)
    p.add_argument("--k", type=int, default=512)
    p.add_argument("--rerank", action=argparse.BooleanOptionalAction, default=True)
    p.add_argument("--out", default=None, help="report JSON path")
    p.add_argument("--workers", type=int, default=None)
    p.set_defaults(func=cmd_evaluate)

    p = sub.add_parser("fid", help="feature distance between two corpora")
    p.add_argument("--manifest-a", required=True)
    p.add_argument("--manifest-b", required=True)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--out", default=None)
    p.add_argument("--workers", type=int, default=None)
    p.set_defaults(func=cmd_fid)

    return parser


def cmd_gen_corpus(args) -> int:
    if args.identities < 1 or args.per_identity < 1:
        raise UsageError("--identities and --per-identity must be >= 1")
    out = _out_path(args.out)
    params = RenderParams(
        image_size=args.size,
        patch_size=args.patch_size,
        background_seed=args.bg_seed,
        jitter_pos=args.jitter_pos,
        jitter_scale=args.jitter_scale,
    )
    manifest, vocab = generate_corpus(
        args.identities, args.per_identity, params, args.seed, out,
        split=args.split, identity_prefix=args.prefix, caption_style=args.caption_style,
    )
    save_manifest(manifest, out / "manifest.jsonl")
    vocab.save(out / "vocab.txt")
    print(f"wrote {len(manifest.records)} records under {out}")
    return EXIT_OK


def _load_json(path: str) -> dict:
    return json.loads(Path(path).read_text(encoding="utf-8"))


def cmd_curate(args) -> int:
    settings = CurateSettings()
    if args.config:
        settings = apply_to_dataclass(settings, load_kv_config(args.config))
    overrides = {
        "grayscale_threshold": args.grayscale_threshold,
        "keypoint_min": args.keypoint_min,
        "text_threshold": args.text_threshold,
        "box_threshold": args.box_threshold,
        "eda_alpha": args.eda_alpha,
        "eda_variants": args.eda_variants,
        "eda_seed": args.eda_seed,
        "min_file_bytes": args.min_file_bytes,
    }
    settings = replace(settings, **{k: v for k, v in overrides.items() if v is not None})

    in_path = Path(args.in_manifest)
    manifest = load_manifest(in_path)
    in_dir = in_path.parent
    out_path = _out_path(args.out)
    out_dir = out_path.parent
    out_dir.mkdir(parents=True, exist_ok=True)

    records = list(manifest.records)
    stages = []
    if settings.min_file_bytes > 0:
        records, report = filter_file_size(records, settings.min_file_bytes, in_dir)
        stages.append(report.to_dict())
    records, report = filter_grayscale(records, settings.grayscale_threshold, in_dir)
    stages.append(report.to_dict())
    if args.keypoints:
        provider = ScriptedKeypointProvider(
            {str(k): int(v) for k, v in _load_json(args.keypoints).items()}
        )
        records, report = filter_keypoints(records, provider, settings.keypoint_min, in_dir)
        stages.append(report.to_dict())
    if args.annotations:
        detector = ScriptedRegionDetector.from_json_obj(_load_json(args.annotations))
        det_config = DetectorConfig(
            text_threshold=settings.text_threshold, box_threshold=settings.box_threshold
        )
        records = annotate_regions(records, detector, det_config, in_dir)

    synonyms = None
    if args.synonyms:
        synonyms = {str(k): [str(s) for s in v] for k, v in _load_json(args.synonyms).items()}
    if settings.eda_variants > 0:
        expanded = []
        for idx, record in enumerate(records):
            rec_seed = int(np.random.SeedSequence((settings.eda_seed, idx)).generate_state(1)[0])
            variants = augment_text(
                record.caption, settings.eda_variants, seed=rec_seed,
                synonym_table=synonyms, alpha=settings.eda_alpha,
            )
            for k, caption in enumerate(variants):
                expanded.append(
                    dataclasses.replace(
                        record, record_id=f"{record.record_id}-v{k:02d}", caption=caption
                    )
                )
        records = expanded

    # Re-root image references if the output manifest lives elsewhere.
    if out_dir.resolve() != in_dir.resolve():
        records = [
            dataclasses.replace(
                r, image_ref=os.path.relpath((in_dir / r.image_ref).resolve(), out_dir.resolve())
            )
            for r in records
        ]

    out_manifest = CorpusManifest(
        records=records, split=manifest.split,
        vocab_ref=manifest.vocab_ref, schema_version=manifest.schema_version,
    )
    vocab = _carry_vocabulary(manifest, in_dir, out_manifest, out_dir)
    save_manifest(out_manifest, out_path)
    if vocab is not None:
        vocab.save(out_dir / out_manifest.vocab_ref)

    report_path = Path(args.report) if args.report else Path(str(out_path) + ".report.json")
    summary = {
        "input": len(manifest.records),
        "kept": len(records),
        "settings": dataclasses.asdict(settings),
        "stages": stages,
    }
    atomic_write_text(report_path, json.dumps(summary, indent=2) + "\n")
    print(f"kept {len(records)} of {len(manifest.records)} records -> {out_path}")
    return EXIT_OK


def _carry_vocabulary(in_manifest, in_dir, out_manifest, out_dir) -> Vocabulary | None:
    """Keep the input vocabulary stable, extending it only for new tokens."""
    if not out_manifest.records:
        return None
    out_manifest.vocab_ref = out_manifest.vocab_ref or "vocab.txt"
    tokens: set[str] = set()
    for record in out_manifest.records:
        tokens.update(record.caption.split())
        for region in record.regions:
            tokens.update(region.phrase.split())
    if in_manifest.vocab_ref and (in_dir / in_manifest.vocab_ref).is_file():
        base = Vocabulary.load(in_dir / in_manifest.vocab_ref)
        tokens.update(base.tokens[4:])
    return Vocabulary.from_tokens(tokens)


def cmd_train(args) -> int:
    if args.workers:
        torch.set_num_threads(args.workers)
    tc = TrainConfig()
    mc = ModelConfig()
    if args.profile == "paper":
        tc = paper_profile(tc)
        mc = replace(mc, max_text_len=56)
    if args.config:
        kv = load_kv_config(args.config)
        model_kv, train_kv = split_prefixed(kv, "model_")
        tc = apply_to_dataclass(tc, train_kv)
        mc = apply_to_dataclass(mc, model_kv)
    flag_map = {
        "mode": args.mode, "seed": args.seed, "epochs": args.epochs,
        "batch_size": args.batch_size, "beta": args.beta,
        "peak_lr": args.peak_lr, "final_lr": args.final_lr,
        "warmup_steps": args.warmup, "checkpoint_every": args.checkpoint_every,
    }
    tc = replace(tc, **{k: v for k, v in flag_map.items() if v is not None})
    model_flags = {
        "image_size": args.image_size, "patch_size": args.patch_size,
        "max_text_len": args.max_text_len,
    }
    mc = replace(mc, **{k: v for k, v in model_flags.items() if v is not None})

    manifest_path = Path(args.manifest)
    manifest = load_manifest(manifest_path)
    vocab = _resolve_vocab(args.vocab, manifest, manifest_path.parent)
    mc = replace(mc, vocab_size=len(vocab))

    out_dir = _out_path(args.out)
    result = train(
        manifest, manifest_path.parent, vocab, mc, tc, out_dir,
        resume_from=args.resume, init_from=args.init,
    )
    print(f"trained {result.steps} steps; final loss {result.final_loss:.6f}")
    print(f"checkpoint: {result.checkpoint_path}")
    return EXIT_OK


def _resolve_vocab(vocab_flag, manifest, manifest_dir) -> Vocabulary:
    if vocab_flag:
        return Vocabulary.load(vocab_flag)
    if manifest.vocab_ref and (manifest_dir / manifest.vocab_ref).is_file():
        return Vocabulary.load(manifest_dir / manifest.vocab_ref)
    return build_vocabulary(manifest)


def _check_vocab_consistency(checkpoint_vocab: Vocabulary, manifest, manifest_dir) -> None:
    if manifest.vocab_ref and (manifest_dir / manifest.vocab_ref).is_file():
        corpus_vocab = Vocabulary.load(manifest_dir / manifest.vocab_ref)
        if corpus_vocab.tokens != checkpoint_vocab.tokens:
            raise ConfigMismatchError(
                "manifest vocabulary differs from the checkpoint vocabulary"
            )


def cmd_evaluate(args) -> int:
    if args.workers:
        torch.set_num_threads(args.workers)
    payload = load_checkpoint(args.checkpoint)
    model, vocab = model_from_checkpoint(payload)
    manifest_path = Path(args.manifest)
    manifest = load_manifest(manifest_path)
    _check_vocab_consistency(vocab, manifest, manifest_path.parent)
    report = evaluate(
        model, vocab, manifest, manifest_path.parent,
        k=args.k, use_rerank=args.rerank,
        checkpoint_name=str(args.checkpoint), manifest_name=str(args.manifest),
    )
    print(report.table())
    if args.out:
        report.save(_out_path(args.out))
    return EXIT_OK


def cmd_fid(args) -> int:
    if args.workers:
        torch.set_num_threads(args.workers)
    payload = load_checkpoint(args.checkpoint)
    model, vocab = model_from_checkpoint(payload)
    path_a, path_b = Path(args.manifest_a), Path(args.manifest_b)
    manifest_a = load_manifest(path_a)
    manifest_b = load_manifest(path_b)
    value = corpus_fid(model, vocab, manifest_a, path_a.parent, manifest_b, path_b.parent)
    print(f"fid {value:.6f}")
    if args.out:
        atomic_write_text(
            _out_path(args.out),
            json.dumps(
                {"fid": value, "manifest_a": str(path_a), "manifest_b": str(path_b),
                 "checkpoint": str(args.checkpoint)},
                indent=2,
            ) + "\n",
        )
    return EXIT_OK


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except UsageError as exc:
        print(f"usage error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    try:
        return args.func(args)
    except UsageError as exc:
        print(f"usage error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (
        ManifestParseError,
        ValidationError,
        ConfigurationError,
        ConfigMismatchError,
        ImageFormatError,
        ValueError,
        KeyError,
    ) as exc:
        print(f"validation error: {exc}", file=sys.stderr)
        return EXIT_VALIDATION
    except (CorpusError, TrainingDiverged, OSError) as exc:
        print(f"runtime error: {exc}", file=sys.stderr)
        return EXIT_RUNTIME
    except Exception as exc:  # pragma: no cover - last-resort guard
        print(f"runtime error: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())

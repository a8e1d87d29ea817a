"""Optimization loop: warmup/decay schedule, batch assembly, checkpoints.

Every random choice (epoch shuffles, augmentation, masking, hard negatives)
is derived statelessly from (seed, epoch, step), so a run is a pure function
of its configuration and resuming from a checkpoint replays the exact
trajectory of an uninterrupted run.
"""

from __future__ import annotations

import hashlib
import json
import math
from dataclasses import asdict, dataclass, replace
from pathlib import Path

import numpy as np
import torch

from .alignment import LossWeights, TrainBatch, apply_mask, combined_loss
from .corpus import FULL_IMAGE_BOX, BoundingBox, CorpusManifest
from .curation import augment_text
from .encoders import AlignmentModel, ModelConfig, image_to_tensor, load_checkpoint, save_checkpoint
from .synth import Vocabulary, tokenize


class TrainingDiverged(RuntimeError):
    """Loss went non-finite; carries the offending batch's record ids."""

    def __init__(self, step: int, record_ids: list[str]):
        self.step = step
        self.record_ids = record_ids
        super().__init__(f"non-finite loss at step {step}; batch records: {record_ids}")


class ConfigMismatchError(ValueError):
    """Checkpoint/config hashes differ; message lists the differing keys."""


@dataclass(frozen=True)
class TrainConfig:
    """Desk-scale defaults; ``paper_profile()`` installs the reference values."""

    epochs: int = 20
    batch_size: int = 16
    peak_lr: float = 1e-3
    final_lr: float = 1e-5
    warmup_steps: int = -1          # -1: 5% of total steps
    weight_decay: float = 0.01
    beta: float = 0.8
    seed: int = 0
    mode: str = "pretrain"
    flip_augment: bool = True
    erase_augment: bool = True
    text_augment: bool | None = None  # None: on for finetune, off for pretrain
    eda_alpha: float = 0.1
    mask_prob: float = 0.25
    grad_clip: float = 1.0
    checkpoint_every: int = 0       # steps between periodic checkpoints; 0 = final only
    log_every: int = 1

    def validate(self) -> None:
        if self.mode not in ("pretrain", "finetune"):
            raise ValueError(f"mode must be pretrain or finetune, got {self.mode!r}")
        if self.epochs < 1 or self.batch_size < 1:
            raise ValueError("epochs and batch_size must be >= 1")
        if self.final_lr > self.peak_lr:
            raise ValueError("final_lr must be <= peak_lr")
        if self.beta < 0:
            raise ValueError("beta must be >= 0")

    @property
    def effective_text_augment(self) -> bool:
        if self.text_augment is None:
            return self.mode == "finetune"
        return self.text_augment


def paper_profile(config: TrainConfig | None = None) -> TrainConfig:
    """Reference hyperparameters: batch 40, lr 5e-5 -> 5e-6, warmup 2600,
    32 epochs, weight decay 0.01, beta 0.8."""
    base = config or TrainConfig()
    return replace(
        base,
        epochs=32,
        batch_size=40,
        peak_lr=5e-5,
        final_lr=5e-6,
        warmup_steps=2600,
        weight_decay=0.01,
        beta=0.8,
    )


@dataclass(frozen=True)
class LrSchedule:
    peak: float
    final: float
    warmup_steps: int
    total_steps: int

    def validate(self) -> None:
        if self.warmup_steps > self.total_steps:
            raise ValueError("warmup_steps must be <= total_steps")


def resolve_schedule(config: TrainConfig, total_steps: int) -> LrSchedule:
    warmup = config.warmup_steps
    if warmup < 0:
        warmup = int(round(0.05 * total_steps))
    schedule = LrSchedule(config.peak_lr, config.final_lr, warmup, total_steps)
    schedule.validate()
    return schedule


def lr_at(step: int, schedule: LrSchedule) -> float:
    """Piecewise-linear: 0 -> peak over warmup, peak -> final over the rest."""
    if step < 0:
        raise ValueError("step must be >= 0")
    if schedule.warmup_steps > 0 and step <= schedule.warmup_steps:
        return schedule.peak * step / schedule.warmup_steps
    if step >= schedule.total_steps:
        return schedule.final
    span = schedule.total_steps - schedule.warmup_steps
    frac = (step - schedule.warmup_steps) / span
    return schedule.peak + (schedule.final - schedule.peak) * frac


def config_hash(model_config: ModelConfig, train_config: TrainConfig) -> str:
    blob = json.dumps(
        {"model": asdict(model_config), "train": asdict(train_config)}, sort_keys=True
    )
    return hashlib.sha256(blob.encode("utf-8")).hexdigest()


def _config_diff(stored: dict, current: dict) -> list[str]:
    keys = sorted(set(stored) | set(current))
    return [k for k in keys if stored.get(k) != current.get(k)]


def derive_seed(*parts: int) -> int:
    state = np.random.SeedSequence(tuple(int(p) for p in parts)).generate_state(1, np.uint64)[0]
    return int(state >> 1)  # keep it in torch's signed-seed range


def _rng(*parts: int) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence(tuple(int(p) for p in parts)))


class BatchAssembler:
    """Turns records into model tensors; a pure function of (seed, epoch, step)."""

    def __init__(
        self,
        manifest: CorpusManifest,
        base_dir: str | Path,
        vocab: Vocabulary,
        model_config: ModelConfig,
        config: TrainConfig,
    ):
        from .curation import load_image

        self.records = manifest.records
        self.vocab = vocab
        self.model_config = model_config
        self.config = config
        base = Path(base_dir)
        self.images = [load_image(base / r.image_ref) for r in self.records]

    def assemble(self, indices, epoch: int, step_in_epoch: int) -> TrainBatch:
        rng = _rng(self.config.seed, 23, epoch, step_in_epoch)
        mc = self.model_config
        images, cap_ids, cap_mask = [], [], []
        mlm_ids, mlm_pos = [], []
        boxes, phr_ids, phr_mask, record_ids = [], [], [], []

        for i in indices:
            record = self.records[i]
            img = self.images[i]
            caption = record.caption
            region_boxes = [r.box for r in record.regions]
            phrases = [r.phrase for r in record.regions]

            if self.config.effective_text_augment:
                caption = augment_text(
                    caption, 1, seed=int(rng.integers(2**31)), synonym_table=None,
                    alpha=self.config.eda_alpha,
                )[0]

            if self.config.flip_augment and rng.random() < 0.5:
                img = img[:, ::-1].copy()
                region_boxes = [
                    BoundingBox(1.0 - b.cx, b.cy, b.w, b.h) for b in region_boxes
                ]
            if self.config.erase_augment and rng.random() < 0.25:
                img = _random_erase(img, rng)

            if region_boxes:
                ridx = int(rng.integers(len(region_boxes)))
                box, phrase = region_boxes[ridx], phrases[ridx]
            else:
                box, phrase = FULL_IMAGE_BOX, caption

            tokens = tokenize(caption, self.vocab, mc.max_text_len)
            masked = apply_mask(tokens, self.vocab, self.config.mask_prob, rng)
            ptoks = tokenize(phrase, self.vocab, mc.max_phrase_len)

            images.append(image_to_tensor(img))
            cap_ids.append(tokens.ids)
            cap_mask.append(tokens.mask)
            mlm_ids.append(masked.corrupted)
            pos_row = [False] * mc.max_text_len
            for p in masked.positions:
                pos_row[p] = True
            mlm_pos.append(pos_row)
            boxes.append(box)
            phr_ids.append(ptoks.ids)
            phr_mask.append(ptoks.mask)
            record_ids.append(record.record_id)

        return TrainBatch(
            images=torch.stack(images),
            caption_ids=torch.tensor(cap_ids, dtype=torch.long),
            caption_mask=torch.tensor(cap_mask, dtype=torch.long),
            mlm_ids=torch.tensor(mlm_ids, dtype=torch.long),
            mlm_positions=torch.tensor(mlm_pos, dtype=torch.bool),
            region_boxes=boxes,
            phrase_ids=torch.tensor(phr_ids, dtype=torch.long),
            phrase_mask=torch.tensor(phr_mask, dtype=torch.long),
            record_ids=record_ids,
        )


def _random_erase(img: np.ndarray, rng: np.random.Generator) -> np.ndarray:
    h, w = img.shape[:2]
    area = float(rng.uniform(0.02, 0.10)) * h * w
    aspect = float(rng.uniform(0.5, 2.0))
    eh = max(1, min(h, int(round(math.sqrt(area / aspect)))))
    ew = max(1, min(w, int(round(math.sqrt(area * aspect)))))
    y0 = int(rng.integers(0, h - eh + 1))
    x0 = int(rng.integers(0, w - ew + 1))
    out = img.copy()
    out[y0 : y0 + eh, x0 : x0 + ew] = int(rng.integers(0, 256))
    return out


@dataclass
class TrainResult:
    checkpoint_path: Path
    log_path: Path
    final_loss: float
    steps: int


def train(
    manifest: CorpusManifest,
    base_dir: str | Path,
    vocab: Vocabulary,
    model_config: ModelConfig,
    config: TrainConfig,
    out_dir: str | Path,
    resume_from: str | Path | None = None,
    init_from: str | Path | None = None,
) -> TrainResult:
    """Run the full optimization loop and write checkpoint + step log.

    ``resume_from`` continues an interrupted run (config hash must match);
    ``init_from`` only warm-starts the model weights, e.g. fine-tuning from a
    pretraining checkpoint.
    """
    config.validate()
    model_config.validate()
    if not manifest.records:
        raise ValueError("cannot train on an empty manifest")
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)

    n = len(manifest.records)
    steps_per_epoch = math.ceil(n / config.batch_size)
    total_steps = config.epochs * steps_per_epoch
    schedule = resolve_schedule(config, total_steps)
    chash = config_hash(model_config, train_config=config)
    weights = LossWeights(beta=config.beta)

    start_step = 0
    optimizer_state = None
    if resume_from is not None:
        payload = load_checkpoint(resume_from)
        if payload["config_hash"] != chash:
            diff = _config_diff(payload.get("train_config") or {}, asdict(config))
            diff += _config_diff(payload.get("model_config") or {}, asdict(model_config))
            raise ConfigMismatchError(
                f"checkpoint config differs from current config in keys: {sorted(set(diff))}"
            )
        torch.manual_seed(config.seed)
        model = AlignmentModel(model_config)
        model.load_state_dict(payload["model_state"], strict=True)
        if payload["vocab_tokens"] != vocab.tokens:
            raise ConfigMismatchError("checkpoint vocabulary differs from the supplied one")
        optimizer_state = payload["optimizer_state"]
        start_step = int(payload["step"])
    else:
        torch.manual_seed(config.seed)
        model = AlignmentModel(model_config)
        if init_from is not None:
            payload = load_checkpoint(init_from)
            if payload["vocab_tokens"] != vocab.tokens:
                raise ConfigMismatchError("init checkpoint vocabulary differs from the corpus one")
            model.load_state_dict(payload["model_state"], strict=True)
    model.train()

    optimizer = torch.optim.AdamW(
        model.parameters(), lr=schedule.peak, weight_decay=config.weight_decay
    )
    if optimizer_state is not None:
        optimizer.load_state_dict(optimizer_state)

    assembler = BatchAssembler(manifest, base_dir, vocab, model_config, config)
    log_path = out_dir / "train_log.jsonl"
    log_mode = "a" if resume_from is not None else "w"
    checkpoint_path = out_dir / "checkpoint.pt"

    final_loss = float("nan")
    with open(log_path, log_mode, encoding="utf-8") as log:
        for step in range(start_step, total_steps):
            epoch = step // steps_per_epoch
            s = step % steps_per_epoch
            perm = _rng(config.seed, 29, epoch).permutation(n)
            indices = perm[s * config.batch_size : (s + 1) * config.batch_size]
            batch = assembler.assemble(indices, epoch, s)

            lr = lr_at(step, schedule)
            for group in optimizer.param_groups:
                group["lr"] = lr

            gen = torch.Generator()
            gen.manual_seed(derive_seed(config.seed, 31, step))
            total, breakdown = combined_loss(
                model, batch, weights, generator=gen, mode=config.mode
            )
            loss_value = total.detach().item()
            if not math.isfinite(loss_value):
                raise TrainingDiverged(step, batch.record_ids)

            optimizer.zero_grad(set_to_none=True)
            total.backward()
            grad_norm = float(
                torch.nn.utils.clip_grad_norm_(model.parameters(), config.grad_clip)
            )
            optimizer.step()
            final_loss = loss_value

            if config.log_every and (step % config.log_every == 0 or step == total_steps - 1):
                entry = {"step": step, "epoch": epoch, "lr": lr}
                entry.update(breakdown)
                entry["grad_norm"] = grad_norm
                entry["clipped"] = grad_norm > config.grad_clip
                log.write(json.dumps(entry) + "\n")

            done = step + 1
            if config.checkpoint_every and done % config.checkpoint_every == 0 and done < total_steps:
                save_checkpoint(
                    out_dir / f"checkpoint_step{done:06d}.pt",
                    model, vocab,
                    optimizer_state=optimizer.state_dict(),
                    step=done, config_hash=chash, train_config=asdict(config),
                )

    save_checkpoint(
        checkpoint_path,
        model, vocab,
        optimizer_state=optimizer.state_dict(),
        step=total_steps, config_hash=chash, train_config=asdict(config),
    )
    return TrainResult(
        checkpoint_path=checkpoint_path, log_path=log_path,
        final_loss=final_loss, steps=total_steps - start_step,
    )

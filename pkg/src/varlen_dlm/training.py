"""Supervised fine-tuning loop: pack, mask, denoise, step."""
from __future__ import annotations

import itertools
import json
import logging
import math
import time
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np
import torch

from .checkpoint import Checkpoint, load_checkpoint, restore_optimizer, save_checkpoint
from .masking import NoisedBatch, Role, apply_forward_masking, sample_noise_level
from .model import DiffusionTransformer, ModelConfig, init_params, loss_and_gradients
from .packing import PackedBatch, batch_iterator
from .tokenizer import SpecialTokens

log = logging.getLogger(__name__)


class TrainingError(RuntimeError):
    pass


@dataclass
class TrainConfig:
    learning_rate: float = 1e-3
    warmup_steps: int = 50
    total_steps: int = 1000
    batch_size: int = 16
    L: int = 256
    seed: int = 0
    checkpoint_every: int = 0
    epochs: int | None = None
    loss_weighting: str = "inv_t"
    t_floor: float = 0.0
    betas: tuple = (0.9, 0.98)
    grad_clip: float = 1.0
    tail_fill: str = "mask"
    row_close_prob: float = 0.0
    prefill_prob: float = 0.0

    def validate(self) -> None:
        if not self.learning_rate >= 0:
            raise ValueError("learning_rate must be non-negative")
        if self.warmup_steps > self.total_steps:
            raise ValueError("warmup_steps must not exceed total_steps")
        if self.batch_size < 1 or self.L < 2:
            raise ValueError("batch_size and L must be positive")
        if self.tail_fill not in ("mask", "pad"):
            raise ValueError("tail_fill must be 'mask' or 'pad'")
        if not 0.0 <= self.prefill_prob <= 1.0:
            raise ValueError("prefill_prob must lie in [0, 1]")


@dataclass
class TrainLogRecord:
    step: int
    loss: float
    t_mean: float
    masked_tokens: int
    wall_ms: float
    lr: float

    def to_json(self) -> str:
        return json.dumps(asdict(self))


def lr_at(step: int, cfg: TrainConfig) -> float:
    """Cosine ramp over the first ``warmup_steps`` updates, constant afterwards.

    ``lr(s) = base * (1 - cos(pi * (s + 1) / W)) / 2`` for ``s < W`` so the
    very first update already moves; ``lr(s) = base`` for ``s >= W``.
    """
    w = cfg.warmup_steps
    if w <= 0 or step >= w:
        return cfg.learning_rate
    return cfg.learning_rate * 0.5 * (1.0 - math.cos(math.pi * (step + 1) / w))


def make_optimizer(model: DiffusionTransformer, cfg: TrainConfig) -> torch.optim.Adam:
    return torch.optim.Adam(model.parameters(), lr=cfg.learning_rate, betas=tuple(cfg.betas), eps=1e-8,
                            foreach=False)


def noise_batch(batch: PackedBatch, rng: np.random.Generator, specials: SpecialTokens,
                tail_fill: str = "pad") -> NoisedBatch:
    """One noise level per packed row, then the forward masking rule.

    With ``tail_fill="mask"`` the model sees MASK instead of PAD on the unused
    row tail. Those positions stay unsupervised; they only stop the last EOS in
    a row from being predictable off a clean PAD neighbour.
    """
    tokens, roles = batch.tokens, batch.roles
    t = sample_noise_level(rng, size=len(batch))
    noised = apply_forward_masking(tokens, roles, t, rng, mask_id=specials.mask, eos_id=specials.eos)
    if not noised.mask[roles == Role.EOS_SEPARATOR].all():
        raise TrainingError("an EOS position escaped supervision")
    if noised.mask[(roles == Role.PROMPT) | (roles == Role.PAD)].any():
        raise TrainingError("a prompt or pad position was masked")
    if tail_fill == "mask":
        noised.x_t = np.where(roles == Role.PAD, specials.mask, noised.x_t)
    return noised


def choose_prefill(roles: np.ndarray, rng: np.random.Generator, prob: float) -> np.ndarray:
    """Per-row prefix length for prompt-prefill rows: the leading prompt's
    length with probability ``prob``, else 0."""
    lead = np.cumprod(roles == Role.PROMPT, axis=1).sum(axis=1)
    return np.where(rng.random(len(roles)) < prob, lead, 0)


def step_rng(seed: int, step: int) -> np.random.Generator:
    return np.random.default_rng([seed, step, 7])


def train_step(model, batch: PackedBatch, rng, optimizer, lr: float, cfg: TrainConfig, specials: SpecialTokens):
    t0 = time.perf_counter()
    noised = noise_batch(batch, rng, specials, cfg.tail_fill)
    if cfg.prefill_prob > 0:
        noised.prefill = choose_prefill(batch.roles, rng, cfg.prefill_prob)
    loss, _ = loss_and_gradients(noised, model, cfg.loss_weighting, cfg.t_floor)
    value = float(loss)
    if not math.isfinite(value):
        raise TrainingError(
            f"non-finite loss {value}: t={noised.t.tolist()} masked={noised.masked_count}"
        )
    if cfg.grad_clip:
        torch.nn.utils.clip_grad_norm_(model.parameters(), cfg.grad_clip)
    for group in optimizer.param_groups:
        group["lr"] = lr
    optimizer.step()
    return TrainLogRecord(
        step=-1,
        loss=value,
        t_mean=float(noised.t.mean()),
        masked_tokens=noised.masked_count,
        wall_ms=(time.perf_counter() - t0) * 1000.0,
        lr=lr,
    )


class Trainer:
    """Owns the model, optimizer and the deterministic batch stream.

    The batch for update ``k`` and its masking draws depend only on
    ``(seed, k)``, so resuming from a checkpoint taken after ``k`` updates
    continues the uninterrupted loss stream exactly.
    """

    def __init__(self, model: DiffusionTransformer, pairs, cfg: TrainConfig, specials: SpecialTokens,
                 step: int = 0, metadata=None):
        cfg.validate()
        self.model = model
        self.pairs = list(pairs)
        self.cfg = cfg
        self.specials = specials
        self.optimizer = make_optimizer(model, cfg)
        self.step = step
        self.metadata = dict(metadata or {})
        self._batches = None

    @classmethod
    def from_scratch(cls, model_cfg: ModelConfig, pairs, cfg: TrainConfig, specials, metadata=None):
        return cls(init_params(model_cfg), pairs, cfg, specials, metadata=metadata)

    @classmethod
    def resume(cls, path, pairs, cfg: TrainConfig, specials):
        ckpt: Checkpoint = load_checkpoint(path)
        model = ckpt.build_model()
        trainer = cls(model, pairs, cfg, specials, step=ckpt.step, metadata=ckpt.metadata)
        restore_optimizer(trainer.optimizer, list(model.parameters()), ckpt.optimizer)
        return trainer

    def batches(self):
        if self._batches is None:
            stream = batch_iterator(self.pairs, self.cfg.L, self.cfg.batch_size, self.cfg.seed, self.specials,
                                    epochs=self.cfg.epochs, close_prob=self.cfg.row_close_prob)
            self._batches = itertools.islice(stream, self.step, None)
        return self._batches

    def run(self, until: int | None = None, on_record=None, out_dir=None):
        """Train until ``until`` updates (default ``total_steps``) or the data runs out."""
        until = self.cfg.total_steps if until is None else until
        records = []
        self.model.train()
        for batch in self.batches():
            if self.step >= until:
                break
            rec = train_step(self.model, batch, step_rng(self.cfg.seed, self.step), self.optimizer,
                             lr_at(self.step, self.cfg), self.cfg, self.specials)
            rec.step = self.step
            self.step += 1
            records.append(rec)
            if on_record is not None:
                on_record(rec)
            every = self.cfg.checkpoint_every
            if out_dir is not None and every and self.step % every == 0:
                self.save(Path(out_dir) / f"step_{self.step:06d}.ckpt")
        return records

    def save(self, path) -> None:
        meta = dict(self.metadata)
        meta["train_config"] = asdict(self.cfg)
        save_checkpoint(self.model, self.optimizer, self.step, path, meta)

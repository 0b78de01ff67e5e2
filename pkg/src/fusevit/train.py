"""Mini-batch SGD with momentum, cosine annealing, and evaluation.

Three independently derived RNG streams (parameter init, batch shuffling,
augmentation) hang off the master seeds, so toggling augmentation never
perturbs initialization and same-seed runs produce identical loss curves.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from .data import AugmentConfig, ImageSet, SynthDataset, augment
from .errors import ConfigError, NumericError
from .model import FuseVitModel
from .tensor import Tape, Tensor, add, cross_entropy, scale

CSV_HEADER = "step,lr,loss,acc"


@dataclass
class TrainConfig:
    lr0: float = 5e-4
    momentum: float = 0.9
    total_steps: int = 500
    batch_size: int = 8
    seed: int = 0
    augment: AugmentConfig = field(default_factory=AugmentConfig)

    def __post_init__(self):
        if not self.lr0 > 0:
            raise ConfigError(f"lr0 must be positive, got {self.lr0}")
        if not 0.0 <= self.momentum < 1.0:
            raise ConfigError(f"momentum must be in [0, 1), got {self.momentum}")
        if self.total_steps < 1:
            raise ConfigError(f"total_steps must be positive, got {self.total_steps}")
        if self.batch_size < 1:
            raise ConfigError(f"batch_size must be >= 1, got {self.batch_size}")


def cosine_lr(step: int, total: int, lr0: float) -> float:
    """Cosine annealing from lr0 at step 0 down to 0 at step == total."""
    if total < 1:
        raise ConfigError(f"total must be >= 1, got {total}")
    if not 0 <= step <= total:
        raise ConfigError(f"step {step} outside [0, {total}]")
    return lr0 * (1.0 + math.cos(math.pi * step / total)) / 2.0


def sgd_step(params: Sequence[np.ndarray], grads: Sequence[np.ndarray],
             velocities: Sequence[np.ndarray], lr: float, momentum: float):
    """Classic momentum: v <- momentum*v + g, p <- p - lr*v. Pure.

    Velocity accumulates even at lr 0; momentum 0 is vanilla SGD.
    """
    if not (len(params) == len(grads) == len(velocities)):
        raise ConfigError("params, grads, velocities must align")
    new_params, new_velocities = [], []
    for p, g, v in zip(params, grads, velocities):
        if p.shape != g.shape or p.shape != v.shape:
            raise ConfigError(
                f"sgd_step shape mismatch: p{p.shape} g{g.shape} v{v.shape}")
        nv = momentum * v + g
        new_params.append(p - lr * nv)
        new_velocities.append(nv)
    return new_params, new_velocities


@dataclass
class LogRow:
    step: int
    lr: float
    loss: float
    acc: float


@dataclass
class TrainLog:
    rows: list[LogRow] = field(default_factory=list)

    def csv_text(self) -> str:
        lines = [CSV_HEADER]
        lines += [f"{r.step},{r.lr!r},{r.loss!r},{r.acc!r}" for r in self.rows]
        return "\n".join(lines) + "\n"

    def to_csv(self, path) -> None:
        Path(path).write_text(self.csv_text())

    @property
    def losses(self) -> list[float]:
        return [r.loss for r in self.rows]


class _BatchSampler:
    """Deterministic shuffled batches; reshuffles when an epoch runs out."""

    def __init__(self, count: int, batch_size: int, rng: np.random.Generator):
        self._count = count
        self._batch = batch_size
        self._rng = rng
        self._queue: list[int] = []

    def next_batch(self) -> list[int]:
        while len(self._queue) < self._batch:
            self._queue.extend(self._rng.permutation(self._count).tolist())
        out, self._queue = self._queue[: self._batch], self._queue[self._batch:]
        return out


def train(model: FuseVitModel, dataset: SynthDataset, cfg: TrainConfig) -> TrainLog:
    """Run the schedule; mutates the model in place and returns the log."""
    if len(dataset.train) == 0:
        raise ConfigError("training set is empty")
    shuffle_rng = np.random.default_rng(
        np.random.SeedSequence(cfg.seed, spawn_key=(1,)))
    augment_rng = np.random.default_rng(
        np.random.SeedSequence(cfg.seed, spawn_key=(2,)))
    sampler = _BatchSampler(len(dataset.train), cfg.batch_size, shuffle_rng)

    named = list(model.named_parameters())
    velocities = [np.zeros_like(p.data) for _, p in named]

    log = TrainLog()
    for step in range(cfg.total_steps):
        lr = cosine_lr(step, cfg.total_steps, cfg.lr0)
        idx = sampler.next_batch()
        model.zero_grad()
        correct = 0
        try:
            with Tape() as tape:
                loss = None
                for i in idx:
                    img = augment(dataset.train.images[i], cfg.augment,
                                  augment_rng, train=True)
                    label = int(dataset.train.labels[i])
                    result = model.forward(Tensor(img, dtype=model.dtype))
                    item_loss = cross_entropy(result.logits, label)
                    loss = item_loss if loss is None else add(loss, item_loss)
                    if int(np.argmax(result.logits.data)) == label:
                        correct += 1
                loss = scale(loss, 1.0 / len(idx))
                loss_value = float(loss.data)
                if not np.isfinite(loss_value):
                    raise NumericError("non-finite loss")
                tape.backward(loss)
        except NumericError as exc:
            raise NumericError(f"{exc} at step {step}") from exc

        grads = [p.grad if p.grad is not None else np.zeros_like(p.data)
                 for _, p in named]
        new_params, velocities = sgd_step(
            [p.data for _, p in named], grads, velocities, lr, cfg.momentum)
        for (_, p), arr in zip(named, new_params):
            p.data = arr

        log.rows.append(LogRow(step=step, lr=lr, loss=loss_value,
                               acc=correct / len(idx)))
    return log


@dataclass
class EvalReport:
    accuracy: float
    per_class: list[float]
    class_counts: list[int]
    mean_loss: float


def evaluate(model, image_set: ImageSet, num_classes: int,
             aug: AugmentConfig | None = None) -> EvalReport:
    """Center-crop evaluation; argmax ties go to the lowest index."""
    if len(image_set) == 0:
        raise ConfigError("cannot evaluate on an empty dataset")
    correct = np.zeros(num_classes, dtype=np.int64)
    totals = np.zeros(num_classes, dtype=np.int64)
    loss_sum = 0.0
    for i in range(len(image_set)):
        img = image_set.images[i]
        if aug is not None:
            img = augment(img, aug, rng=None, train=False)
        label = int(image_set.labels[i])
        logits = np.asarray(model.predict_logits(img), dtype=np.float64)
        probs_max = logits.max()
        loss_sum += float(np.log(np.exp(logits - probs_max).sum()) + probs_max
                          - logits[label])
        totals[label] += 1
        if int(np.argmax(logits)) == label:
            correct[label] += 1
    per_class = [float(c) / t if t else 0.0 for c, t in zip(correct, totals)]
    return EvalReport(
        accuracy=float(correct.sum()) / float(totals.sum()),
        per_class=per_class,
        class_counts=totals.tolist(),
        mean_loss=loss_sum / len(image_set),
    )

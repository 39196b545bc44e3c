"""Epoch loop with accuracy-threshold early stopping and per-batch cost logging."""

from __future__ import annotations

import logging
import math
import time
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from .data import DatasetSplit, LabeledImage, batches
from .model import Sequential, train_step
from .tensor import Rng

log = logging.getLogger(__name__)


class NumericalError(RuntimeError):
    """Training produced a non-finite loss."""


@dataclass
class TrainConfig:
    epochs: int = 50
    batch_size: int = 64
    target_val_accuracy: float = 0.95
    learning_rate: float = 0.001
    seed: int = 0
    split_ratios: tuple[float, float, float] = (0.8, 0.1, 0.1)
    dropout_rate: float = 0.2

    def __post_init__(self):
        if self.epochs < 1:
            raise ValueError(f"epochs must be >= 1, got {self.epochs}")
        if self.batch_size < 1:
            raise ValueError(f"batch_size must be >= 1, got {self.batch_size}")
        if not 0.0 <= self.target_val_accuracy <= 1.0:
            raise ValueError(f"target_val_accuracy must be in [0, 1], "
                             f"got {self.target_val_accuracy}")
        if not 0.0 <= self.dropout_rate < 1.0:
            raise ValueError(f"dropout_rate must be in [0, 1), got {self.dropout_rate}")
        if self.learning_rate < 0:
            raise ValueError(f"learning_rate must be >= 0, got {self.learning_rate}")


@dataclass
class EpochMetrics:
    epoch: int
    train_loss: float
    train_accuracy: float
    val_loss: float
    val_accuracy: float
    wall_time_seconds: float


@dataclass
class CostLog:
    """Per-batch training loss, the data behind a cost-versus-batch plot."""

    records: list[tuple[int, int, float]] = field(default_factory=list)

    def append(self, batch_index: int, epoch: int, loss: float):
        if self.records and batch_index <= self.records[-1][0]:
            raise ValueError("batch indices must be strictly increasing")
        self.records.append((batch_index, epoch, loss))

    def __len__(self):
        return len(self.records)

    def losses(self) -> np.ndarray:
        return np.array([r[2] for r in self.records])


def accuracy(probs: np.ndarray, labels: Sequence[int]) -> float:
    labels = np.asarray(labels)
    if len(probs) != len(labels):
        raise ValueError(f"{len(probs)} predictions for {len(labels)} labels")
    if len(labels) == 0:
        raise ValueError("accuracy of an empty set is undefined")
    return float(np.mean(np.argmax(probs, axis=1) == labels))


def evaluate(model: Sequential, images: Sequence[LabeledImage], cfg: TrainConfig | None = None):
    """Inference-mode ``(mean loss, accuracy)`` over ``images``."""
    if not images:
        raise ValueError("cannot evaluate on an empty image list")
    batch_size = cfg.batch_size if cfg else 64
    classes = model.shapes[-1][-1]
    total_loss = 0.0
    correct = 0
    for b in batches(images, batch_size, classes=classes):
        probs = model.forward(b.x)
        p_true = probs[np.arange(len(b.labels)), b.labels].astype(np.float64)
        total_loss += float(-np.log(np.clip(p_true, 1e-7, 1.0)).sum())
        correct += int(np.sum(np.argmax(probs, axis=1) == b.labels))
    return total_loss / len(images), correct / len(images)


def train(model: Sequential, split: DatasetSplit, cfg: TrainConfig,
          on_epoch: Callable[[EpochMetrics], None] | None = None):
    """Train until validation accuracy reaches ``cfg.target_val_accuracy`` or
    ``cfg.epochs`` run out.

    Returns ``(history, cost_log, stopped_early)``.  The threshold is
    checked at the end of every epoch; weights from the stopping epoch are
    kept.
    """
    if not split.train or not split.val:
        raise ValueError("training needs non-empty train and val partitions")
    model.learning_rate = cfg.learning_rate
    shuffle_rng = Rng(cfg.seed).spawn()
    classes = model.shapes[-1][-1]
    history: list[EpochMetrics] = []
    cost_log = CostLog()
    step = 0
    for epoch in range(1, cfg.epochs + 1):
        t0 = time.perf_counter()
        loss_sum = 0.0
        correct = 0
        for i, b in enumerate(batches(split.train, cfg.batch_size, shuffle=True,
                                      rng=shuffle_rng, classes=classes)):
            loss, probs = train_step(model, b.x, b.y, return_probs=True)
            if not math.isfinite(loss.mean_loss):
                raise NumericalError(f"non-finite loss {loss.mean_loss} at epoch {epoch}, "
                                     f"batch {i + 1}")
            step += 1
            cost_log.append(step, epoch, loss.mean_loss)
            loss_sum += loss.mean_loss * len(b.labels)
            correct += int(np.sum(np.argmax(probs, axis=1) == b.labels))
        val_loss, val_acc = evaluate(model, split.val, cfg)
        m = EpochMetrics(epoch, loss_sum / len(split.train), correct / len(split.train),
                         val_loss, val_acc, time.perf_counter() - t0)
        history.append(m)
        log.info("epoch %d: loss=%.4f acc=%.4f val_loss=%.4f val_acc=%.4f (%.1fs)",
                 epoch, m.train_loss, m.train_accuracy, m.val_loss, m.val_accuracy,
                 m.wall_time_seconds)
        if on_epoch is not None:
            on_epoch(m)
        if val_acc >= cfg.target_val_accuracy:
            return history, cost_log, True
    return history, cost_log, False

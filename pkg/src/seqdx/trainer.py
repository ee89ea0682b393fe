"""Patient-at-a-time training with gradient accumulation over k patients."""
from __future__ import annotations

import csv
import logging
import math
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .data import DISEASES, AugmentParams, DatasetSplit, augment_array, epoch_shuffle, substream
from .metrics import (ClassWeights, MetricCounts, Metrics, class_weights,
                      confusion_update, metrics_from_counts, weighted_bce)
from .model import ConfigError, Model, forward_sequence
from .tensor import Tensor, add, backward, no_grad

logger = logging.getLogger(__name__)


class TrainingAborted(RuntimeError):
    def __init__(self, epoch, patient_id, loss):
        super().__init__(f"non-finite loss {loss} at epoch {epoch}, patient {patient_id}")
        self.epoch, self.patient_id, self.loss = epoch, patient_id, loss


@dataclass
class TrainConfig:
    learning_rate: float = 0.01
    accumulation_k: int = 8
    epochs: int = 200
    seed: int = 0
    threshold: float = 0.5
    use_class_weights: bool = True
    eval_every: int = 1
    checkpoint_path: str | None = None
    clip_norm: float | None = 5.0
    augment: AugmentParams = field(default_factory=AugmentParams)
    threads: int = 1

    def validate(self):
        if self.learning_rate <= 0:
            raise ConfigError("learning_rate must be positive")
        if self.accumulation_k < 1 or self.epochs < 1 or self.eval_every < 1:
            raise ConfigError("accumulation_k, epochs and eval_every must be >= 1")
        if not 0 < self.threshold < 1:
            raise ConfigError("threshold must lie in (0, 1)")
        if self.clip_norm is not None and self.clip_norm <= 0:
            raise ConfigError("clip_norm must be positive when set")
        if self.threads < 1:
            raise ConfigError("threads must be >= 1")
        self.augment.validate()


@dataclass
class EpochRecord:
    epoch: int
    train_loss: float
    train: Metrics
    validation: "EvalResult | None"
    updates: int
    seconds: float


@dataclass
class TrainHistory:
    output_names: list
    epochs: list = field(default_factory=list)

    def comparable(self) -> list:
        """Everything except wall-clock time, for determinism checks."""
        rows = self.rows()
        return [{k: v for k, v in r.items() if k != "seconds"} for r in rows]

    def columns(self) -> list:
        cols = ["epoch", "train_loss"]
        for split in ("train", "val"):
            if split == "val":
                cols.append("val_loss")
            cols += [f"{split}_acc", f"{split}_precision", f"{split}_recall", f"{split}_f1"]
            if len(self.output_names) > 1:
                for name in self.output_names:
                    cols += [f"{split}_{m}_{name}" for m in ("acc", "precision", "recall", "f1")]
        return cols + ["updates", "seconds"]

    def rows(self) -> list:
        out = []
        for e in self.epochs:
            r = {"epoch": e.epoch, "train_loss": e.train_loss}
            r.update(_metric_cells("train", e.train, self.output_names))
            if e.validation is not None:
                r["val_loss"] = e.validation.mean_loss
                r.update(_metric_cells("val", e.validation.metrics, self.output_names))
            r["updates"] = e.updates
            r["seconds"] = e.seconds
            out.append(r)
        return out

    def to_csv(self, path):
        cols = self.columns()
        with Path(path).open("w", newline="") as fh:
            w = csv.DictWriter(fh, fieldnames=cols, restval="", lineterminator="\n")
            w.writeheader()
            for r in self.rows():
                w.writerow({k: (repr(v) if isinstance(v, float) else v) for k, v in r.items()})


def _metric_cells(split, metrics: Metrics, names) -> dict:
    per = metrics.per_output
    cells = {f"{split}_acc": metrics.combined_accuracy}
    for m in ("precision", "recall", "f1"):
        cells[f"{split}_{m}"] = float(np.mean([getattr(o, m) for o in per]))
    if len(names) > 1:
        for name, o in zip(names, per):
            for m, key in (("accuracy", "acc"), ("precision", "precision"),
                           ("recall", "recall"), ("f1", "f1")):
                cells[f"{split}_{key}_{name}"] = getattr(o, m)
    return cells


@dataclass
class EvalResult:
    metrics: Metrics
    counts: MetricCounts
    mean_loss: float
    probs: dict  # patient_id -> final probability vector


def output_names(num_outputs: int) -> list:
    return list(DISEASES) if num_outputs == 5 else ["hemorrhage"] if num_outputs == 1 else \
        [f"out{i}" for i in range(num_outputs)]


def patient_images(record, image_size: int, order=None, augment: AugmentParams | None = None,
                   rng: np.random.Generator | None = None) -> list:
    """The patient's images as [3, s, s] tensors, optionally reordered and augmented."""
    grays = record.load(image_size)
    idx = range(len(grays)) if order is None else order
    out = []
    for i in idx:
        g = grays[i][None]
        if augment is not None and augment.enabled:
            g = augment_array(g, augment, rng)
        out.append(Tensor(np.broadcast_to(g, (3,) + g.shape[1:])))
    return out


def _check_labels(model: Model, records):
    width = model.config.num_outputs
    for r in records:
        if len(r.labels) != width:
            raise ConfigError(f"patient {r.patient_id} has {len(r.labels)} labels, model emits {width}")


def patient_loss(model: Model, images, labels, weights: ClassWeights | None):
    pred = forward_sequence(model, images)
    return weighted_bce(pred.final_probs, labels, weights), pred


def sgd_step(model: Model, m: int, lr: float, clip_norm: float | None) -> float:
    """theta -= lr * clip(accumulated_grad / m); zeroes gradients; returns the pre-clip norm."""
    params = [p for p in model.trainable_parameters().values() if p.grad is not None]
    grads = [p.grad / m for p in params]
    norm = math.sqrt(sum(float(np.sum(g.astype(np.float64) ** 2)) for g in grads))
    factor = 1.0
    if clip_norm is not None and norm > clip_norm:
        factor = clip_norm / norm
    for p, g in zip(params, grads):
        p.data -= (lr * factor) * g
        p.grad = None
    return norm


def train(model: Model, split: DatasetSplit, config: TrainConfig, start_epoch: int = 0,
          callback=None) -> TrainHistory:
    """Train in place and return the per-epoch history.

    Epoch ``e`` draws its shuffles and augmentations from streams keyed by
    ``(config.seed, e)``, so a run resumed at ``start_epoch`` reproduces the
    remaining epochs of an uninterrupted run.  ``callback(record)`` is invoked
    after each epoch; a truthy return value ends training early.
    """
    config.validate()
    if not split.train:
        raise ConfigError("training split is empty")
    _check_labels(model, split.train)
    _check_labels(model, split.validation)
    size = model.config.image_size
    weights = (class_weights([r.labels for r in split.train]) if config.use_class_weights
               else ClassWeights.uniform(model.config.num_outputs))
    index = {id(r): i for i, r in enumerate(split.train)}
    k = config.accumulation_k
    history = TrainHistory(output_names(model.config.num_outputs))
    pool = ThreadPoolExecutor(config.threads) if config.threads > 1 else None
    model.zero_grad()
    try:
        for epoch in range(start_epoch, start_epoch + config.epochs):
            t0 = time.perf_counter()
            order = epoch_shuffle(split.train, substream(config.seed, "epoch", epoch))

            def prepare(item, epoch=epoch):
                rec, perm = item
                rng = substream(config.seed, "augment", epoch, index[id(rec)])
                return patient_images(rec, size, perm, config.augment, rng)

            batches = pool.map(prepare, order) if pool else map(prepare, order)
            counts = MetricCounts.zeros(model.config.num_outputs)
            loss_sum, pending, updates = 0.0, 0, 0
            for (rec, _), images in zip(order, batches):
                loss, pred = patient_loss(model, images, rec.labels, weights)
                value = loss.item()
                if not math.isfinite(value):
                    raise TrainingAborted(epoch, rec.patient_id, value)
                backward(loss)
                loss_sum += value
                counts = confusion_update(counts, pred.final_probs, rec.labels, config.threshold)
                pending += 1
                if pending == k:
                    sgd_step(model, pending, config.learning_rate, config.clip_norm)
                    pending, updates = 0, updates + 1
            if pending:
                sgd_step(model, pending, config.learning_rate, config.clip_norm)
                updates += 1
            val = None
            if split.validation and (epoch + 1 - start_epoch) % config.eval_every == 0:
                val = evaluate(model, split.validation, config.threshold, weights)
            rec = EpochRecord(epoch, loss_sum / len(order), metrics_from_counts(counts), val,
                              updates, time.perf_counter() - t0)
            history.epochs.append(rec)
            logger.info("epoch %d loss %.4f train_acc %.3f%s", epoch, rec.train_loss,
                        rec.train.combined_accuracy,
                        f" val_acc {val.metrics.combined_accuracy:.3f}" if val else "")
            if callback is not None and callback(rec):
                break
    finally:
        if pool:
            pool.shutdown()
    if config.checkpoint_path:
        from .checkpoint import save_checkpoint
        save_checkpoint(model, config.checkpoint_path,
                        {"next_epoch": history.epochs[-1].epoch + 1, "seed": config.seed})
    return history


def evaluate(model: Model, records, threshold: float = 0.5,
             weights: ClassWeights | None = None) -> EvalResult:
    """Forward every patient once (no augmentation) and threshold the final probabilities."""
    records = list(records)
    if not records:
        from .metrics import EmptyInputError
        raise EmptyInputError("evaluate needs at least one patient")
    _check_labels(model, records)
    counts = MetricCounts.zeros(model.config.num_outputs)
    total, probs = 0.0, {}
    with no_grad():
        for rec in records:
            loss, pred = patient_loss(model, patient_images(rec, model.config.image_size),
                                      rec.labels, weights)
            total += loss.item()
            probs[rec.patient_id] = pred.final_probs.data.copy()
            counts = confusion_update(counts, pred.final_probs, rec.labels, threshold)
    return EvalResult(metrics_from_counts(counts), counts, total / len(records), probs)


def _grads(model: Model) -> dict:
    return {k: (None if p.grad is None else p.grad.copy())
            for k, p in model.named_parameters().items()}


def accumulation_deviation(model: Model, patients, weights: ClassWeights | None = None):
    """Accumulated per-patient gradients vs the gradient of the summed loss.

    Returns ``(max relative deviation, accumulated grads, summed-loss grads)``.
    """
    size = model.config.image_size
    seqs = [patient_images(r, size) for r in patients]
    model.zero_grad()
    for r, imgs in zip(patients, seqs):
        loss, _ = patient_loss(model, imgs, r.labels, weights)
        backward(loss)
    acc = _grads(model)
    model.zero_grad()
    summed = None
    for r, imgs in zip(patients, seqs):
        loss, _ = patient_loss(model, imgs, r.labels, weights)
        summed = loss if summed is None else add(summed, loss)
    backward(summed)
    ref = _grads(model)
    model.zero_grad()
    worst = 0.0
    for name in acc:
        a, b = acc[name], ref[name]
        if a is None or b is None:
            if (a is None) != (b is None):
                return math.inf, acc, ref
            continue
        a64, b64 = a.astype(np.float64), b.astype(np.float64)
        denom = np.maximum(np.abs(a64), np.abs(b64))
        nz = denom > 0
        if nz.any():
            worst = max(worst, float(np.max(np.abs(a64 - b64)[nz] / denom[nz])))
    return worst, acc, ref


def accumulate_equivalence_check(model: Model, patients, weights=None, rtol: float = 1e-5) -> bool:
    if len(patients) < 2:
        raise ValueError("the equivalence check needs k >= 2 patients")
    worst, _, _ = accumulation_deviation(model, patients, weights)
    return worst <= rtol

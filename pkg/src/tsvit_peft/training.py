"""Training protocol: Adam at a constant learning rate, per-epoch validation,
best-validation-F1 checkpointing, F1/IoU evaluation and learning-rate sweeps."""

from __future__ import annotations

import csv
import io
import logging
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

from .core import checkpoint
from .core import tensor as tt
from .core.optim import Adam
from .data import DatasetManifest, batches
from .model import TSViT
from .peft import PeftSpec, apply_peft, spec_label

log = logging.getLogger(__name__)

DEFAULT_LRS = (0.0001, 0.005, 0.01, 0.05, 0.1)


class TrainingError(RuntimeError):
    def __init__(self, msg: str, epoch: int, batch: int):
        super().__init__(f"{msg} at epoch {epoch}, batch {batch}")
        self.epoch = epoch
        self.batch = batch


@dataclass
class HParams:
    lr: float = 0.01
    epochs: int = 20
    batch_size: int = 16
    seed: int = 0
    class_weight: list[float] | None = None
    prefetch: int = 0

    def validate(self) -> "HParams":
        if not self.lr > 0:
            raise ValueError(f"lr must be > 0, got {self.lr}")
        if self.epochs < 1:
            raise ValueError(f"epochs must be >= 1, got {self.epochs}")
        if self.batch_size < 1:
            raise ValueError(f"batch_size must be >= 1, got {self.batch_size}")
        return self


# -- metrics ----------------------------------------------------------------------


@dataclass
class Metrics:
    confusion: np.ndarray  # (K, K), rows = truth, cols = prediction

    @property
    def num_classes(self) -> int:
        return self.confusion.shape[0]

    def _tp_fp_fn(self):
        c = self.confusion.astype(np.float64)
        tp = np.diag(c)
        return tp, c.sum(0) - tp, c.sum(1) - tp

    @property
    def per_class_f1(self) -> np.ndarray:
        tp, fp, fn = self._tp_fp_fn()
        denom = 2 * tp + fp + fn
        return np.divide(2 * tp, denom, out=np.zeros_like(tp), where=denom > 0)

    @property
    def per_class_iou(self) -> np.ndarray:
        tp, fp, fn = self._tp_fp_fn()
        denom = tp + fp + fn
        return np.divide(tp, denom, out=np.zeros_like(tp), where=denom > 0)

    def _reduce(self, values: np.ndarray) -> float:
        if self.num_classes == 2:
            return float(values[1])
        tp, fp, fn = self._tp_fp_fn()
        seen = (tp + fp + fn) > 0
        return float(values[seen].mean()) if seen.any() else 0.0

    @property
    def f1(self) -> float:
        """Positive-class F1 for K=2, macro F1 over observed classes otherwise."""
        return self._reduce(self.per_class_f1)

    @property
    def iou(self) -> float:
        return self._reduce(self.per_class_iou)

    @property
    def score(self) -> float:
        return self.f1

    def to_dict(self) -> dict:
        return {
            "f1": self.f1,
            "iou": self.iou,
            "per_class_f1": self.per_class_f1.tolist(),
            "per_class_iou": self.per_class_iou.tolist(),
            "confusion": self.confusion.tolist(),
        }


def confusion_matrix(truth: np.ndarray, pred: np.ndarray, num_classes: int) -> np.ndarray:
    idx = truth.astype(np.int64).ravel() * num_classes + pred.astype(np.int64).ravel()
    return np.bincount(idx, minlength=num_classes * num_classes).reshape(num_classes, num_classes)


def evaluate(model: TSViT, manifest: DatasetManifest, split: str = "val", batch_size: int = 16) -> Metrics:
    K = model.cfg.K
    conf = np.zeros((K, K), dtype=np.int64)
    with tt.no_grad():
        for batch in batches(manifest, split, batch_size, shuffle=False):
            pred = model(batch.data, batch.times).data.argmax(axis=1)
            conf += confusion_matrix(batch.labels, pred, K)
    return Metrics(conf)


# -- training loop ---------------------------------------------------------------


@dataclass
class EpochRecord:
    epoch: int
    train_loss: float
    val_f1: float
    val_iou: float
    is_best: bool


@dataclass
class History:
    epochs: list[EpochRecord] = field(default_factory=list)
    best_epoch: int = 0
    best_checkpoint: str | None = None

    @property
    def best_val_f1(self) -> float:
        return max(r.val_f1 for r in self.epochs) if self.epochs else 0.0

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["epoch", "train_loss", "val_f1", "val_iou", "is_best"])
        for r in self.epochs:
            w.writerow([r.epoch, repr(r.train_loss), repr(r.val_f1), repr(r.val_iou), int(r.is_best)])
        return buf.getvalue()


def train(
    model: TSViT,
    manifest: DatasetManifest,
    hp: HParams,
    out_dir: str | Path | None = None,
    on_epoch: Callable[[EpochRecord], None] | None = None,
) -> History:
    """Train the trainable parameters of an already-surgered ``model``.

    After the last epoch the best-validation weights are loaded back into
    ``model``; with ``out_dir`` they are also written to ``best.ptwt``.
    """
    hp.validate()
    params = model.trainable_parameters()
    if not params:
        raise ValueError("model has no trainable parameters")
    opt = Adam(params, hp.lr)
    weight = np.asarray(hp.class_weight, dtype=np.float32) if hp.class_weight else None
    history = History()
    best_state: dict[str, np.ndarray] | None = None
    best_score = -np.inf
    ckpt = Path(out_dir) / "best.ptwt" if out_dir is not None else None

    for epoch in range(1, hp.epochs + 1):
        total, seen = 0.0, 0
        for b, batch in enumerate(batches(manifest, "train", hp.batch_size, hp.seed, epoch, prefetch=hp.prefetch)):
            opt.zero_grad()
            try:
                logits = model(batch.data, batch.times)
                loss = tt.cross_entropy(logits, batch.labels, axis=1, class_weight=weight)
            except tt.NonFiniteError as e:
                raise TrainingError(f"non-finite forward in op '{e.op}'", epoch, b) from e
            value = loss.item()
            if not np.isfinite(value):
                raise TrainingError("non-finite loss", epoch, b)
            loss.backward()
            opt.step()
            total += value * len(batch)
            seen += len(batch)

        val = evaluate(model, manifest, "val", hp.batch_size)
        is_best = val.score > best_score
        if is_best:
            best_score = val.score
            history.best_epoch = epoch
            best_state = {p: prm.data.copy() for p, prm in model.named_parameters()}
            if ckpt is not None:
                checkpoint.save(model, ckpt)
                history.best_checkpoint = str(ckpt)
        rec = EpochRecord(epoch, total / seen, val.f1, val.iou, is_best)
        history.epochs.append(rec)
        log.info("epoch %d loss %.4f val_f1 %.4f%s", epoch, rec.train_loss, rec.val_f1, " *" if is_best else "")
        if on_epoch is not None:
            on_epoch(rec)

    for path, prm in model.named_parameters():
        prm.data = best_state[path]
    if out_dir is not None:
        checkpoint.atomic_write_bytes(Path(out_dir) / "history.csv", history.to_csv().encode())
    return history


# -- learning-rate sweep ----------------------------------------------------------


@dataclass
class SweepRow:
    lr: float
    method: str
    best_val_f1: float
    test_f1: float


def lr_sweep(
    model_factory: Callable[[], TSViT],
    manifest: DatasetManifest,
    spec: PeftSpec,
    lrs: Sequence[float] = DEFAULT_LRS,
    hp: HParams | None = None,
    jobs: int = 1,
) -> list[SweepRow]:
    """One independent run per learning rate: fresh model, fresh surgery, same seed."""
    if not lrs:
        raise ValueError("need at least one learning rate")
    base = hp or HParams()
    label = spec_label(spec)

    def run(lr: float) -> SweepRow:
        model, _ = apply_peft(model_factory(), spec, copy=False)
        hist = train(model, manifest, HParams(**{**base.__dict__, "lr": lr}))
        return SweepRow(lr, label, hist.best_val_f1, evaluate(model, manifest, "test", base.batch_size).f1)

    if jobs > 1:
        with ThreadPoolExecutor(max_workers=jobs) as pool:
            results = dict(zip(lrs, pool.map(run, lrs)))
        return [results[lr] for lr in lrs]
    return [run(lr) for lr in lrs]


def sweep_to_csv(rows: Sequence[SweepRow]) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["lr", "method", "best_val_f1", "test_f1"])
    for r in rows:
        w.writerow([repr(r.lr), r.method, f"{r.best_val_f1:.5f}", f"{r.test_f1:.5f}"])
    return buf.getvalue()


def sweep_to_wide_csv(rows: Sequence[SweepRow]) -> str:
    """One row per learning rate, one column per method (test F1)."""
    methods = list(dict.fromkeys(r.method for r in rows))
    lrs = list(dict.fromkeys(r.lr for r in rows))
    cell = {(r.lr, r.method): r.test_f1 for r in rows}
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["learning_rate", *methods])
    for lr in lrs:
        w.writerow([repr(lr), *(f"{cell[(lr, m)]:.5f}" if (lr, m) in cell else "" for m in methods)])
    return buf.getvalue()

"""Minibatch SGD with step learning-rate decay and early stopping."""

from __future__ import annotations

import csv
import logging
from dataclasses import dataclass, field

import numpy as np

from gradscore.data import Dataset
from gradscore.errors import DomainError, NumericError
from gradscore.importance import NormConfig, batch_scores
from gradscore.nn import GradientVector, Model, batch_loss_and_gradient, check_finite, predict

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class TrainConfig:
    batch_size: int = 64
    epochs: int = 50
    base_lr: float = 0.05
    lr_decay_factor: float = 0.1
    lr_decay_epochs: tuple[int, ...] = (30,)
    weight_decay: float = 1e-4
    early_stop_patience: int = 10
    seed: int = 0
    probe_set_size: int = 512

    def __post_init__(self):
        if self.batch_size < 1:
            raise DomainError("batch_size must be >= 1")
        if self.base_lr <= 0:
            raise DomainError("base_lr must be > 0")
        if not 0 < self.lr_decay_factor <= 1:
            raise DomainError("lr_decay_factor must lie in (0, 1]")
        if self.weight_decay < 0:
            raise DomainError("weight_decay must be >= 0")
        if self.epochs < 1:
            raise DomainError("epochs must be >= 1")
        object.__setattr__(self, "lr_decay_epochs", tuple(sorted(int(e) for e in self.lr_decay_epochs)))


@dataclass
class TrainLog:
    train_loss: list[float] = field(default_factory=list)
    val_acc: list[float] = field(default_factory=list)
    lr: list[float] = field(default_factory=list)
    probe_indices: np.ndarray = field(default_factory=lambda: np.zeros(0, dtype=np.int64))
    probe_gradients: np.ndarray = field(default_factory=lambda: np.zeros((0, 0)))
    best_epoch: int = -1

    @property
    def epochs_run(self) -> int:
        return len(self.train_loss)

    def save(self, epochs_path, probe_path=None) -> None:
        with open(epochs_path, "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["epoch", "train_loss", "val_acc", "lr"])
            for e, (tl, va, lr) in enumerate(zip(self.train_loss, self.val_acc, self.lr)):
                w.writerow([e, repr(tl), repr(va), repr(lr)])
        if probe_path is not None:
            with open(probe_path, "w", newline="") as fh:
                w = csv.writer(fh, lineterminator="\n")
                w.writerow(["example_index", "epoch", "grad_norm"])
                for row, idx in enumerate(self.probe_indices):
                    for e in range(self.probe_gradients.shape[1]):
                        w.writerow([int(idx), e, repr(float(self.probe_gradients[row, e]))])

    @classmethod
    def load(cls, epochs_path, probe_path=None) -> "TrainLog":
        with open(epochs_path, newline="") as fh:
            rows = list(csv.DictReader(fh))
        out = cls(
            train_loss=[float(r["train_loss"]) for r in rows],
            val_acc=[float(r["val_acc"]) for r in rows],
            lr=[float(r["lr"]) for r in rows],
        )
        if out.val_acc:
            vals = [v if v == v else -1.0 for v in out.val_acc]
            out.best_epoch = int(np.argmax(vals)) if any(v >= 0 for v in vals) else len(vals) - 1
        if probe_path is not None:
            with open(probe_path, newline="") as fh:
                prows = list(csv.DictReader(fh))
            order = list(dict.fromkeys(int(r["example_index"]) for r in prows))
            n_epochs = max((int(r["epoch"]) for r in prows), default=-1) + 1
            mat = np.zeros((len(order), n_epochs))
            pos = {idx: i for i, idx in enumerate(order)}
            for r in prows:
                mat[pos[int(r["example_index"])], int(r["epoch"])] = float(r["grad_norm"])
            out.probe_indices = np.array(order, dtype=np.int64)
            out.probe_gradients = mat
        return out


def lr_at(config: TrainConfig, epoch: int) -> float:
    """Learning rate in effect during ``epoch`` (0-based)."""
    if epoch < 0:
        raise DomainError("epoch must be >= 0")
    decays = sum(1 for e in config.lr_decay_epochs if e <= epoch)
    return config.base_lr * config.lr_decay_factor ** decays


def sgd_step(model: Model, grad: GradientVector, lr: float, weight_decay: float) -> Model:
    """In place: p <- p - lr * (g + weight_decay * p). Returns ``model``."""
    check_finite(grad)
    for seg in model.segments:
        g = grad.values[seg.name]
        if g.shape != seg.values.shape:
            raise DomainError(f"gradient for {seg.name} has shape {g.shape}, expected {seg.values.shape}")
    for seg in model.segments:
        g = grad.values[seg.name]
        if weight_decay:
            seg.values -= lr * (g + weight_decay * seg.values)
        else:
            seg.values -= lr * g
    return model


def evaluate(model: Model, dataset: Dataset) -> float:
    """Top-1 accuracy; argmax ties resolve to the lowest class index."""
    if len(dataset) == 0:
        raise DomainError("cannot evaluate on an empty dataset")
    return float(np.mean(predict(model, dataset.examples) == dataset.labels))


def probe_positions(n: int, size: int, seed: int) -> np.ndarray:
    rng = np.random.default_rng([seed, 0x9E3779B9])
    return np.sort(rng.choice(n, size=min(size, n), replace=False))


def train(
    model: Model,
    train_set: Dataset,
    val_set: Dataset | None,
    config: TrainConfig = TrainConfig(),
    probe_norm: NormConfig = NormConfig(),
) -> tuple[Model, TrainLog]:
    """Train a copy of ``model``; return the best-validation snapshot and log.

    Without a validation set the final epoch's parameters are returned and
    early stopping is off. The probe matrix holds post-epoch gradient norms
    of a fixed seeded subset of the training set (rows follow
    ``log.probe_indices``, which are positions in ``train_set``).
    """
    n = len(train_set)
    if n == 0:
        raise DomainError("empty training set")
    model = model.copy()
    has_val = val_set is not None and len(val_set) > 0
    probe = probe_positions(n, config.probe_set_size, config.seed) if config.probe_set_size > 0 else np.zeros(0, int)
    tlog = TrainLog(probe_indices=probe)
    probe_cols = []
    best, best_acc, stale = None, -1.0, 0

    for epoch in range(config.epochs):
        lr = lr_at(config, epoch)
        perm = np.random.default_rng([config.seed, epoch]).permutation(n)
        total = 0.0
        for start in range(0, n, config.batch_size):
            pos = np.sort(perm[start:start + config.batch_size])
            value, grad = batch_loss_and_gradient(model, train_set.examples[pos], train_set.labels[pos])
            if not np.isfinite(value):
                raise NumericError(f"non-finite loss at epoch {epoch}")
            sgd_step(model, grad, lr, config.weight_decay)
            total += value * len(pos)
        tlog.train_loss.append(total / n)
        tlog.lr.append(lr)
        if len(probe):
            probe_cols.append(
                batch_scores(model, train_set.examples[probe], train_set.labels[probe], probe_norm)
            )
        if has_val:
            acc = evaluate(model, val_set)
            tlog.val_acc.append(acc)
            if acc > best_acc:
                best, best_acc, stale = model.copy(), acc, 0
                tlog.best_epoch = epoch
            else:
                stale += 1
            log.debug("epoch %d loss %.5f val %.4f lr %g", epoch, tlog.train_loss[-1], acc, lr)
            if stale >= config.early_stop_patience:
                break
        else:
            tlog.val_acc.append(float("nan"))
            tlog.best_epoch = epoch
            log.debug("epoch %d loss %.5f lr %g", epoch, tlog.train_loss[-1], lr)

    tlog.probe_gradients = np.stack(probe_cols, axis=1) if probe_cols else np.zeros((len(probe), 0))
    return (best if has_val else model), tlog

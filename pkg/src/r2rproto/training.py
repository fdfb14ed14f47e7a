"""AdamW, cosine annealing and the training loop."""

from __future__ import annotations

import logging
import math
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from .data import Sample, batch_iterator, split_train_val, stack
from .errors import ContractError, NumericError
from .functional import bce_with_logits
from .metrics import mean_auc, per_class_auc
from .model import Model, forward
from .tensor import Tensor, backward, no_grad

log = logging.getLogger(__name__)

LR = 0.00025
WEIGHT_DECAY = 0.05


@dataclass
class OptimState:
    lr0: float = LR
    weight_decay: float = WEIGHT_DECAY
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    step: int = 0
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)

    def hyperparameters(self) -> dict:
        return {
            "lr0": self.lr0, "weight_decay": self.weight_decay,
            "beta1": self.beta1, "beta2": self.beta2, "eps": self.eps,
        }


def adamw_step(params: dict[str, Tensor], state: OptimState, lr: float) -> None:
    """One decoupled-weight-decay Adam update over ``params`` using their ``.grad``."""
    for name, p in params.items():
        if p.grad is not None and not np.all(np.isfinite(p.grad)):
            raise NumericError(f"non-finite gradient in parameter {name!r}")
    state.step += 1
    t = state.step
    b1, b2 = state.beta1, state.beta2
    bc1 = 1.0 - b1**t
    bc2 = 1.0 - b2**t
    for name, p in params.items():
        g = p.grad
        if g is None:
            continue
        m = state.m.get(name)
        if m is None:
            m = state.m[name] = np.zeros_like(p.data)
            state.v[name] = np.zeros_like(p.data)
        v = state.v[name]
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * g * g
        p.data *= 1.0 - lr * state.weight_decay
        p.data -= lr * (m / bc1) / (np.sqrt(v / bc2) + state.eps)


def cosine_lr(step: int, total_steps: int, lr0: float, lr_min: float = 0.0) -> float:
    if total_steps <= 0:
        raise ContractError(f"total_steps must be positive, got {total_steps}")
    if not 0 <= step <= total_steps:
        raise ContractError(f"step {step} outside [0, {total_steps}]")
    return lr_min + 0.5 * (lr0 - lr_min) * (1.0 + math.cos(math.pi * step / total_steps))


@dataclass
class TrainReport:
    losses: list[float] = field(default_factory=list)
    val_auc: list[list[float | None]] = field(default_factory=list)
    val_mean_auc: list[float | None] = field(default_factory=list)
    lr: list[float] = field(default_factory=list)
    wall_time: list[float] = field(default_factory=list)
    best_epoch: int | None = None
    hyperparameters: dict = field(default_factory=dict)

    def to_json(self) -> dict:
        return {
            "losses": self.losses,
            "val_auc": self.val_auc,
            "val_mean_auc": self.val_mean_auc,
            "lr": self.lr,
            "wall_time": self.wall_time,
            "best_epoch": self.best_epoch,
            "hyperparameters": self.hyperparameters,
        }


def predict(model: Model, samples: Sequence[Sample], batch_size: int = 64) -> np.ndarray:
    """Sigmoid probabilities ``[n, n_classes]``."""
    out = []
    with no_grad():
        for batch in batch_iterator(samples, batch_size, None):
            x, _ = stack(batch)
            logits, _ = forward(model, Tensor(x))
            out.append(1.0 / (1.0 + np.exp(-logits.data)))
    return np.concatenate(out, axis=0)


def evaluate(model: Model, samples: Sequence[Sample]) -> tuple[list[float | None], float | None]:
    probs = predict(model, samples)
    labels = np.stack([s.labels for s in samples])
    per = per_class_auc(probs, labels)
    try:
        return per, mean_auc(per)
    except ValueError:
        return per, None


def train(
    model: Model,
    dataset: Sequence[Sample],
    epochs: int,
    batch_size: int = 16,
    seed: int = 0,
    lr0: float = LR,
    weight_decay: float = WEIGHT_DECAY,
    lr_min: float = 0.0,
    val_fraction: float = 0.1,
    checkpoint_path: str | Path | None = None,
    state: OptimState | None = None,
    validation: Sequence[Sample] | None = None,
) -> TrainReport:
    """Train with AdamW + per-step cosine annealing on mean BCE.

    Validation is a seeded 90/10 split of ``dataset`` unless ``validation`` is
    given (``val_fraction=0`` trains on everything and validates on the
    training set).  When ``checkpoint_path`` is set, the epoch with the best
    validation mean AUC is written there.
    """
    from .checkpoint import save_checkpoint

    if len(dataset) == 0:
        raise ContractError("cannot train on an empty dataset")
    if validation is not None:
        train_set, val_set = list(dataset), list(validation)
    elif val_fraction > 0 and len(dataset) > 1:
        train_set, val_set = split_train_val(dataset, seed, val_fraction)
    else:
        train_set, val_set = list(dataset), list(dataset)
    state = state or OptimState(lr0=lr0, weight_decay=weight_decay)
    params = model.parameters()
    steps_per_epoch = math.ceil(len(train_set) / batch_size)
    total = max(1, epochs * steps_per_epoch)
    report = TrainReport(hyperparameters={
        **state.hyperparameters(), "lr_min": lr_min, "epochs": epochs,
        "batch_size": batch_size, "seed": seed, "n_train": len(train_set), "n_val": len(val_set),
    })
    best = -np.inf
    step = 0
    t0 = time.perf_counter()
    for epoch in range(epochs):
        total_loss, seen = 0.0, 0
        lr = cosine_lr(step, total, state.lr0, lr_min)
        for batch in batch_iterator(train_set, batch_size, seed * 1_000_003 + epoch):
            lr = cosine_lr(step, total, state.lr0, lr_min)
            x, y = stack(batch)
            model.zero_grad()
            logits, _ = forward(model, Tensor(x))
            loss = bce_with_logits(logits, y)
            if not np.isfinite(loss.data):
                if checkpoint_path is not None:
                    save_checkpoint(model, state, Path(checkpoint_path).with_suffix(".diverged.r2rp"))
                raise NumericError(f"loss diverged at epoch {epoch}, step {step}")
            backward(loss)
            adamw_step(params, state, lr)
            total_loss += float(loss.data) * len(batch)
            seen += len(batch)
            step += 1
        per, mean = evaluate(model, val_set)
        report.losses.append(total_loss / seen)
        report.val_auc.append(per)
        report.val_mean_auc.append(mean)
        report.lr.append(lr)
        report.wall_time.append(time.perf_counter() - t0)
        log.info("epoch %d loss %.5f val mean AUC %s lr %.3g", epoch, report.losses[-1], mean, lr)
        score = -np.inf if mean is None else mean
        if report.best_epoch is None or score > best:
            best = score
            report.best_epoch = epoch
            if checkpoint_path is not None:
                save_checkpoint(model, state, checkpoint_path)
    return report

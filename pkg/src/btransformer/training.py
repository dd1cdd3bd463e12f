"""Loss, optimiser, learning-rate schedule, early stopping and the epoch loop."""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field
from typing import Callable, Dict, List, Mapping, Optional, Tuple

import numpy as np

from .config import ModelConfig
from .data import PairDataset, collate
from .errors import ContractError, ShapeError, TrainingDivergedError
from .head import predict_labels
from .metrics import macro_f1
from .model import BTransformer
from .tensor import Tensor, as_tensor, backward, clip, dropout, log, no_grad, tsum

logger = logging.getLogger(__name__)

PROB_EPS = 1e-7

__all__ = [
    "bce_loss", "lr_at_step", "warmup_steps", "AdamWState", "adamw_step", "dropout",
    "EarlyStopping", "EpochRecord", "TrainingLog", "TrainResult", "evaluate", "train",
]


def bce_loss(y_hat: Tensor, y) -> Tensor:
    """Binary cross-entropy summed over classes and averaged over the N samples.

    Probabilities are clamped to ``[1e-7, 1 - 1e-7]`` first.
    """
    y_hat = as_tensor(y_hat)
    y = np.asarray(y.data if isinstance(y, Tensor) else y, dtype=np.float64)
    if y_hat.shape != y.shape:
        raise ShapeError(f"bce_loss: predictions {y_hat.shape} and targets {y.shape} differ")
    n = y.shape[0] if y.ndim == 2 else 1
    p = clip(y_hat, PROB_EPS, 1.0 - PROB_EPS)
    per_entry = y * log(p) + (1.0 - y) * log(1.0 - p)
    return -tsum(per_entry) / float(n)


def lr_at_step(
    t: int, alpha0: float, t_warmup: int, decay: str = "constant", total_steps: Optional[int] = None
) -> float:
    """``alpha0 * min(t / t_warmup, 1)``.

    With ``decay="linear"`` the rate instead falls linearly from ``alpha0`` at
    ``t_warmup`` to zero at ``total_steps``.
    """
    if t < 0 or t_warmup < 1:
        raise ContractError(f"need t >= 0 and t_warmup >= 1, got t={t}, t_warmup={t_warmup}")
    if t <= t_warmup or decay == "constant":
        return alpha0 * min(t / t_warmup, 1.0)
    if decay != "linear":
        raise ContractError(f"unknown decay {decay!r}")
    if total_steps is None or total_steps <= t_warmup:
        return alpha0
    return alpha0 * max(0.0, (total_steps - t) / (total_steps - t_warmup))


def warmup_steps(warmup_fraction: float, max_epochs: int, batches_per_epoch: int) -> int:
    return max(1, math.ceil(warmup_fraction * max_epochs * batches_per_epoch))


@dataclass
class AdamWState:
    m: Dict[str, np.ndarray] = field(default_factory=dict)
    v: Dict[str, np.ndarray] = field(default_factory=dict)
    t: int = 0
    betas: Tuple[float, float] = (0.9, 0.999)
    eps: float = 1e-8
    weight_decay: float = 0.01


def adamw_step(params: Mapping[str, Tensor], state: AdamWState, lr: float) -> None:
    """One decoupled-weight-decay Adam update, in place, using each parameter's ``grad``."""
    for name, p in params.items():
        if p.grad is None:
            raise ContractError(f"parameter {name!r} has no gradient")
    state.t += 1
    b1, b2 = state.betas
    c1 = 1.0 - b1 ** state.t
    c2 = 1.0 - b2 ** state.t
    for name, p in params.items():
        g = p.grad
        m = state.m.get(name)
        if m is None:
            m = state.m[name] = np.zeros_like(p.data)
            state.v[name] = np.zeros_like(p.data)
        v = state.v[name]
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * g * g
        step = lr * (m / c1) / (np.sqrt(v / c2) + state.eps)
        p.data -= step + lr * state.weight_decay * p.data


class EarlyStopping:
    """Tracks the best dev score; ``update`` returns True once ``patience``
    consecutive epochs pass without a strict improvement."""

    def __init__(self, patience: int):
        if patience < 1:
            raise ContractError(f"patience must be >= 1, got {patience}")
        self.patience = patience
        self.best_score = -math.inf
        self.best_epoch = 0
        self.bad_epochs = 0

    def update(self, epoch: int, score: float) -> bool:
        if score > self.best_score:
            self.best_score = score
            self.best_epoch = epoch
            self.bad_epochs = 0
            return False
        self.bad_epochs += 1
        return self.bad_epochs >= self.patience

    @property
    def improved_last(self) -> bool:
        return self.bad_epochs == 0


@dataclass(frozen=True)
class EpochRecord:
    epoch: int
    train_loss: float
    val_loss: float
    val_macro_f1: float


@dataclass
class TrainingLog:
    records: List[EpochRecord] = field(default_factory=list)

    def append(self, record: EpochRecord) -> None:
        if self.records and record.epoch != self.records[-1].epoch + 1:
            raise ContractError("epochs must increase by one")
        if not self.records and record.epoch != 1:
            raise ContractError("the first epoch is 1")
        self.records.append(record)

    def __len__(self) -> int:
        return len(self.records)

    def to_csv(self) -> str:
        lines = ["epoch,train_loss,val_loss,val_macro_f1"]
        for r in self.records:
            lines.append(f"{r.epoch},{r.train_loss!r},{r.val_loss!r},{r.val_macro_f1!r}")
        return "\n".join(lines) + "\n"


@dataclass
class TrainResult:
    log: TrainingLog
    best_epoch: int
    best_params: Dict[str, np.ndarray]
    stopped_epoch: int
    steps: int

    def restore_best(self, model: BTransformer) -> None:
        for name, p in model.parameters().items():
            p.data = self.best_params[name].copy()


def _batches(n: int, batch_size: int):
    for start in range(0, n, batch_size):
        yield start, min(start + batch_size, n)


def evaluate(
    model: BTransformer, dataset: PairDataset, batch_size: int = 16, threshold: Optional[float] = None
) -> Tuple[float, float, np.ndarray]:
    """Mean per-sample BCE, macro-F1 and the probability matrix over ``dataset``."""
    threshold = model.config.threshold if threshold is None else threshold
    probs = []
    total = 0.0
    with no_grad():
        for lo, hi in _batches(len(dataset), batch_size):
            ids, mask, labels = collate(dataset.samples[lo:hi])
            out = model.forward(ids, mask, training=False)
            total += bce_loss(out, labels).item() * (hi - lo)
            probs.append(out.data)
    probs = np.concatenate(probs) if probs else np.zeros((0, model.config.num_classes))
    f1, _ = macro_f1(predict_labels(probs, threshold), dataset.labels)
    return total / max(len(dataset), 1), f1, probs


def train(
    model: BTransformer,
    train_set: PairDataset,
    dev_set: PairDataset,
    config: Optional[ModelConfig] = None,
    on_epoch: Optional[Callable[[EpochRecord], None]] = None,
) -> TrainResult:
    """Mini-batch training with warm-up, AdamW and early stopping on dev macro-F1.

    Shuffling and dropout draw from generators derived from ``config.seed``,
    so equal seeds give identical logs.
    """
    config = config or model.config
    if len(train_set) == 0 or len(dev_set) == 0:
        raise ContractError("training and dev sets must be non-empty")
    shuffle_rng = np.random.default_rng([config.seed, 2])
    dropout_rng = np.random.default_rng([config.seed, 3])
    params = model.trainable_parameters()
    state = AdamWState(weight_decay=config.weight_decay)
    per_epoch = math.ceil(len(train_set) / config.batch_size)
    total_steps = config.max_epochs * per_epoch
    t_warmup = warmup_steps(config.warmup_fraction, config.max_epochs, per_epoch)
    stopper = EarlyStopping(config.patience)
    log = TrainingLog()
    best_params = {k: p.data.copy() for k, p in model.parameters().items()}
    step = 0
    epoch = 0
    for epoch in range(1, config.max_epochs + 1):
        order = shuffle_rng.permutation(len(train_set))
        running = 0.0
        for lo, hi in _batches(len(order), config.batch_size):
            ids, mask, labels = collate([train_set.samples[i] for i in order[lo:hi]])
            model.zero_grad()
            loss = bce_loss(model.forward(ids, mask, training=True, rng=dropout_rng), labels)
            value = loss.item()
            step += 1
            if not math.isfinite(value):
                raise TrainingDivergedError(step, value)
            backward(loss)
            lr = lr_at_step(step, config.alpha0, t_warmup, config.lr_decay, total_steps)
            adamw_step(params, state, lr)
            running += value * (hi - lo)
        val_loss, val_f1, _ = evaluate(model, dev_set, config.batch_size, config.threshold)
        record = EpochRecord(epoch, running / len(train_set), val_loss, val_f1)
        log.append(record)
        logger.info("epoch %d train_loss=%.6f val_loss=%.6f val_macro_f1=%.4f",
                    epoch, record.train_loss, val_loss, val_f1)
        if on_epoch is not None:
            on_epoch(record)
        stop = stopper.update(epoch, val_f1)
        if stopper.improved_last:
            best_params = {k: p.data.copy() for k, p in model.parameters().items()}
        if stop:
            break
    return TrainResult(log, stopper.best_epoch, best_params, epoch, step)

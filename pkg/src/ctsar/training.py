"""Class-weighted training with Adam, plus evaluation metrics."""

from __future__ import annotations

import logging
import warnings
from dataclasses import dataclass, field, fields
from fractions import Fraction
from typing import Callable, Optional, Sequence, TextIO

import numpy as np

from .layers import NUM_CLASSES, Module
from .tensor import Tensor, backward, log_softmax, mul, no_grad
from .tensor import sum as tsum

logger = logging.getLogger(__name__)

METRICS_COLUMNS = ("epoch", "train_loss", "train_acc", "val_loss", "val_acc")


class TrainingError(ValueError):
    pass


@dataclass
class TrainConfig:
    learning_rate: float = 0.001
    weight_decay: float = 5e-4
    batch_size: int = 32
    epochs: int = 50
    val_fraction: float = 0.15
    seed: int = 0
    adam_beta1: float = 0.9
    adam_beta2: float = 0.999
    adam_eps: float = 1e-8

    def __post_init__(self):
        if not 0 < self.val_fraction < 1:
            raise TrainingError(f"val_fraction must lie in (0, 1), got {self.val_fraction}")
        if self.batch_size < 1:
            raise TrainingError(f"batch_size must be >= 1, got {self.batch_size}")
        if self.epochs < 0:
            raise TrainingError(f"epochs must be >= 0, got {self.epochs}")
        # lr=0 is allowed as a frozen-parameter probe
        if self.learning_rate < 0:
            raise TrainingError(f"learning_rate must be non-negative, got {self.learning_rate}")

    @classmethod
    def field_names(cls) -> list[str]:
        return [f.name for f in fields(cls)]


def class_weights_from_counts(counts: Sequence[int]) -> np.ndarray:
    """Balanced inverse-frequency weights ``N / (K * n_c)``."""
    counts = [int(c) for c in counts]
    if any(c < 1 for c in counts):
        raise TrainingError(f"every class needs at least one sample, got counts {counts}")
    total, k = sum(counts), len(counts)
    return np.array([float(Fraction(total, k * c)) for c in counts])


def weighted_cross_entropy(logits: Tensor, labels, weights=None) -> Tensor:
    """Weighted-mean cross-entropy: ``sum_i w[y_i] * nll_i / sum_i w[y_i]``."""
    labels = np.asarray(labels, dtype=np.int64)
    n_cls = logits.shape[1]
    if labels.shape != (logits.shape[0],):
        raise TrainingError(f"labels shape {labels.shape} does not match logits {logits.shape}")
    if labels.size and (labels.min() < 0 or labels.max() >= n_cls):
        raise TrainingError(f"labels must lie in [0, {n_cls - 1}], got {labels.tolist()}")
    w = np.ones(n_cls) if weights is None else np.asarray(weights, dtype=np.float64)
    per_sample = w[labels]
    # one-hot rows scaled by the sample weight and the normaliser
    target = np.zeros(logits.shape, dtype=logits.dtype)
    target[np.arange(labels.size), labels] = per_sample / per_sample.sum()
    return -tsum(mul(log_softmax(logits, axis=1), Tensor(target, dtype=logits.dtype)))


@dataclass
class AdamState:
    m: list[np.ndarray]
    v: list[np.ndarray]
    t: int = 0

    @classmethod
    def zeros_like(cls, params: Sequence[Tensor]) -> "AdamState":
        return cls([np.zeros_like(p.data) for p in params], [np.zeros_like(p.data) for p in params])


def adam_step(params: Sequence[Tensor], grads: Sequence[np.ndarray], state: AdamState, cfg: TrainConfig) -> None:
    """One Adam update in place, with L2 weight decay folded into the gradient."""
    if len(params) != len(grads) or len(params) != len(state.m):
        raise TrainingError("params, grads and optimizer state differ in length")
    state.t += 1
    b1, b2 = cfg.adam_beta1, cfg.adam_beta2
    c1 = 1.0 - b1**state.t
    c2 = 1.0 - b2**state.t
    for p, g, m, v in zip(params, grads, state.m, state.v):
        if g.shape != p.shape:
            raise TrainingError(f"gradient shape {g.shape} != parameter shape {p.shape}")
        if cfg.weight_decay:
            g = g + cfg.weight_decay * p.data
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * (g * g)
        step = (cfg.learning_rate / c1) * m / (np.sqrt(v / c2) + cfg.adam_eps)
        p.data -= step.astype(p.dtype, copy=False)


class Adam:
    def __init__(self, params: Sequence[Tensor], cfg: TrainConfig):
        self.params = list(params)
        self.cfg = cfg
        self.state = AdamState.zeros_like(self.params)

    def step(self) -> None:
        grads = [p.grad if p.grad is not None else np.zeros_like(p.data) for p in self.params]
        adam_step(self.params, grads, self.state, self.cfg)


@dataclass
class Metrics:
    accuracy: float
    per_class_accuracy: np.ndarray
    confusion: np.ndarray  # rows: true class, cols: predicted
    loss: float = float("nan")
    predictions: Optional[np.ndarray] = field(default=None, repr=False)
    logits: Optional[np.ndarray] = field(default=None, repr=False)

    def format(self) -> str:
        lines = [f"accuracy: {self.accuracy:.6f}", f"loss: {self.loss:.6f}"]
        for c, acc in enumerate(self.per_class_accuracy):
            lines.append(f"score{c + 1} accuracy: {acc:.6f} (n={int(self.confusion[c].sum())})")
        lines.append("confusion (rows=true score1..4, cols=predicted):")
        lines.extend(" ".join(f"{int(n):6d}" for n in row) for row in self.confusion)
        return "\n".join(lines)


def metrics_from_predictions(labels, predictions, n_classes: int = NUM_CLASSES, loss: float = float("nan")) -> Metrics:
    labels = np.asarray(labels, dtype=np.int64)
    predictions = np.asarray(predictions, dtype=np.int64)
    confusion = np.zeros((n_classes, n_classes), dtype=np.int64)
    np.add.at(confusion, (labels, predictions), 1)
    support = confusion.sum(axis=1)
    with np.errstate(invalid="ignore", divide="ignore"):
        per_class = np.where(support > 0, np.diag(confusion) / np.maximum(support, 1), np.nan)
    acc = float(np.trace(confusion) / max(labels.size, 1))
    return Metrics(acc, per_class, confusion, loss, predictions)


def predict_logits(model: Module, images: np.ndarray, batch_size: int = 32) -> np.ndarray:
    outs = []
    with no_grad():
        for start in range(0, len(images), batch_size):
            outs.append(model(Tensor(images[start : start + batch_size])).data)
    return np.concatenate(outs, axis=0)


def evaluate(model: Module, images: np.ndarray, labels, weights=None, batch_size: int = 32) -> Metrics:
    """Accuracy, per-class accuracy, confusion matrix and weighted loss.

    Predictions take the argmax of the logits; ties go to the lowest class index.
    """
    if len(images) == 0:
        raise TrainingError("cannot evaluate on an empty sample set")
    labels = np.asarray(labels, dtype=np.int64)
    logits = predict_logits(model, images, batch_size)
    with no_grad():
        loss = weighted_cross_entropy(Tensor(logits.astype(np.float64)), labels, weights).item()
    m = metrics_from_predictions(labels, logits.argmax(axis=1), logits.shape[1], loss)
    m.logits = logits
    return m


@dataclass
class EpochRecord:
    epoch: int
    train_loss: float
    train_acc: float
    val_loss: float
    val_acc: float

    def csv_row(self) -> str:
        return ",".join([str(self.epoch)] + [repr(float(getattr(self, c))) for c in METRICS_COLUMNS[1:]])


@dataclass
class TrainResult:
    history: list[EpochRecord]
    steps: int
    step_losses: list[float] = field(default_factory=list)
    best_state: Optional[dict] = None
    best_epoch: Optional[int] = None
    weights: Optional[np.ndarray] = None


def observed_class_weights(labels, n_classes: int = NUM_CLASSES) -> np.ndarray:
    counts = np.bincount(np.asarray(labels, dtype=np.int64), minlength=n_classes)
    missing = [c + 1 for c in range(n_classes) if counts[c] == 0]
    if missing:
        warnings.warn(f"training portion has no samples for score(s) {missing}; they get unit weight")
        present = counts > 0
        w = np.ones(n_classes)
        w[present] = counts[present].sum() / (n_classes * counts[present])
        return w
    return class_weights_from_counts(counts)


def train(
    model: Module,
    train_images: np.ndarray,
    train_labels,
    cfg: TrainConfig,
    val_images: Optional[np.ndarray] = None,
    val_labels=None,
    metrics_stream: Optional[TextIO] = None,
    max_steps: Optional[int] = None,
    on_epoch_end: Optional[Callable[[EpochRecord, int], bool]] = None,
) -> TrainResult:
    """Shuffled minibatch training for ``cfg.epochs`` epochs.

    Train loss/accuracy in the history are running averages over the epoch's
    minibatches. ``on_epoch_end(record, steps)`` may return True to stop early.
    """
    train_labels = np.asarray(train_labels, dtype=np.int64)
    if len(train_images) == 0:
        raise TrainingError("training set is empty")
    weights = observed_class_weights(train_labels)
    rng = np.random.default_rng(cfg.seed)
    params = model.parameters()
    opt = Adam(params, cfg)
    has_val = val_images is not None and len(val_images) > 0

    if metrics_stream is not None:
        metrics_stream.write(",".join(METRICS_COLUMNS) + "\n")

    history: list[EpochRecord] = []
    step_losses: list[float] = []
    steps = 0
    best_acc, best_state, best_epoch = -1.0, None, None
    n = len(train_images)
    for epoch in range(1, cfg.epochs + 1):
        order = rng.permutation(n)
        loss_sum, correct, seen = 0.0, 0, 0
        for start in range(0, n, cfg.batch_size):
            if max_steps is not None and steps >= max_steps:
                break
            idx = order[start : start + cfg.batch_size]
            logits = model(Tensor(train_images[idx]))
            loss = weighted_cross_entropy(logits, train_labels[idx], weights)
            model.zero_grad()
            backward(loss, params)
            opt.step()
            steps += 1
            step_losses.append(loss.item())
            loss_sum += loss.item() * len(idx)
            correct += int((logits.data.argmax(axis=1) == train_labels[idx]).sum())
            seen += len(idx)
        if seen == 0:
            break
        if has_val:
            vm = evaluate(model, val_images, val_labels, weights, batch_size=cfg.batch_size)
            val_loss, val_acc = vm.loss, vm.accuracy
        else:
            val_loss = val_acc = float("nan")
        rec = EpochRecord(epoch, loss_sum / seen, correct / seen, val_loss, val_acc)
        history.append(rec)
        logger.info("epoch %d: train_loss=%.4f train_acc=%.4f val_loss=%.4f val_acc=%.4f",
                    epoch, rec.train_loss, rec.train_acc, rec.val_loss, rec.val_acc)
        if metrics_stream is not None:
            metrics_stream.write(rec.csv_row() + "\n")
            metrics_stream.flush()
        if has_val and val_acc > best_acc:
            best_acc, best_state, best_epoch = val_acc, model.state_dict(), epoch
        if on_epoch_end is not None and on_epoch_end(rec, steps):
            break
        if max_steps is not None and steps >= max_steps:
            break
    return TrainResult(history, steps, step_losses, best_state, best_epoch, weights)

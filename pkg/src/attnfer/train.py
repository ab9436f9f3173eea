"""SGD with momentum, the epoch loop, and evaluation metrics."""

import math
from dataclasses import dataclass, field

import numpy as np

from .errors import ConfigError, EmptyDataset, NonFinite
from .layers import softmax_xent
from .rng import Stream

LOG_HEADER = "epoch\ttrain_loss\ttrain_acc\tval_loss\tval_acc"


@dataclass(frozen=True)
class TrainConfig:
    lr: float = 0.01
    momentum: float = 0.9
    weight_decay: float = 0.0
    batch_size: int = 10
    epochs: int = 10
    seed: int = 0
    shuffle: bool = True

    def __post_init__(self):
        if not self.lr >= 0:
            raise ConfigError("lr must be >= 0")
        if not 0 <= self.momentum < 1:
            raise ConfigError("momentum must lie in [0, 1)")
        if self.batch_size < 1:
            raise ConfigError("batch_size must be >= 1")
        if self.epochs < 0:
            raise ConfigError("epochs must be >= 0")


@dataclass
class Metrics:
    loss: float
    accuracy: float
    per_class_accuracy: list = field(default_factory=list)
    counts: list = field(default_factory=list)


class SGD:
    """``v = momentum * v + grad + weight_decay * w``; ``w -= lr * v``; grads are zeroed after each step."""

    def __init__(self, params, lr, momentum=0.0, weight_decay=0.0):
        self.params = list(params)
        self.lr = lr
        self.momentum = momentum
        self.weight_decay = weight_decay
        self.velocity = [np.zeros(p.shape) for p in self.params]

    @classmethod
    def from_config(cls, params, cfg):
        return cls(params, cfg.lr, cfg.momentum, cfg.weight_decay)

    def step(self):
        for p, v in zip(self.params, self.velocity):
            v *= self.momentum
            v += p.grad
            if self.weight_decay:
                v += self.weight_decay * p.value
            if not np.all(np.isfinite(v)):
                raise NonFinite(f"non-finite update for {p.name}")
            p.value -= self.lr * v
            p.zero_grad()


def sgd_step(params, cfg, optimizer=None):
    """One update of ``params``; pass the returned optimizer back in to keep momentum."""
    optimizer = optimizer or SGD.from_config(params, cfg)
    optimizer.step()
    return optimizer


def _batches(n, batch_size, order):
    for start in range(0, n, batch_size):
        yield order[start : start + batch_size]


def _metrics(loss_sum, predictions, labels, classes):
    n = len(labels)
    correct = predictions == labels
    counts = np.bincount(labels, minlength=classes)
    hits = np.bincount(labels[correct], minlength=classes)
    per_class = [float(h / c) if c else math.nan for h, c in zip(hits, counts)]
    return Metrics(loss_sum / n, float(correct.sum() / n), per_class, counts.tolist())


def train_epoch(model, data, cfg, optimizer, epoch=0):
    """One pass over ``data`` in train mode. Shuffle order comes from stream ``(seed, epoch)``.

    Loss and accuracy are averaged over samples using the train-mode outputs
    seen during the pass.
    """
    n = len(data)
    if n == 0:
        raise EmptyDataset("empty dataset")
    order = Stream(cfg.seed, 10_000 + epoch).permutation(n) if cfg.shuffle else np.arange(n)
    classes = model.spec.classes
    loss_sum = 0.0
    preds = np.empty(n, dtype=np.int64)
    for b, idx in enumerate(_batches(n, cfg.batch_size, order)):
        try:
            logits = model.forward(data.images[idx], "train")
            loss, grad = softmax_xent(logits, data.labels[idx])
            if not math.isfinite(loss):
                raise NonFinite("non-finite loss")
            model.backward(grad)
            optimizer.step()
        except NonFinite as exc:
            raise NonFinite(f"epoch {epoch}, batch {b}: {exc}") from exc
        loss_sum += loss * len(idx)
        preds[idx] = np.argmax(logits, axis=1)
    return _metrics(loss_sum, preds, data.labels, classes)


def evaluate(model, data, batch_size=64):
    """Infer-mode loss and accuracy; argmax ties go to the lowest class index."""
    n = len(data)
    if n == 0:
        raise EmptyDataset("empty dataset")
    loss_sum = 0.0
    preds = np.empty(n, dtype=np.int64)
    for idx in _batches(n, batch_size, np.arange(n)):
        logits = model.forward(data.images[idx], "infer")
        loss, _ = softmax_xent(logits, data.labels[idx])
        loss_sum += loss * len(idx)
        preds[idx] = np.argmax(logits, axis=1)
    return _metrics(loss_sum, preds, data.labels, model.spec.classes)


def format_log_line(epoch, train, val=None):
    vl, va = (math.nan, math.nan) if val is None else (val.loss, val.accuracy)
    return f"{epoch}\t{train.loss:.6f}\t{train.accuracy:.6f}\t{vl:.6f}\t{va:.6f}"


def fit(model, train_data, cfg, val_data=None, log=None):
    """Run ``cfg.epochs`` epochs; ``log`` (a text stream) receives the TSV epoch log.

    Returns ``(history, optimizer)`` where history is a list of
    ``(train_metrics, val_metrics_or_None)``.
    """
    optimizer = SGD.from_config(model.parameters(), cfg)
    history = []
    if log is not None:
        log.write(LOG_HEADER + "\n")
    for epoch in range(1, cfg.epochs + 1):
        tm = train_epoch(model, train_data, cfg, optimizer, epoch)
        vm = evaluate(model, val_data, cfg.batch_size) if val_data is not None else None
        history.append((tm, vm))
        if log is not None:
            log.write(format_log_line(epoch, tm, vm) + "\n")
            log.flush()
    return history, optimizer

"""Minibatch SGD training and accuracy evaluation."""
from __future__ import annotations

import logging
from dataclasses import asdict, dataclass, field

import numpy as np

from .dataio import Dataset
from .errors import NumericalError
from .layers import Network
from .tensor import SGD, Tensor, backward, cyclic_lr, softmax_cross_entropy

logger = logging.getLogger(__name__)


@dataclass
class TrainConfig:
    epochs: int = 8
    batch_size: int = 32
    lr: float = 0.02
    momentum: float = 0.9
    seed: int = 0
    flip: bool = False
    schedule: str = "cyclic"
    cycles: int = 1
    augment_kind: str | None = None
    augment_severity: float = 0.0
    augment_prob: float = 0.5

    def __post_init__(self):
        if self.epochs < 0 or self.batch_size < 1 or self.lr <= 0 or not 0 <= self.momentum < 1:
            raise ValueError(f"invalid training hyperparameters: {self}")
        if self.schedule not in ("constant", "cyclic") or self.cycles < 1:
            raise ValueError(f"unknown schedule {self.schedule!r}")

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass
class History:
    loss: list = field(default_factory=list)
    train_acc: list = field(default_factory=list)
    val_acc: list = field(default_factory=list)

    def to_dict(self) -> dict:
        return asdict(self)


def accuracy(model: Network, images: np.ndarray, labels: np.ndarray, batch_size: int = 256) -> float:
    """Top-1 accuracy in percent."""
    pred = model.predict(images, batch_size)
    return 100.0 * float(np.mean(pred == labels))


def _augment(images: np.ndarray, config: TrainConfig, rng: np.random.Generator) -> np.ndarray:
    if config.flip:
        flip = rng.random(len(images)) < 0.5
        images = np.where(flip[:, None, None, None], images[..., ::-1], images)
    if config.augment_kind and config.augment_severity > 0:
        from .perturbations import PerturbationSpec, apply_perturbation
        chosen = rng.random(len(images)) < config.augment_prob
        images = images.copy()
        for i in np.flatnonzero(chosen):
            spec = PerturbationSpec(config.augment_kind, config.augment_severity,
                                    seed=int(rng.integers(2 ** 31)))
            images[i] = apply_perturbation(images[i], spec)
    return images


def train(model: Network, dataset: Dataset, config: TrainConfig,
          val: Dataset | None = None) -> History:
    """Train in place; the shuffling and augmentation streams derive from ``config.seed``."""
    rng = np.random.default_rng(config.seed)
    params = model.parameters()
    opt = SGD(params, config.lr, config.momentum)
    history = History()
    n = len(dataset)
    steps_per_epoch = max(1, -(-n // config.batch_size))
    step = 0
    for epoch in range(config.epochs):
        order = rng.permutation(n)
        total, correct, seen = 0.0, 0, 0
        for start in range(0, n, config.batch_size):
            idx = order[start:start + config.batch_size]
            x = _augment(dataset.images[idx], config, rng)
            y = dataset.labels[idx]
            try:
                logits = model(Tensor(x))
                loss = softmax_cross_entropy(logits, y)
                backward(loss)
            except NumericalError as exc:
                raise NumericalError(f"training diverged in epoch {epoch}: {exc}") from exc
            lr = config.lr
            if config.schedule == "cyclic":
                half = max(1, (steps_per_epoch * config.epochs) // (2 * config.cycles))
                lr = cyclic_lr(step, config.lr * 0.05, config.lr, half)
            opt.step(lr)
            step += 1
            total += loss.item() * len(idx)
            correct += int(np.sum(np.argmax(logits.data, axis=1) == y))
            seen += len(idx)
        history.loss.append(total / seen)
        history.train_acc.append(100.0 * correct / seen)
        if val is not None:
            history.val_acc.append(accuracy(model, val.images, val.labels))
        logger.info("epoch %d loss %.4f train %.2f%%%s", epoch, history.loss[-1], history.train_acc[-1],
                    f" val {history.val_acc[-1]:.2f}%" if val is not None else "")
    return history

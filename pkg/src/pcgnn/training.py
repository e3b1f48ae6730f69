"""Supervised training, evaluation metrics and the point-dropping protocol."""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .geometry import PointCloud, drop_points, random_rotation, substream
from .models import Batch, Model, ModelConfig, build_model, predict
from .tensor import NonFiniteError, Tape, backward, cross_entropy

log = logging.getLogger(__name__)


class DivergenceError(FloatingPointError):
    def __init__(self, epoch: int, detail: str = ""):
        super().__init__(f"training diverged at epoch {epoch}{': ' + detail if detail else ''}")
        self.epoch = epoch


@dataclass(frozen=True)
class Hyper:
    epochs: int = 60
    batch_size: int = 16
    lr: float = 1e-3
    optimizer: str = "adam"
    betas: tuple[float, float] = (0.9, 0.999)
    eps: float = 1e-8
    momentum: float = 0.9
    seed: int = 0
    rotate: bool = True
    jitter: float = 0.0
    drop_max: float = 0.0
    eval_every: int = 1
    schedule: str = "constant"

    def __post_init__(self):
        if self.epochs < 1 or self.batch_size < 2:
            raise ValueError("epochs must be >= 1 and batch_size >= 2")
        if self.lr < 0 or self.jitter < 0 or self.eps <= 0:
            raise ValueError("lr, jitter must be non-negative and eps positive")
        if not 0 <= self.drop_max < 1:
            raise ValueError(f"drop_max must lie in [0, 1), got {self.drop_max}")
        if self.optimizer not in ("adam", "sgd"):
            raise ValueError(f"unknown optimizer {self.optimizer!r}")
        if self.schedule not in ("cosine", "constant"):
            raise ValueError(f"unknown schedule {self.schedule!r}")

    def lr_at(self, epoch: int) -> float:
        """Learning rate for 1-based ``epoch``; cosine decays towards lr/100 at the end."""
        if self.schedule == "constant" or self.epochs == 1:
            return self.lr
        frac = (epoch - 1) / (self.epochs - 1)
        floor = self.lr / 100
        return floor + 0.5 * (self.lr - floor) * (1 + math.cos(math.pi * frac))


@dataclass
class Metrics:
    oa: float
    macc: float
    confusion: np.ndarray

    @classmethod
    def from_predictions(cls, labels, preds, classes: int) -> "Metrics":
        labels = np.asarray(labels, dtype=np.int64)
        preds = np.asarray(preds, dtype=np.int64)
        conf = np.zeros((classes, classes), dtype=np.int64)
        np.add.at(conf, (labels, preds), 1)
        return cls.from_confusion(conf)

    @classmethod
    def from_confusion(cls, conf) -> "Metrics":
        conf = np.asarray(conf, dtype=np.int64)
        total = conf.sum()
        oa = float(np.trace(conf) / total)
        support = conf.sum(axis=1)
        present = support > 0
        recalls = np.diag(conf)[present] / support[present]
        return cls(oa, float(recalls.mean()), conf)


@dataclass
class EpochRecord:
    epoch: int
    loss: float
    train_oa: float
    test_oa: float | None


class _Adam:
    def __init__(self, params, lr, betas, eps):
        self.params = params
        self.lr, (self.b1, self.b2), self.eps = lr, betas, eps
        self.m = [np.zeros_like(p.data) for p in params]
        self.v = [np.zeros_like(p.data) for p in params]
        self.t = 0

    def step(self):
        self.t += 1
        c1 = 1 - self.b1 ** self.t
        c2 = 1 - self.b2 ** self.t
        for p, m, v in zip(self.params, self.m, self.v):
            g = p.grad
            if g is None:
                continue
            m *= self.b1
            m += (1 - self.b1) * g
            v *= self.b2
            v += (1 - self.b2) * g * g
            p.data = p.data - self.lr * (m / c1) / (np.sqrt(v / c2) + self.eps)


class _Sgd:
    def __init__(self, params, lr, momentum):
        self.params, self.lr, self.mu = params, lr, momentum
        self.buf = [np.zeros_like(p.data) for p in params]

    def step(self):
        for p, b in zip(self.params, self.buf):
            if p.grad is None:
                continue
            b *= self.mu
            b += p.grad
            p.data = p.data - self.lr * b


def _augment(cloud: PointCloud, hyper: Hyper, rng: np.random.Generator) -> PointCloud:
    pos = cloud.positions
    if hyper.rotate:
        pos = pos @ random_rotation(rng).T
    if hyper.jitter > 0:
        pos = pos + rng.normal(scale=hyper.jitter, size=pos.shape)
    if pos is not cloud.positions:
        cloud = cloud.with_positions(pos)
    if hyper.drop_max > 0:
        # random input dropout: keep a random share of the points, at least 9
        n = len(cloud)
        keep = max(min(n, 9), int(round(n * (1 - rng.uniform(0, hyper.drop_max)))))
        cloud = cloud.subset(np.sort(rng.choice(n, keep, replace=False)))
    return cloud


def _batches(n: int, batch_size: int, rng: np.random.Generator) -> list[np.ndarray]:
    order = rng.permutation(n)
    return np.array_split(order, max(1, n // batch_size))


def train_classifier(config: ModelConfig, dataset, hyper: Hyper, model: Model | None = None,
                     test: Sequence[PointCloud] | None = None):
    """Fit ``config`` on ``dataset`` (a list of labelled clouds, or a (train, test) pair).

    Returns ``(model, history)`` where ``history`` holds one
    :class:`EpochRecord` per epoch.
    """
    if isinstance(dataset, tuple):
        train, test = dataset
    else:
        train = dataset
    labels = np.array([c.label for c in train])
    if len(train) < 2 or np.any(labels < 0) or np.any(labels >= config.classes):
        raise ValueError(f"training labels must lie in [0, {config.classes})")
    model = model or build_model(config, hyper.seed)
    params = model.parameters()
    if hyper.optimizer == "adam":
        opt = _Adam(params, hyper.lr, hyper.betas, hyper.eps)
    else:
        opt = _Sgd(params, hyper.lr, hyper.momentum)
    order_rng = substream(hyper.seed, "batches")
    aug_rng = substream(hyper.seed, "augment")
    history: list[EpochRecord] = []
    for epoch in range(1, hyper.epochs + 1):
        opt.lr = hyper.lr_at(epoch)
        total, seen, correct = 0.0, 0, 0
        for idx in _batches(len(train), hyper.batch_size, order_rng):
            clouds = [_augment(train[i], hyper, aug_rng) for i in idx]
            batch = Batch.from_clouds(clouds, config.k, clamp=hyper.drop_max > 0)
            tape = Tape()
            try:
                with tape:
                    logits = model.forward(batch, train=True)
                    loss = cross_entropy(logits, batch.labels)
            except NonFiniteError as exc:
                raise DivergenceError(epoch, str(exc)) from None
            value = loss.item()
            if not math.isfinite(value):
                raise DivergenceError(epoch, "non-finite loss")
            backward(tape, loss)
            opt.step()
            total += value * len(idx)
            seen += len(idx)
            correct += int((logits.data.argmax(axis=1) == batch.labels).sum())
        test_oa = None
        if test and (epoch % hyper.eval_every == 0 or epoch == hyper.epochs):
            test_oa = evaluate(model, test).oa
        rec = EpochRecord(epoch, total / seen, correct / seen, test_oa)
        history.append(rec)
        log.info("epoch %d loss %.4f train %.3f test %s", epoch, rec.loss, rec.train_oa,
                 "-" if test_oa is None else f"{test_oa:.3f}")
    return model, history


def evaluate(model: Model, dataset: Sequence[PointCloud], batch_size: int = 32) -> Metrics:
    if not dataset:
        raise ValueError("cannot evaluate on an empty dataset")
    preds = predict(model, list(dataset), batch_size)
    labels = [c.label for c in dataset]
    return Metrics.from_predictions(labels, preds, model.config.classes)


def robustness_curve(model: Model, dataset: Sequence[PointCloud], fractions: Sequence[float],
                     seed: int, batch_size: int = 32) -> list[tuple[float, float]]:
    """Overall accuracy after randomly dropping each fraction of every cloud's points.

    Neighbour graphs are rebuilt on the surviving points with ``k`` clamped
    to ``survivors - 1``.
    """
    rng = substream(seed, "drop")
    cloud_seeds = rng.integers(0, 2 ** 62, size=len(dataset))
    labels = [c.label for c in dataset]
    out = []
    for f in fractions:
        dropped = []
        for c, s in zip(dataset, cloud_seeds):
            d = drop_points(c, f, int(s))
            if len(d) <= 8:
                raise ValueError(f"dropping {f:.0%} leaves {len(d)} points; more than 8 must survive")
            dropped.append(d)
        preds = predict(model, dropped, batch_size, clamp=True)
        out.append((float(f), Metrics.from_predictions(labels, preds, model.config.classes).oa))
    return out

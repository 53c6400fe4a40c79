"""Model training: plain SGD and the adversarial-training-for-free loop.

The robust loop replays each minibatch m times; every replay does one
forward/backward through the transform-then-model graph and spends it
twice: gradient descent on the weights and projected sign ascent on
persistent per-transform parameter buffers. Budgets are counted in
forward/backward passes, so robust and standard training at equal
``total_passes`` consume equal compute.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .data import Dataset
from .models import ModelWeights, SmallCNN
from .seeding import substream
from .transforms import TransformDescriptor, box_widths, in_box, project


@dataclass
class TrainConfig:
    total_passes: int = 2000
    batch_size: int = 32
    lr: float = 0.05
    seed: int = 0

    def validate(self) -> None:
        if self.total_passes < 1:
            raise ValueError("total_passes must be >= 1")
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")


@dataclass
class ATFConfig(TrainConfig):
    m: int = 4
    ascent_frac: float = 0.05
    transforms: list[TransformDescriptor] = field(default_factory=list)

    def validate(self) -> None:
        super().validate()
        if self.m < 1:
            raise ValueError("replay count m must be >= 1")
        if self.total_passes < self.m:
            raise ValueError("total_passes must be >= m")
        if not self.transforms:
            raise ValueError("adversarial training needs at least one transform")
        for t in self.transforms:
            if not t.differentiable:
                raise ValueError(
                    f"transform {t.kind!r} is not differentiable and cannot be trained against"
                )


@dataclass
class TrainHistory:
    loss_per_pass: list[float]
    epoch_train_accuracy: list[float]
    passes: int
    final_theta: dict[str, dict[str, list]] | None = None


def _forward_batch(model: SmallCNN, images_hwc: Tensor) -> Tensor:
    return model.forward(ad.transpose(images_hwc, (0, 3, 1, 2)))


def _epoch_batches(n: int, batch_size: int, seed: int, epoch: int) -> list[np.ndarray]:
    perm = substream(seed, "train", epoch).permutation(n)
    return [perm[i : i + batch_size] for i in range(0, n, batch_size)]


def _sgd_step(model: SmallCNN, lr: float) -> None:
    for p in model.parameters():
        if p.grad is not None:
            p.data = p.data - np.float32(lr) * p.grad


class _EpochAccuracy:
    def __init__(self):
        self.correct = 0
        self.total = 0
        self.per_epoch: list[float] = []

    def update(self, logits: np.ndarray, labels: np.ndarray) -> None:
        self.correct += int((logits.argmax(axis=1) == labels).sum())
        self.total += len(labels)

    def roll(self) -> None:
        if self.total:
            self.per_epoch.append(self.correct / self.total)
        self.correct = 0
        self.total = 0


def train_standard(model: SmallCNN, dataset: Dataset, cfg: TrainConfig) -> tuple[ModelWeights, TrainHistory]:
    """Plain minibatch SGD on cross-entropy for exactly total_passes passes."""
    cfg.validate()
    if len(dataset) == 0:
        raise ValueError("cannot train on an empty dataset")
    losses: list[float] = []
    acc = _EpochAccuracy()
    passes, epoch = 0, 0
    while passes < cfg.total_passes:
        for idx in _epoch_batches(len(dataset), cfg.batch_size, cfg.seed, epoch):
            if passes >= cfg.total_passes:
                break
            x = Tensor(dataset.images[idx])
            y = dataset.labels[idx]
            model.zero_grad()
            logits = _forward_batch(model, x)
            loss = ad.cross_entropy(logits, y)
            ad.backward(loss)
            _sgd_step(model, cfg.lr)
            losses.append(float(loss.data))
            acc.update(logits.data, y)
            passes += 1
        epoch += 1
        acc.roll()
    return model.weights(), TrainHistory(losses, acc.per_epoch, passes)


def train_atf(model: SmallCNN, dataset: Dataset, cfg: ATFConfig) -> tuple[ModelWeights, TrainHistory]:
    """Adversarial training for free, generalized over transform parameters.

    One persistent parameter buffer per transform, initialized at neutral,
    ascended by sign of the shared backward's gradient and projected into
    its box after every pass; buffers persist across minibatches and
    epochs. The final minibatch replays fewer than m times if needed to
    land exactly on total_passes.
    """
    cfg.validate()
    if len(dataset) == 0:
        raise ValueError("cannot train on an empty dataset")
    thetas = [t.neutral_params() for t in cfg.transforms]
    widths = [box_widths(t) for t in cfg.transforms]
    losses: list[float] = []
    acc = _EpochAccuracy()
    passes, epoch = 0, 0
    while passes < cfg.total_passes:
        for idx in _epoch_batches(len(dataset), cfg.batch_size, cfg.seed, epoch):
            if passes >= cfg.total_passes:
                break
            x_np = dataset.images[idx]
            y = dataset.labels[idx]
            replays = min(cfg.m, cfg.total_passes - passes)
            for _ in range(replays):
                model.zero_grad()
                leaves = [
                    {s.name: Tensor(theta[s.name], requires_grad=True) for s in t.specs}
                    for t, theta in zip(cfg.transforms, thetas)
                ]
                out = Tensor(x_np)
                for t, lv in zip(cfg.transforms, leaves):
                    out = t.apply_fn(out, lv)
                logits = _forward_batch(model, out)
                loss = ad.cross_entropy(logits, y)
                ad.backward(loss)
                _sgd_step(model, cfg.lr)
                for t, theta, wd, lv in zip(cfg.transforms, thetas, widths, leaves):
                    stepped = {
                        name: theta[name]
                        + np.float32(cfg.ascent_frac)
                        * wd[name]
                        * np.sign(lv[name].grad if lv[name].grad is not None else 0.0).astype(np.float32)
                        for name in theta
                    }
                    theta.update(project(stepped, t))
                    assert in_box(theta, t)
                losses.append(float(loss.data))
                acc.update(logits.data, y)
                passes += 1
        epoch += 1
        acc.roll()
    final_theta = {
        f"{i}:{t.kind}": {name: v.tolist() for name, v in theta.items()}
        for i, (t, theta) in enumerate(zip(cfg.transforms, thetas))
    }
    return model.weights(), TrainHistory(losses, acc.per_epoch, passes, final_theta=final_theta)

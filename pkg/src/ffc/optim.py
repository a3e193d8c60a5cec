"""Momentum SGD, learning-rate schedules, and mixup."""

import math
from dataclasses import asdict, dataclass

import numpy as np

from .errors import ConfigError

SCHEDULES = ("constant", "step", "cosine")


@dataclass
class TrainConfig:
    base_lr: float = 0.02
    momentum: float = 0.9
    weight_decay: float = 5e-4
    epochs: int = 5
    batch_size: int = 128
    schedule: str = "cosine"
    label_smoothing: float = 0.0
    mixup_alpha: float = 0.0
    seed: int = 0
    # step schedule: multiply by lr_gamma every lr_step epochs
    lr_step: int = 30
    lr_gamma: float = 0.1
    freeze_backbone: bool = False

    def __post_init__(self):
        self.validate()

    def validate(self):
        if not self.base_lr > 0:
            raise ConfigError(f"base_lr must be positive, got {self.base_lr}")
        if not 0 <= self.momentum < 1:
            raise ConfigError(f"momentum must be in [0,1), got {self.momentum}")
        if self.weight_decay < 0:
            raise ConfigError(f"weight_decay must be nonnegative, got {self.weight_decay}")
        if self.epochs < 1:
            raise ConfigError(f"epochs must be positive, got {self.epochs}")
        if self.batch_size < 1:
            raise ConfigError(f"batch_size must be positive, got {self.batch_size}")
        if self.schedule not in SCHEDULES:
            raise ConfigError(f"schedule must be one of {SCHEDULES}, got {self.schedule!r}")
        if not 0 <= self.label_smoothing < 1:
            raise ConfigError(f"label_smoothing must be in [0,1), got {self.label_smoothing}")
        if self.mixup_alpha < 0:
            raise ConfigError(f"mixup_alpha must be nonnegative, got {self.mixup_alpha}")
        if self.lr_step < 1 or not 0 < self.lr_gamma <= 1:
            raise ConfigError("step schedule needs lr_step >= 1 and lr_gamma in (0,1]")

    def to_dict(self):
        return asdict(self)


class SGD:
    """Heavy-ball SGD with coupled L2 weight decay.

    v <- momentum * v + grad + weight_decay * value
    value <- value - lr * v
    """

    def __init__(self, params, momentum=0.9, weight_decay=0.0):
        self.params = list(params)
        self.momentum = momentum
        self.weight_decay = weight_decay
        self.velocity = [np.zeros_like(p.value) for p in self.params]

    def zero_grad(self):
        for p in self.params:
            p.zero_grad()

    def step(self, lr):
        for p, v in zip(self.params, self.velocity):
            g = p.grad
            if self.weight_decay:
                g = g + self.weight_decay * p.value
            v *= self.momentum
            v += g
            p.value -= p.value.dtype.type(lr) * v


def sgd_step(params, velocity, lr, momentum, weight_decay):
    """Functional single step; ``velocity`` is a list aligned with ``params``."""
    opt = SGD([], momentum, weight_decay)
    opt.params, opt.velocity = list(params), velocity
    opt.step(lr)


def cosine_lr(epoch, total, base_lr):
    if total <= 0:
        raise ConfigError(f"cosine schedule needs a positive horizon, got {total}")
    if not 0 <= epoch <= total:
        raise ConfigError(f"epoch {epoch} outside [0, {total}]")
    return base_lr * 0.5 * (1 + math.cos(math.pi * epoch / total))


def learning_rate(cfg, epoch):
    """Per-epoch learning rate for ``cfg.schedule``."""
    if cfg.schedule == "constant":
        return cfg.base_lr
    if cfg.schedule == "step":
        return cfg.base_lr * cfg.lr_gamma ** (epoch // cfg.lr_step)
    return cosine_lr(epoch, cfg.epochs, cfg.base_lr)


def sample_beta(rng, alpha):
    """Beta(alpha, alpha) as the ratio of two Gamma(alpha) draws."""
    a = rng.gamma(alpha)
    b = rng.gamma(alpha)
    if a + b == 0:
        return 0.5
    return a / (a + b)


def mixup_batch(x, labels, alpha, rng, num_classes=None, lam=None):
    """Blend a batch with a shuffled copy of itself.

    Returns ``(mixed_x, soft_labels)``; the same mixing weight is applied to
    inputs and one-hot targets. ``lam`` overrides the Beta draw.
    """
    n = x.shape[0]
    if n < 2:
        raise ConfigError("mixup needs a batch of at least 2 samples")
    if lam is None:
        if alpha <= 0:
            raise ConfigError(f"mixup alpha must be positive, got {alpha}")
        lam = sample_beta(rng, alpha)
    labels = np.asarray(labels)
    if labels.ndim == 1:
        if num_classes is None:
            raise ConfigError("num_classes is required to mix hard labels")
        soft = np.zeros((n, num_classes), dtype=x.dtype)
        soft[np.arange(n), labels] = 1
    else:
        soft = labels.astype(x.dtype)
    perm = rng.permutation(n)
    lam_t = x.dtype.type(lam)
    mixed = lam_t * x + (1 - lam_t) * x[perm]
    return mixed, lam_t * soft + (1 - lam_t) * soft[perm]

"""SmallConvNet backbone and the backbone + head classifier."""

from dataclasses import asdict, dataclass

import numpy as np

from .errors import ConfigError
from .head import FfcHead
from .layers import Conv2d, GlobalAvgPool, MaxPool2d, ReLU, SEBlock, Sequential


@dataclass
class ModelConfig:
    in_channels: int = 1
    num_classes: int = 10
    widths: tuple = (32, 64, 128)
    se_stages: tuple = ()
    se_ratio: int = 8
    head: str = "ffc"
    depth: int = 3
    ln_eps: float = 1e-5
    seed: int = 0

    def __post_init__(self):
        self.widths = tuple(int(w) for w in self.widths)
        self.se_stages = tuple(sorted(int(s) for s in self.se_stages))
        if self.head not in ("ffc", "plain"):
            raise ConfigError(f"head must be 'ffc' or 'plain', got {self.head!r}")
        if self.head == "plain":
            self.depth = 0
        if not self.widths:
            raise ConfigError("backbone needs at least one stage")
        bad = [s for s in self.se_stages if not 0 <= s < len(self.widths)]
        if bad:
            raise ConfigError(f"se_stages {bad} out of range for {len(self.widths)} stages")

    @property
    def feature_channels(self):
        return self.widths[-1]

    def to_dict(self):
        d = asdict(self)
        d["widths"] = list(self.widths)
        d["se_stages"] = list(self.se_stages)
        return d

    @classmethod
    def from_dict(cls, d):
        return cls(**d)


def small_conv_net(cfg, rng):
    """Stages of (3x3 conv, ReLU) x2 [+ SE] + 2x2 max-pool, then global average pool."""
    layers, cin = [], cfg.in_channels
    for i, width in enumerate(cfg.widths):
        layers += [Conv2d(cin, width, 3, rng, pad=1), ReLU(), Conv2d(width, width, 3, rng, pad=1), ReLU()]
        if i in cfg.se_stages:
            layers.append(SEBlock(width, cfg.se_ratio, rng))
        layers.append(MaxPool2d(2))
        cin = width
    layers.append(GlobalAvgPool())
    return Sequential(*layers)


class Model:
    """Backbone producing an N×C feature, followed by an :class:`FfcHead`."""

    def __init__(self, cfg):
        self.cfg = cfg
        rng = np.random.default_rng(cfg.seed)
        self.backbone = small_conv_net(cfg, rng)
        self.head = FfcHead(cfg.feature_channels, cfg.num_classes, cfg.depth, rng, cfg.ln_eps)

    def forward(self, x):
        return self.head.forward(self.backbone.forward(x))

    __call__ = forward

    def backward(self, head_grads, through_backbone=True, input_grad=True):
        """Backpropagate per-output logit grads; returns d input (None if not requested)."""
        dfeat = self.head.backward(head_grads)
        if through_backbone:
            self.backbone.layers[0].input_grad = input_grad
            return self.backbone.backward(dfeat)
        self.backbone._cache = None
        return dfeat

    def named_params(self):
        return self.backbone.named_params("backbone.") + self.head.named_params("head.")

    def params(self):
        return [p for _, p in self.named_params()]

    def num_params(self):
        return sum(p.value.size for p in self.params())

    def cast(self, dtype):
        for p in self.params():
            p.cast(dtype)
        return self

"""Sequential feature filtering classifier head.

A pooled feature F0 is passed through ``depth`` LayerNorm+ReLU filtering
stages, F_k = relu(gain_k * LN(F_{k-1}) + bias_k). One shared linear
classifier is applied to 2*depth+1 inputs, interleaved as

    Out1 = fc(F0), Out2 = fc((F0+F1)/2), Out3 = fc(F1), ..., Out(2d+1) = fc(Fd)

Training averages the per-output cross-entropies; prediction combines the
outputs by plurality vote with a confidence tie-break, or by averaging.
"""

import enum
from dataclasses import dataclass, field

import numpy as np

from . import tensor as T
from .errors import ConfigError, DimensionError, UsageError
from .layers import Param, kaiming_uniform, softmax, softmax_cross_entropy


class EnsembleRule(str, enum.Enum):
    VOTE = "vote"
    AVERAGE_SOFTMAX = "avg-softmax"
    AVERAGE_LOGITS = "avg-logits"

    @classmethod
    def parse(cls, value):
        if isinstance(value, cls):
            return value
        aliases = {"avg": cls.AVERAGE_SOFTMAX, "average": cls.AVERAGE_SOFTMAX}
        try:
            return aliases.get(value) or cls(value)
        except ValueError:
            names = ", ".join(r.value for r in cls)
            raise ConfigError(f"unknown ensemble rule {value!r}; expected one of {names}") from None


def filter_step(x, gain, bias, eps=1e-5):
    """One filtering stage: per-sample LayerNorm, affine, then ReLU."""
    return _filter_forward(x, _value(gain), _value(bias), eps)[0]


def _value(p):
    return p.value if isinstance(p, Param) else np.asarray(p)


def _filter_forward(x, gain, bias, eps):
    mu = x.mean(axis=1, keepdims=True)
    xc = x - mu
    sigma = np.sqrt((xc * xc).mean(axis=1, keepdims=True) + eps)
    z = xc / sigma
    pre = gain * z + bias
    mask = pre > 0
    return pre * mask, (z, sigma, mask)


def _filter_backward(dy, gain, cache):
    """Returns (dx, dgain, dbias)."""
    z, sigma, mask = cache
    dpre = dy * mask
    dgain = (dpre * z).sum(axis=0)
    dbias = dpre.sum(axis=0)
    dz = dpre * gain
    # LayerNorm Jacobian: (I - 11^T/C - z z^T/C) / sigma
    dx = (dz - dz.mean(axis=1, keepdims=True) - z * (dz * z).mean(axis=1, keepdims=True)) / sigma
    return dx, dgain, dbias


@dataclass
class FfcOutputs:
    """Everything one forward pass of the head produces.

    ``logits[h]`` is output h+1 (N×K); ``features[k]`` is F_k (N×C);
    ``active_counts[k]`` counts strictly positive units of F_k per sample.
    """

    logits: list
    features: list
    active_counts: np.ndarray
    _head: object = field(default=None, repr=False)

    @property
    def num_heads(self):
        return len(self.logits)

    @property
    def depth(self):
        return len(self.features) - 1


class FfcHead:
    """Filtering stages plus one shared K×C classifier.

    ``depth=0`` is exactly a plain linear classifier head.
    """

    def __init__(self, channels, num_classes, depth=3, rng=None, eps=1e-5):
        if channels < 1 or num_classes < 1 or depth < 0:
            raise ConfigError(
                f"invalid head shape C={channels} K={num_classes} d={depth}"
            )
        rng = rng if rng is not None else np.random.default_rng(0)
        dtype = T.get_dtype()
        self.channels, self.num_classes, self.depth, self.eps = channels, num_classes, depth, eps
        self.ln_gain = [Param(np.ones(channels, dtype=dtype)) for _ in range(depth)]
        self.ln_bias = [Param(np.zeros(channels, dtype=dtype)) for _ in range(depth)]
        self.classifier_weight = Param(kaiming_uniform(rng, (num_classes, channels), channels))
        self.classifier_bias = Param(np.zeros(num_classes, dtype=dtype))
        self._cache = None

    @property
    def num_heads(self):
        return 2 * self.depth + 1

    def params(self):
        return [p for pair in zip(self.ln_gain, self.ln_bias) for p in pair] + [
            self.classifier_weight,
            self.classifier_bias,
        ]

    def named_params(self, prefix=""):
        out = []
        for k in range(self.depth):
            out.append((f"{prefix}ln_gain.{k}", self.ln_gain[k]))
            out.append((f"{prefix}ln_bias.{k}", self.ln_bias[k]))
        out.append((prefix + "classifier.weight", self.classifier_weight))
        out.append((prefix + "classifier.bias", self.classifier_bias))
        return out

    def head_inputs(self, features):
        """The 2d+1 classifier inputs in output order."""
        inputs = [features[0]]
        for k in range(1, len(features)):
            inputs.append((features[k - 1] + features[k]) * 0.5)
            inputs.append(features[k])
        return inputs

    def forward(self, feature):
        if feature.ndim != 2 or feature.shape[1] != self.channels:
            raise DimensionError(f"head expects N×{self.channels} features, got {feature.shape}")
        features, caches = [feature], []
        for k in range(self.depth):
            y, cache = _filter_forward(
                features[-1], self.ln_gain[k].value, self.ln_bias[k].value, self.eps
            )
            features.append(y)
            caches.append(cache)
        n = feature.shape[0]
        stacked = np.concatenate(self.head_inputs(features), axis=0)
        logits = stacked @ self.classifier_weight.value.T + self.classifier_bias.value
        out = FfcOutputs(
            logits=[logits[h * n:(h + 1) * n] for h in range(self.num_heads)],
            features=features,
            active_counts=np.stack([(f > 0).sum(axis=1) for f in features]),
            _head=self,
        )
        self._cache = (stacked, caches, n)
        return out

    __call__ = forward

    def backward(self, head_grads):
        """Accumulate parameter grads from per-output logit grads; return d feature."""
        if self._cache is None:
            raise UsageError("FfcHead.backward called without a matching forward")
        stacked, caches, n = self._cache
        self._cache = None
        if len(head_grads) != self.num_heads:
            raise DimensionError(f"expected {self.num_heads} logit gradients, got {len(head_grads)}")
        g = np.concatenate(head_grads, axis=0)
        self.classifier_weight.grad += g.T @ stacked
        self.classifier_bias.grad += g.sum(axis=0)
        dinputs = g @ self.classifier_weight.value
        d_in = [dinputs[h * n:(h + 1) * n] for h in range(self.num_heads)]
        dfeat = [d_in[0].copy()]
        for k in range(1, self.depth + 1):
            half = d_in[2 * k - 1] * 0.5
            dfeat[k - 1] += half
            dfeat.append(half + d_in[2 * k])
        for k in range(self.depth, 0, -1):
            dx, dgain, dbias = _filter_backward(dfeat[k], self.ln_gain[k - 1].value, caches[k - 1])
            self.ln_gain[k - 1].grad += dgain
            self.ln_bias[k - 1].grad += dbias
            dfeat[k - 1] += dx
        return dfeat[0]


def ffc_forward(feature, head):
    return head.forward(feature)


def ffc_backward(outputs, head_grads):
    if outputs._head is None:
        raise UsageError("outputs carry no head; run ffc_forward first")
    return outputs._head.backward(head_grads)


def train_loss(outputs, targets, smoothing=0.0):
    """Mean of per-output cross-entropies and the matching logit gradients."""
    logits = outputs.logits if isinstance(outputs, FfcOutputs) else outputs
    h = len(logits)
    total, grads = 0.0, []
    for lg in logits:
        loss, grad = softmax_cross_entropy(lg, targets, smoothing)
        total += loss
        grads.append(grad / h)
    return total / h, grads


def _logit_list(outputs):
    logits = outputs.logits if isinstance(outputs, FfcOutputs) else outputs
    if len(logits) == 0:
        raise ConfigError("ensemble needs at least one output")
    return np.stack(logits)  # H×N×K


def ensemble_predict(outputs, rule=EnsembleRule.VOTE):
    """Combine the outputs into one predicted class per sample.

    Vote: each output votes for its argmax and the plurality class wins. On a
    tie, only outputs voting for one of the tied classes compete, and the one
    with the highest max-softmax probability decides (lowest output index if
    that is tied too).
    """
    rule = EnsembleRule.parse(rule)
    logits = _logit_list(outputs)
    h, n, k = logits.shape
    if rule is EnsembleRule.AVERAGE_LOGITS:
        return logits.mean(axis=0).argmax(axis=1)
    probs = np.stack([softmax(lg) for lg in logits])
    if rule is EnsembleRule.AVERAGE_SOFTMAX:
        return probs.mean(axis=0).argmax(axis=1)
    votes = logits.argmax(axis=2)  # H×N
    confidence = probs.max(axis=2)
    counts = np.zeros((n, k), dtype=np.int64)
    np.add.at(counts, (np.broadcast_to(np.arange(n), (h, n)), votes), 1)
    tied = counts == counts.max(axis=1, keepdims=True)
    eligible = tied[np.arange(n)[None, :], votes]
    masked = np.where(eligible, confidence, -np.inf)
    winner = masked.argmax(axis=0)
    return votes[winner, np.arange(n)]


def head_statistics(outputs, targets):
    """Per-output accuracy, mean ground-truth probability and mean active units.

    Only odd outputs (1, 3, ...) read a filtered feature directly, so only they
    report active units and a filtering sequence index; even outputs get None.
    """
    targets = np.asarray(targets)
    rows = []
    for i, lg in enumerate(outputs.logits):
        probs = softmax(lg)
        row = {
            "head_id": i + 1,
            "top1": float((lg.argmax(axis=1) == targets).mean()),
            "mean_confidence": float(probs[np.arange(len(targets)), targets].mean()),
            "mean_active_units": None,
            "sequence": None,
        }
        if i % 2 == 0:
            row["sequence"] = i // 2
            row["mean_active_units"] = float(outputs.active_counts[i // 2].mean())
        rows.append(row)
    return rows


def overhead_report(channels, num_classes, depth):
    """Extra parameters and FLOPs of the filtering head over a plain linear head.

    FLOPs count one multiply-accumulate as one FLOP; other elementwise ops
    count one each.
    """
    if channels < 1 or num_classes < 1 or depth < 0:
        raise ConfigError("overhead_report needs positive C, K and nonnegative d")
    c, k, d = channels, num_classes, depth
    breakdown = {
        "extra_classifier_macs": 2 * d * c * k,
        "extra_classifier_bias": 2 * d * k,
        # sum, centre, square-accumulate, scale by 1/sigma, gain, bias
        "layernorm": 6 * d * c,
        "relu": d * c,
        # add + halve for each averaged feature
        "averaging": 2 * d * c,
    }
    return {
        "channels": c,
        "classes": k,
        "depth": d,
        "extra_params": 2 * d * c,
        "extra_flops": sum(breakdown.values()),
        "flops_breakdown": breakdown,
        "flop_convention": "1 FLOP per multiply-accumulate; other elementwise ops 1 FLOP each",
    }

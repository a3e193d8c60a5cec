"""Layers with hand-written forward/backward passes, plus the softmax losses.

Every layer follows the same contract: ``forward`` caches what ``backward``
needs, ``backward`` consumes that cache exactly once, accumulates parameter
gradients into ``Param.grad`` and returns the gradient w.r.t. its input.
"""

from dataclasses import dataclass, field

import numpy as np

from . import tensor as T
from .errors import ConfigError, DimensionError, DomainError, NumericError, UsageError


@dataclass(eq=False)
class Param:
    value: np.ndarray
    grad: np.ndarray = field(default=None)

    def __post_init__(self):
        if self.grad is None:
            self.grad = np.zeros_like(self.value)

    @property
    def shape(self):
        return self.value.shape

    def zero_grad(self):
        self.grad[...] = 0

    def cast(self, dtype):
        self.value = self.value.astype(dtype)
        self.grad = np.zeros_like(self.value)


def kaiming_uniform(rng, shape, fan_in):
    bound = np.sqrt(6.0 / fan_in)
    return rng.uniform(-bound, bound, size=shape).astype(T.get_dtype())


class Layer:
    """Base class: subclasses implement ``_forward``/``_backward``."""

    def __init__(self):
        self._cache = None

    def forward(self, x):
        out, self._cache = self._forward(x)
        return out

    def backward(self, grad_out):
        if self._cache is None:
            raise UsageError(f"{type(self).__name__}.backward called without a matching forward")
        cache, self._cache = self._cache, None
        return self._backward(grad_out, cache)

    __call__ = forward

    def params(self):
        return []

    def named_params(self, prefix=""):
        return []

    def _forward(self, x):
        raise NotImplementedError

    def _backward(self, grad_out, cache):
        raise NotImplementedError


class Linear(Layer):
    def __init__(self, in_features, out_features, rng):
        super().__init__()
        self.weight = Param(kaiming_uniform(rng, (out_features, in_features), in_features))
        self.bias = Param(np.zeros(out_features, dtype=T.get_dtype()))

    def _forward(self, x):
        if x.ndim != 2 or x.shape[1] != self.weight.shape[1]:
            raise DimensionError(f"Linear expects N×{self.weight.shape[1]}, got {x.shape}")
        return T.matmul(x, self.weight.value.T) + self.bias.value, x

    def _backward(self, grad_out, x):
        self.weight.grad += grad_out.T @ x
        self.bias.grad += grad_out.sum(axis=0)
        return grad_out @ self.weight.value

    def params(self):
        return [self.weight, self.bias]

    def named_params(self, prefix=""):
        return [(prefix + "weight", self.weight), (prefix + "bias", self.bias)]


class Conv2d(Layer):
    """2-D convolution lowered to a single GEMM through im2col."""

    def __init__(self, in_channels, out_channels, kernel_size, rng, stride=1, pad=0):
        super().__init__()
        k = kernel_size
        self.stride, self.pad, self.k = stride, pad, k
        # a network's first layer can skip the input gradient nobody reads
        self.input_grad = True
        fan_in = in_channels * k * k
        self.weight = Param(kaiming_uniform(rng, (out_channels, in_channels, k, k), fan_in))
        self.bias = Param(np.zeros(out_channels, dtype=T.get_dtype()))

    def _forward(self, x):
        cout, cin, k, _ = self.weight.shape
        if x.ndim != 4 or x.shape[1] != cin:
            raise DimensionError(f"Conv2d expects N×{cin}×H×W, got {x.shape}")
        n, _, h, w = x.shape
        ho = T.conv_output_size(h, k, self.stride, self.pad)
        wo = T.conv_output_size(w, k, self.stride, self.pad)
        cols = T.im2col(x, k, k, self.stride, self.pad, channels_last=True)
        wmat = self.weight.value.transpose(0, 2, 3, 1).reshape(cout, -1)
        y = T.matmul(cols, wmat.T) + self.bias.value
        y = np.ascontiguousarray(y.reshape(n, ho, wo, cout).transpose(0, 3, 1, 2))
        return y, (x.shape, cols, wmat)

    def _backward(self, grad_out, cache):
        x_shape, cols, wmat = cache
        cout, cin, k, _ = self.weight.shape
        g = grad_out.transpose(0, 2, 3, 1).reshape(-1, cout)
        # cols.T @ g runs about twice as fast as g.T @ cols for these tall operands
        self.weight.grad += (cols.T @ g).T.reshape(cout, k, k, cin).transpose(0, 3, 1, 2)
        self.bias.grad += g.sum(axis=0)
        if not self.input_grad:
            return None
        if self.stride == 1 and self.pad < k:
            # unit stride: the input gradient is a full correlation of grad_out
            # with the spatially flipped kernel, which avoids the scatter in col2im
            n, cin, h, w = x_shape
            flipped = self.weight.value[:, :, ::-1, ::-1].transpose(1, 2, 3, 0).reshape(cin, -1)
            gcols = T.im2col(grad_out, k, k, 1, k - 1 - self.pad, channels_last=True)
            dx = T.matmul(gcols, flipped.T).reshape(n, h, w, cin)
            return np.ascontiguousarray(dx.transpose(0, 3, 1, 2))
        return T.col2im(g @ wmat, x_shape, k, k, self.stride, self.pad, channels_last=True)

    def params(self):
        return [self.weight, self.bias]

    def named_params(self, prefix=""):
        return [(prefix + "weight", self.weight), (prefix + "bias", self.bias)]


class ReLU(Layer):
    def _forward(self, x):
        mask = x > 0
        return x * mask, mask

    def _backward(self, grad_out, mask):
        return grad_out * mask


class Sigmoid(Layer):
    def _forward(self, x):
        y = sigmoid(x)
        return y, y

    def _backward(self, grad_out, y):
        return grad_out * y * (1 - y)


class MaxPool2d(Layer):
    """Window max; the first maximal element in a window receives the gradient."""

    def __init__(self, kernel_size=2, stride=None):
        super().__init__()
        self.k = kernel_size
        self.stride = stride or kernel_size

    def _forward(self, x):
        n, c, h, w = x.shape
        k, s = self.k, self.stride
        if k > h or k > w:
            raise ConfigError(f"pool window {k} larger than input {h}×{w}")
        ho, wo = (h - k) // s + 1, (w - k) // s + 1
        # window element (i, j) of every output position, as strided views
        taps = [x[:, :, i:i + s * (ho - 1) + 1:s, j:j + s * (wo - 1) + 1:s]
                for i in range(k) for j in range(k)]
        y = taps[0].copy()
        for t in taps[1:]:
            np.maximum(y, t, out=y)
        # route to the first maximal element: scan taps in order, claim unclaimed hits
        idx = np.full(y.shape, len(taps), dtype=np.int8)
        for t_i in range(len(taps) - 1, -1, -1):
            idx[taps[t_i] == y] = t_i
        return y, (x.shape, idx)

    def _backward(self, grad_out, cache):
        x_shape, idx = cache
        k, s = self.k, self.stride
        ho, wo = idx.shape[2:]
        dx = np.zeros(x_shape, dtype=grad_out.dtype)
        for i in range(k):
            for j in range(k):
                hit = idx == i * k + j
                dx[:, :, i:i + s * (ho - 1) + 1:s, j:j + s * (wo - 1) + 1:s] += grad_out * hit
        return dx


class GlobalAvgPool(Layer):
    """N×C×H×W → N×C spatial mean (avg-pool followed by flatten)."""

    def _forward(self, x):
        if x.ndim != 4:
            raise DimensionError(f"GlobalAvgPool expects N×C×H×W, got {x.shape}")
        return x.mean(axis=(2, 3)), x.shape

    def _backward(self, grad_out, shape):
        n, c, h, w = shape
        g = grad_out / (h * w)
        return np.ascontiguousarray(np.broadcast_to(g[:, :, None, None], shape))


class SEBlock(Layer):
    """Squeeze-and-excitation channel gating.

    s = sigmoid(fc2(relu(fc1(avgpool(x))))), output = x * s per channel.
    """

    def __init__(self, channels, reduce_ratio, rng):
        super().__init__()
        if reduce_ratio < 1 or channels % reduce_ratio:
            raise ConfigError(f"channels {channels} not divisible by SE ratio {reduce_ratio}")
        hidden = channels // reduce_ratio
        self.pool = GlobalAvgPool()
        self.fc1 = Linear(channels, hidden, rng)
        self.relu = ReLU()
        self.fc2 = Linear(hidden, channels, rng)
        self.gate = Sigmoid()

    def _forward(self, x):
        s = self.gate(self.fc2(self.relu(self.fc1(self.pool(x)))))
        return x * s[:, :, None, None], (x, s)

    def _backward(self, grad_out, cache):
        x, s = cache
        dx = grad_out * s[:, :, None, None]
        ds = (grad_out * x).sum(axis=(2, 3))
        d = self.fc1.backward(self.relu.backward(self.fc2.backward(self.gate.backward(ds))))
        return dx + self.pool.backward(d)

    def params(self):
        return self.fc1.params() + self.fc2.params()

    def named_params(self, prefix=""):
        return self.fc1.named_params(prefix + "fc1.") + self.fc2.named_params(prefix + "fc2.")


class Sequential(Layer):
    def __init__(self, *layers):
        super().__init__()
        self.layers = list(layers)

    def forward(self, x):
        for layer in self.layers:
            x = layer.forward(x)
        self._cache = True
        return x

    def backward(self, grad_out):
        if self._cache is None:
            raise UsageError("Sequential.backward called without a matching forward")
        self._cache = None
        for layer in reversed(self.layers):
            grad_out = layer.backward(grad_out)
        return grad_out

    __call__ = forward

    def params(self):
        return [p for layer in self.layers for p in layer.params()]

    def named_params(self, prefix=""):
        out = []
        for i, layer in enumerate(self.layers):
            out += layer.named_params(f"{prefix}{i}.")
        return out


def sigmoid(x):
    # split by sign to avoid overflow in exp
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    e = np.exp(x[~pos])
    out[~pos] = e / (1.0 + e)
    return out


def log_softmax(logits):
    shifted = logits - logits.max(axis=1, keepdims=True)
    return shifted - np.log(np.exp(shifted).sum(axis=1, keepdims=True))


def softmax(logits):
    shifted = logits - logits.max(axis=1, keepdims=True)
    e = np.exp(shifted)
    return e / e.sum(axis=1, keepdims=True)


def smooth_targets(labels, num_classes, smoothing=0.0, dtype=None):
    """Turn hard labels (N,) or soft labels (N×K) into smoothed target rows."""
    if not 0.0 <= smoothing <= 1.0:
        raise ConfigError(f"label smoothing must be in [0,1], got {smoothing}")
    labels = np.asarray(labels)
    dtype = dtype or T.get_dtype()
    if labels.ndim == 1:
        if labels.size and (labels.min() < 0 or labels.max() >= num_classes):
            raise DomainError(f"labels must lie in [0,{num_classes})")
        q = np.zeros((labels.shape[0], num_classes), dtype=dtype)
        q[np.arange(labels.shape[0]), labels.astype(np.int64)] = 1
    elif labels.ndim == 2 and labels.shape[1] == num_classes:
        q = labels.astype(dtype)
    else:
        raise DimensionError(f"labels of shape {labels.shape} do not match {num_classes} classes")
    if smoothing:
        q = (1 - smoothing) * q + smoothing / num_classes
    return q


def softmax_cross_entropy(logits, labels, smoothing=0.0):
    """Mean cross-entropy against (optionally smoothed) targets.

    Returns ``(loss, grad)`` with ``grad = (softmax(logits) - q) / N``.
    """
    if logits.ndim != 2:
        raise DimensionError(f"logits must be N×K, got {logits.shape}")
    if not np.all(np.isfinite(logits)):
        raise NumericError("non-finite logits in softmax_cross_entropy")
    n, k = logits.shape
    q = smooth_targets(labels, k, smoothing, dtype=logits.dtype)
    logp = log_softmax(logits)
    loss = float(-(q * logp).sum(dtype=np.float64) / n)
    grad = (np.exp(logp) - q) / n
    return loss, grad.astype(logits.dtype, copy=False)

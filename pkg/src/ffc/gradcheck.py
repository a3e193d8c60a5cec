"""Central finite-difference checks of every hand-written backward pass.

Each check draws a small random instance in float64, forms a scalar loss,
and compares analytic gradients (inputs and parameters) with central
differences. The error for one tensor is ||analytic - numeric|| / max(||analytic||,
||numeric||); a component reports the max over its tensors and trials.

Instances with a ReLU pre-activation or a max-pool runner-up closer than
``KINK_MARGIN`` to the decision boundary are redrawn, since the step would
straddle the non-differentiable point.
"""

import numpy as np

from . import tensor as T
from .head import FfcHead, train_loss
from .layers import (
    Conv2d,
    GlobalAvgPool,
    Linear,
    MaxPool2d,
    ReLU,
    SEBlock,
    Sequential,
    softmax_cross_entropy,
)
from .model import Model, ModelConfig

KINK_MARGIN = 1e-4
THRESHOLDS = {"linear": 1e-7, "model": 1e-5, "composition": 1e-5}
DEFAULT_THRESHOLD = 1e-6


def rel_error(a, b):
    num = np.linalg.norm(a - b)
    den = max(np.linalg.norm(a), np.linalg.norm(b))
    return 0.0 if den == 0 else float(num / den)


def numeric_grad(f, x, step):
    """Central differences of scalar ``f()`` w.r.t. array ``x`` (perturbed in place)."""
    g = np.zeros_like(x)
    flat, gflat = x.reshape(-1), g.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + step
        fp = f()
        flat[i] = orig - step
        fm = f()
        flat[i] = orig
        gflat[i] = (fp - fm) / (2 * step)
    return g


def _margin(layer, x):
    """Forward ``x`` through ``layer``, returning (output, distance to nearest kink)."""
    if isinstance(layer, Sequential):
        m = np.inf
        for sub in layer.layers:
            x, mm = _margin(sub, x)
            m = min(m, mm)
        layer._cache = True
        return x, m
    if isinstance(layer, ReLU):
        return layer.forward(x), float(np.abs(x).min())
    if isinstance(layer, MaxPool2d):
        n, c, h, w = x.shape
        k, s = layer.k, layer.stride
        ho, wo = (h - k) // s + 1, (w - k) // s + 1
        win = np.lib.stride_tricks.sliding_window_view(x, (k, k), axis=(2, 3))[:, :, ::s, ::s]
        win = np.sort(win[:, :, :ho, :wo].reshape(n, c, ho, wo, k * k), axis=-1)
        gap = float((win[..., -1] - win[..., -2]).min()) if k * k > 1 else np.inf
        return layer.forward(x), gap
    if isinstance(layer, SEBlock):
        hidden = layer.fc1.forward(layer.pool.forward(x))
        layer.fc1._cache = layer.pool._cache = None
        return layer.forward(x), float(np.abs(hidden).min())
    return layer.forward(x), np.inf


def _head_margin(head, feature):
    m, f = np.inf, feature
    for k in range(head.depth):
        mu = f.mean(axis=1, keepdims=True)
        z = (f - mu) / np.sqrt(((f - mu) ** 2).mean(axis=1, keepdims=True) + head.eps)
        pre = head.ln_gain[k].value * z + head.ln_bias[k].value
        m = min(m, float(np.abs(pre).min()))
        f = pre * (pre > 0)
    return m


def _check(loss_fn, backward_fn, tensors, step):
    """Compare analytic grads (from ``backward_fn``) with central differences."""
    analytic = backward_fn()
    errs = {}
    for name, arr in tensors.items():
        errs[name] = rel_error(analytic[name], numeric_grad(loss_fn, arr, step))
    return errs


def _layer_case(layer, x, rng, step):
    out = layer.forward(x)
    proj = rng.standard_normal(out.shape)
    tensors = {"input": x}
    tensors.update({name: p.value for name, p in layer.named_params()})

    def loss():
        y = layer.forward(x)
        layer._cache = None
        return float((y * proj).sum())

    def backward():
        for p in layer.params():
            p.zero_grad()
        layer.forward(x)
        grads = {"input": layer.backward(proj)}
        grads.update({name: p.grad.copy() for name, p in layer.named_params()})
        return grads

    return _check(loss, backward, tensors, step)


def _draw_layer(kind, rng):
    if kind == "linear":
        return Linear(5, 4, rng), rng.standard_normal((3, 5))
    if kind == "conv2d":
        return Conv2d(2, 3, 3, rng, stride=1, pad=1), rng.standard_normal((2, 2, 5, 5))
    if kind == "conv2d_strided":
        return Conv2d(2, 3, 3, rng, stride=2, pad=1), rng.standard_normal((2, 2, 5, 5))
    if kind == "relu":
        return ReLU(), rng.standard_normal((3, 7))
    if kind == "max_pool":
        return MaxPool2d(2), rng.standard_normal((2, 2, 5, 4))
    if kind == "global_avg_pool":
        return GlobalAvgPool(), rng.standard_normal((2, 3, 4, 5))
    if kind == "se_block":
        se = SEBlock(4, 2, rng)
        for p in se.params():
            p.value[...] = rng.standard_normal(p.shape) * 0.5
        return se, rng.standard_normal((2, 4, 3, 3))
    raise KeyError(kind)


def check_layer(kind, trials=10, step=1e-5, seed=0):
    rng = np.random.default_rng(seed)
    worst = 0.0
    with T.precision("f64"):
        done = 0
        while done < trials:
            layer, x = _draw_layer(kind, rng)
            if _margin(layer, x)[1] < KINK_MARGIN:
                continue
            layer._cache = None
            errs = _layer_case(layer, x, rng, step)
            worst = max(worst, max(errs.values()))
            done += 1
    return worst


def _random_head(rng, channels=8, classes=5, depth=3):
    head = FfcHead(channels, classes, depth, rng)
    for k in range(depth):
        head.ln_gain[k].value[...] = 1 + 0.3 * rng.standard_normal(channels)
        head.ln_bias[k].value[...] = 0.3 * rng.standard_normal(channels)
    head.classifier_bias.value[...] = 0.1 * rng.standard_normal(classes)
    return head


def check_filter_step(trials=10, step=1e-5, seed=0):
    return _check_head(trials, step, seed, depth=1, classes=4)


def check_ffc_head(trials=10, step=1e-5, seed=0, channels=8, classes=5, depth=3):
    return _check_head(trials, step, seed, channels, classes, depth)


def _check_head(trials, step, seed, channels=8, classes=5, depth=3):
    rng = np.random.default_rng(seed)
    worst = 0.0
    with T.precision("f64"):
        done = 0
        while done < trials:
            head = _random_head(rng, channels, classes, depth)
            x = np.abs(rng.standard_normal((4, channels)))
            labels = rng.integers(0, classes, 4)
            if _head_margin(head, x) < KINK_MARGIN:
                continue
            tensors = {"input": x}
            tensors.update({n: p.value for n, p in head.named_params()})

            def loss():
                out = head.forward(x)
                head._cache = None
                return train_loss(out, labels, 0.1)[0]

            def backward():
                for p in head.params():
                    p.zero_grad()
                _, grads = train_loss(head.forward(x), labels, 0.1)
                g = {"input": head.backward(grads)}
                g.update({n: p.grad.copy() for n, p in head.named_params()})
                return g

            worst = max(worst, max(_check(loss, backward, tensors, step).values()))
            done += 1
    return worst


def check_softmax_ce(trials=10, step=1e-5, seed=0):
    rng = np.random.default_rng(seed)
    worst = 0.0
    with T.precision("f64"):
        for _ in range(trials):
            logits = rng.standard_normal((4, 6))
            soft = rng.dirichlet(np.ones(6), size=4)
            f = lambda: softmax_cross_entropy(logits, soft, 0.2)[0]
            analytic = softmax_cross_entropy(logits, soft, 0.2)[1]
            worst = max(worst, rel_error(analytic, numeric_grad(f, logits, step)))
    return worst


def check_composition(trials=10, step=1e-5, seed=0):
    """Two stacked layers (linear -> relu -> linear) under cross-entropy."""
    rng = np.random.default_rng(seed)
    worst = 0.0
    with T.precision("f64"):
        done = 0
        while done < trials:
            net = Sequential(Linear(6, 5, rng), ReLU(), Linear(5, 3, rng))
            x = rng.standard_normal((4, 6))
            y = rng.integers(0, 3, 4)
            if _margin(net, x)[1] < KINK_MARGIN:
                continue
            net._cache = None

            def loss():
                out = net.forward(x)
                net._cache = None
                return softmax_cross_entropy(out, y)[0]

            def backward():
                for p in net.params():
                    p.zero_grad()
                return {"input": net.backward(softmax_cross_entropy(net.forward(x), y)[1])}

            worst = max(worst, max(_check(loss, backward, {"input": x}, step).values()))
            done += 1
    return worst


def check_model(trials=10, step=1e-5, seed=0):
    """Backbone + filtering head end to end, on a tiny SmallConvNet."""
    rng = np.random.default_rng(seed)
    worst = 0.0
    with T.precision("f64"):
        done = 0
        while done < trials:
            cfg = ModelConfig(in_channels=1, num_classes=3, widths=(2, 3, 4), se_stages=(1,),
                              se_ratio=3, depth=2, seed=int(rng.integers(1 << 30)))
            model = Model(cfg)
            x = rng.standard_normal((2, 1, 8, 8))
            y = rng.integers(0, 3, 2)
            feat, m = _margin(model.backbone, x)
            model.backbone._cache = None
            if min(m, _head_margin(model.head, feat)) < KINK_MARGIN:
                continue
            tensors = {"input": x}
            tensors.update({n: p.value for n, p in model.named_params()})

            def loss():
                out = model.forward(x)
                model.backbone._cache = model.head._cache = None
                return train_loss(out, y)[0]

            def backward():
                for p in model.params():
                    p.zero_grad()
                _, grads = train_loss(model.forward(x), y)
                g = {"input": model.backward(grads)}
                g.update({n: p.grad.copy() for n, p in model.named_params()})
                return g

            worst = max(worst, max(_check(loss, backward, tensors, step).values()))
            done += 1
    return worst


COMPONENTS = {
    "linear": lambda **kw: check_layer("linear", **kw),
    "conv2d": lambda **kw: check_layer("conv2d", **kw),
    "conv2d_strided": lambda **kw: check_layer("conv2d_strided", **kw),
    "relu": lambda **kw: check_layer("relu", **kw),
    "max_pool": lambda **kw: check_layer("max_pool", **kw),
    "global_avg_pool": lambda **kw: check_layer("global_avg_pool", **kw),
    "se_block": lambda **kw: check_layer("se_block", **kw),
    "softmax_ce": check_softmax_ce,
    "filter_step": check_filter_step,
    "ffc_head": check_ffc_head,
    "composition": check_composition,
    "model": check_model,
}


def grad_check(components=None, trials=10, step=1e-5, seed=0):
    """Run the selected checks; returns {name: (max_rel_error, threshold, passed)}."""
    names = list(COMPONENTS) if not components else list(components)
    unknown = [n for n in names if n not in COMPONENTS]
    if unknown:
        raise KeyError(f"unknown grad-check component(s) {unknown}; known: {sorted(COMPONENTS)}")
    report = {}
    for name in names:
        err = COMPONENTS[name](trials=trials, step=step, seed=seed)
        thr = THRESHOLDS.get(name, DEFAULT_THRESHOLD)
        report[name] = (err, thr, err < thr)
    return report

"""Dense tensor primitives.

Tensors are plain C-contiguous (row-major) numpy arrays. This module owns the
build-wide scalar precision, the deterministic-execution switch, and the few
kernels every layer leans on: matmul, im2col/col2im and axis reductions.
"""

import contextlib

import numpy as np

from .errors import ConfigError, DimensionError, DomainError

Tensor = np.ndarray

_DTYPES = {"f32": np.float32, "f64": np.float64}
_state = {"dtype": np.float32, "deterministic": True, "threads": 1}


def get_dtype():
    return _state["dtype"]


def set_dtype(name):
    if name not in _DTYPES:
        raise ConfigError(f"unknown precision {name!r}; expected one of {sorted(_DTYPES)}")
    _state["dtype"] = _DTYPES[name]


@contextlib.contextmanager
def precision(name):
    """Temporarily switch the build-wide scalar type ("f32" or "f64")."""
    prev = _state["dtype"]
    set_dtype(name)
    try:
        yield
    finally:
        _state["dtype"] = prev


def set_execution(deterministic=True, threads=1):
    """Configure BLAS threading.

    Deterministic mode pins BLAS to one thread so every reduction runs in a
    fixed sequential order.
    """
    if threads < 1:
        raise ConfigError(f"threads must be >= 1, got {threads}")
    _state["deterministic"] = bool(deterministic)
    _state["threads"] = int(threads)
    try:
        from threadpoolctl import threadpool_limits
    except ImportError:  # pragma: no cover
        return
    threadpool_limits(1 if deterministic else int(threads))


def is_deterministic():
    return _state["deterministic"]


def tensor(data, shape=None):
    """Build a tensor in the current precision, optionally reshaped."""
    arr = np.ascontiguousarray(np.asarray(data, dtype=get_dtype()))
    if shape is not None:
        shape = tuple(int(s) for s in shape)
        if any(s <= 0 for s in shape):
            raise DimensionError(f"shape must be positive, got {shape}")
        if int(np.prod(shape)) != arr.size:
            raise DimensionError(f"cannot view {arr.size} values as shape {shape}")
        arr = arr.reshape(shape)
    return arr


def zeros(shape):
    return np.zeros(shape, dtype=get_dtype())


def flat_index(index, shape):
    """Row-major offset of a multi-index."""
    off = 0
    for i, d in zip(index, shape):
        if not 0 <= i < d:
            raise IndexError(f"index {tuple(index)} out of range for shape {tuple(shape)}")
        off = off * d + i
    return off


def matmul(a, b):
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[0]:
        raise DimensionError(f"matmul shape mismatch: {a.shape} x {b.shape}")
    return a @ b


def conv_output_size(size, k, stride, pad):
    if stride < 1 or k < 1 or pad < 0:
        raise ConfigError(f"invalid window k={k} stride={stride} pad={pad}")
    span = size + 2 * pad - k
    if span < 0 or span % stride:
        raise ConfigError(
            f"window k={k} stride={stride} pad={pad} does not tile input of size {size}"
        )
    return span // stride + 1


def im2col(x, kh, kw, stride=1, pad=0, channels_last=False):
    """Lower an N×C×H×W tensor to a (N·Ho·Wo) × (C·kh·kw) patch matrix.

    Row order is (n, ho, wo). Column order is (c, i, j), matching a weight of
    shape Cout×C×kh×kw flattened row-major; ``channels_last`` switches it to
    (i, j, c), which is cheaper to build and to scatter back.
    """
    if x.ndim != 4:
        raise DimensionError(f"im2col expects N×C×H×W, got shape {x.shape}")
    n, c, h, w = x.shape
    ho = conv_output_size(h, kh, stride, pad)
    wo = conv_output_size(w, kw, stride, pad)
    xp = np.pad(x.transpose(0, 2, 3, 1), ((0, 0), (pad, pad), (pad, pad), (0, 0)))
    # view of every window as (n, ho, wo, c, kh, kw); the reshape below makes the one copy
    win = np.lib.stride_tricks.sliding_window_view(xp, (kh, kw), axis=(1, 2))
    win = win[:, :stride * (ho - 1) + 1:stride, :stride * (wo - 1) + 1:stride]
    order = (0, 1, 2, 4, 5, 3) if channels_last else (0, 1, 2, 3, 4, 5)
    return win.transpose(order).reshape(n * ho * wo, c * kh * kw)


def col2im(cols, x_shape, kh, kw, stride=1, pad=0, channels_last=False):
    """Adjoint of :func:`im2col`: scatter-add patch rows back into an image."""
    n, c, h, w = x_shape
    ho = conv_output_size(h, kh, stride, pad)
    wo = conv_output_size(w, kw, stride, pad)
    if channels_last:
        patches = cols.reshape(n, ho, wo, kh, kw, c)
    else:
        patches = cols.reshape(n, ho, wo, c, kh, kw).transpose(0, 1, 2, 4, 5, 3)
    out = np.zeros((n, h + 2 * pad, w + 2 * pad, c), dtype=cols.dtype)
    for i in range(kh):
        for j in range(kw):
            out[:, i:i + stride * ho:stride, j:j + stride * wo:stride, :] += patches[:, :, :, i, j, :]
    out = out[:, pad:pad + h, pad:pad + w, :]
    return np.ascontiguousarray(out.transpose(0, 3, 1, 2))


def reduce(x, axis, kind):
    """sum | mean | max | argmax along one axis.

    argmax resolves exact ties to the lowest index.
    """
    x = np.asarray(x)
    if not -x.ndim <= axis < x.ndim:
        raise DomainError(f"axis {axis} out of range for rank {x.ndim}")
    if x.shape[axis] == 0:
        raise DomainError(f"cannot reduce over empty axis {axis} of shape {x.shape}")
    if kind == "sum":
        return x.sum(axis=axis)
    if kind == "mean":
        return x.mean(axis=axis)
    if kind == "max":
        return x.max(axis=axis)
    if kind == "argmax":
        # numpy returns the first occurrence of the maximum
        return x.argmax(axis=axis)
    raise DomainError(f"unknown reduction {kind!r}")

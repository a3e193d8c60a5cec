"""Binary checkpoint format.

Layout (all integers little-endian):

    b"FFCK"             magic
    u32 version         currently 1
    u32 L, L bytes      UTF-8 JSON config echo (sorted keys)
    u32 count           number of tensors
    count x tensor:
        u32 name_len, name bytes (UTF-8)
        u8  dtype code  (1 = float32)
        u32 rank, rank x u32 dims
        prod(dims) x f32 values
"""

import json
import os
import struct

import numpy as np

from .errors import ConfigError, FormatError
from .model import Model, ModelConfig

MAGIC = b"FFCK"
VERSION = 1
DTYPE_F32 = 1
_F32 = np.dtype("<f4")


def encode(model, extra=None):
    config = {"model": model.cfg.to_dict()}
    if extra:
        config.update(extra)
    blob = json.dumps(config, sort_keys=True).encode()
    out = [MAGIC, struct.pack("<II", VERSION, len(blob)), blob]
    named = model.named_params()
    out.append(struct.pack("<I", len(named)))
    for name, p in named:
        raw = name.encode()
        out.append(struct.pack("<I", len(raw)) + raw)
        out.append(struct.pack("<BI", DTYPE_F32, p.value.ndim))
        out.append(struct.pack(f"<{p.value.ndim}I", *p.value.shape))
        out.append(np.ascontiguousarray(p.value, dtype=_F32).tobytes())
    return b"".join(out)


def save_checkpoint(model, path, extra=None):
    data = encode(model, extra)
    tmp = f"{path}.tmp"
    with open(tmp, "wb") as f:
        f.write(data)
    os.replace(tmp, path)


class _Reader:
    def __init__(self, raw):
        self.raw, self.pos = raw, 0

    def take(self, n, what):
        if n < 0 or self.pos + n > len(self.raw):
            raise FormatError(
                f"checkpoint truncated reading {what}: need {n} bytes at offset {self.pos}, "
                f"have {len(self.raw) - self.pos}"
            )
        chunk = self.raw[self.pos:self.pos + n]
        self.pos += n
        return chunk

    def unpack(self, fmt, what):
        return struct.unpack(fmt, self.take(struct.calcsize(fmt), what))


def decode(raw):
    """Parse checkpoint bytes into ``(config, {name: array})``."""
    r = _Reader(raw)
    magic = r.take(4, "magic")
    if magic != MAGIC:
        raise FormatError(f"bad checkpoint magic {magic!r} (expected {MAGIC!r})")
    version, clen = r.unpack("<II", "header")
    if version != VERSION:
        raise FormatError(f"unsupported checkpoint version {version} (expected {VERSION})")
    try:
        config = json.loads(r.take(clen, "config").decode())
    except (UnicodeDecodeError, json.JSONDecodeError) as e:
        raise FormatError(f"corrupt checkpoint config: {e}") from None
    (count,) = r.unpack("<I", "tensor count")
    tensors = {}
    for i in range(count):
        (nlen,) = r.unpack("<I", f"name length of tensor {i}")
        try:
            name = r.take(nlen, f"name of tensor {i}").decode()
        except UnicodeDecodeError:
            raise FormatError(f"tensor {i} name is not UTF-8") from None
        code, rank = r.unpack("<BI", f"dtype/rank of {name}")
        if code != DTYPE_F32:
            raise FormatError(f"tensor {name}: unknown dtype code {code}")
        if rank > 8:
            raise FormatError(f"tensor {name}: implausible rank {rank}")
        dims = r.unpack(f"<{rank}I", f"dims of {name}")
        if any(d == 0 for d in dims):
            raise FormatError(f"tensor {name}: zero dimension in {dims}")
        size = int(np.prod(dims, dtype=np.int64)) if rank else 1
        buf = r.take(size * 4, f"data of {name}")
        tensors[name] = np.frombuffer(buf, dtype=_F32).reshape(dims).astype(np.float32)
    if r.pos != len(raw):
        raise FormatError(f"{len(raw) - r.pos} trailing bytes after last tensor")
    return config, tensors


def load_checkpoint(path):
    """Rebuild the model stored at ``path``; returns ``(model, config)``."""
    with open(path, "rb") as f:
        raw = f.read()
    config, tensors = decode(raw)
    try:
        model = Model(ModelConfig.from_dict(config["model"]))
    except (KeyError, TypeError, ConfigError) as e:
        raise FormatError(f"checkpoint config does not describe a model: {e}") from None
    named = dict(model.named_params())
    if set(named) != set(tensors):
        missing = sorted(set(named) - set(tensors))
        unexpected = sorted(set(tensors) - set(named))
        raise FormatError(f"checkpoint tensors mismatch: missing {missing}, unexpected {unexpected}")
    for name, p in named.items():
        if tensors[name].shape != p.value.shape:
            raise FormatError(f"tensor {name}: shape {tensors[name].shape} != expected {p.value.shape}")
        p.value = tensors[name].copy()
        p.grad = np.zeros_like(p.value)
    return model, config

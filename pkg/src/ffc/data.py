"""MNIST IDX / CIFAR-10 binary readers and writers, augmentation, batching."""

import os
import struct
from dataclasses import dataclass, field

import numpy as np

from . import tensor as T
from .errors import ConfigError, FormatError, LabelRangeError

IDX_IMAGE_MAGIC = 0x00000803
IDX_LABEL_MAGIC = 0x00000801
CIFAR_RECORD = 3073
CIFAR_SHAPE = (3, 32, 32)

MNIST_FILES = {
    "train": ("train-images-idx3-ubyte", "train-labels-idx1-ubyte"),
    "test": ("t10k-images-idx3-ubyte", "t10k-labels-idx1-ubyte"),
}
CIFAR_FILES = {
    "train": tuple(f"data_batch_{i}.bin" for i in range(1, 6)),
    "test": ("test_batch.bin",),
}


@dataclass
class Dataset:
    images: np.ndarray  # N×C×H×W, scaled to [0,1]
    labels: np.ndarray  # N, int64
    num_classes: int

    def __post_init__(self):
        if len(self.images) != len(self.labels):
            raise FormatError(f"{len(self.images)} images but {len(self.labels)} labels")
        if self.labels.size and (self.labels.min() < 0 or self.labels.max() >= self.num_classes):
            raise LabelRangeError(f"labels outside [0,{self.num_classes})")

    def __len__(self):
        return len(self.labels)

    def subset(self, count):
        """The first ``count`` samples (all of them if count is None)."""
        if count is None or count >= len(self):
            return self
        return Dataset(self.images[:count], self.labels[:count], self.num_classes)


@dataclass
class AugmentPolicy:
    pad_crop: int = 0
    hflip: bool = False
    normalize_mean: tuple = field(default_factory=tuple)
    normalize_std: tuple = field(default_factory=tuple)

    def __post_init__(self):
        if self.pad_crop < 0:
            raise ConfigError(f"pad_crop must be >= 0, got {self.pad_crop}")
        if any(s <= 0 for s in self.normalize_std):
            raise ConfigError("normalize_std entries must be positive")
        if len(self.normalize_mean) != len(self.normalize_std):
            raise ConfigError("normalize_mean and normalize_std must have equal length")

    def without_augmentation(self):
        return AugmentPolicy(0, False, self.normalize_mean, self.normalize_std)


def _read(path):
    with open(path, "rb") as f:
        return f.read()


def parse_idx_images(raw):
    if len(raw) < 16:
        raise FormatError(f"IDX image header truncated ({len(raw)} bytes)")
    magic, n, h, w = struct.unpack(">IIII", raw[:16])
    if magic != IDX_IMAGE_MAGIC:
        raise FormatError(f"bad IDX image magic 0x{magic:08x} (expected 0x{IDX_IMAGE_MAGIC:08x})")
    need = 16 + n * h * w
    if len(raw) != need:
        raise FormatError(f"IDX image payload length {len(raw)} != {need} declared by header")
    return np.frombuffer(raw, dtype=np.uint8, offset=16).reshape(n, h, w)


def parse_idx_labels(raw):
    if len(raw) < 8:
        raise FormatError(f"IDX label header truncated ({len(raw)} bytes)")
    magic, n = struct.unpack(">II", raw[:8])
    if magic != IDX_LABEL_MAGIC:
        raise FormatError(f"bad IDX label magic 0x{magic:08x} (expected 0x{IDX_LABEL_MAGIC:08x})")
    if len(raw) != 8 + n:
        raise FormatError(f"IDX label payload length {len(raw)} != {8 + n} declared by header")
    return np.frombuffer(raw, dtype=np.uint8, offset=8)


def encode_idx_images(pixels):
    pixels = np.asarray(pixels, dtype=np.uint8)
    n, h, w = pixels.shape
    return struct.pack(">IIII", IDX_IMAGE_MAGIC, n, h, w) + pixels.tobytes()


def encode_idx_labels(labels):
    labels = np.asarray(labels, dtype=np.uint8)
    return struct.pack(">II", IDX_LABEL_MAGIC, len(labels)) + labels.tobytes()


def load_mnist_idx(image_path, label_path, num_classes=10):
    pixels = parse_idx_images(_read(image_path))
    labels = parse_idx_labels(_read(label_path))
    if len(pixels) != len(labels):
        raise FormatError(f"{len(pixels)} images but {len(labels)} labels")
    if labels.size and labels.max() >= num_classes:
        raise LabelRangeError(f"label {labels.max()} outside [0,{num_classes})")
    images = (pixels[:, None].astype(T.get_dtype()) / 255).astype(T.get_dtype())
    return Dataset(images, labels.astype(np.int64), num_classes)


def parse_cifar10(raw, num_classes=10):
    if len(raw) % CIFAR_RECORD:
        raise FormatError(f"CIFAR-10 file length {len(raw)} is not a multiple of {CIFAR_RECORD}")
    rec = np.frombuffer(raw, dtype=np.uint8).reshape(-1, CIFAR_RECORD)
    labels = rec[:, 0]
    bad = np.flatnonzero(labels >= num_classes)
    if bad.size:
        raise LabelRangeError(f"record {bad[0]} has label byte {labels[bad[0]]} >= {num_classes}")
    return rec[:, 1:].reshape(-1, *CIFAR_SHAPE), labels


def encode_cifar10(pixels, labels):
    pixels = np.asarray(pixels, dtype=np.uint8).reshape(len(labels), CIFAR_RECORD - 1)
    return np.concatenate([np.asarray(labels, dtype=np.uint8)[:, None], pixels], axis=1).tobytes()


def load_cifar10_bin(paths, num_classes=10):
    if isinstance(paths, (str, os.PathLike)):
        paths = [paths]
    parts = [parse_cifar10(_read(p), num_classes) for p in paths]
    pixels = np.concatenate([p for p, _ in parts])
    labels = np.concatenate([l for _, l in parts])
    images = (pixels.astype(T.get_dtype()) / 255).astype(T.get_dtype())
    return Dataset(images, labels.astype(np.int64), num_classes)


def dataset_files(name, data_dir, split):
    table = {"mnist": MNIST_FILES, "cifar10": CIFAR_FILES}
    if name not in table:
        raise ConfigError(f"unknown dataset {name!r}; expected mnist or cifar10")
    return [os.path.join(data_dir, f) for f in table[name][split]]


def load_dataset(name, data_dir, split):
    files = dataset_files(name, data_dir, split)
    missing = [f for f in files if not os.path.exists(f)]
    if missing:
        raise ConfigError(f"data_dir: missing dataset file(s) {missing}")
    if name == "mnist":
        return load_mnist_idx(*files)
    return load_cifar10_bin(files)


def channel_stats(dataset):
    x = dataset.images
    return tuple(float(v) for v in x.mean(axis=(0, 2, 3))), tuple(float(v) for v in x.std(axis=(0, 2, 3)))


def normalize(x, policy):
    if not policy.normalize_mean:
        return x
    mean = np.asarray(policy.normalize_mean, dtype=x.dtype)[None, :, None, None]
    std = np.asarray(policy.normalize_std, dtype=x.dtype)[None, :, None, None]
    return (x - mean) / std


def augment(x, policy, rng):
    """Random pad-crop and horizontal flip, drawn per sample from ``rng``."""
    n, _, h, w = x.shape
    p = policy.pad_crop
    if p:
        padded = np.pad(x, ((0, 0), (0, 0), (p, p), (p, p)))
        offs = rng.integers(0, 2 * p + 1, size=(n, 2))
        x = np.stack([padded[i, :, dy:dy + h, dx:dx + w] for i, (dy, dx) in enumerate(offs)])
    if policy.hflip:
        flip = rng.random(n) < 0.5
        x = np.where(flip[:, None, None, None], x[..., ::-1], x)
    return np.ascontiguousarray(x)


def batch_iter(dataset, batch_size, shuffle=False, seed=0, policy=None, epoch=0):
    """Yield ``(x, labels)`` batches; the final partial batch is kept.

    Order and augmentation are fixed by ``(seed, epoch)``: the permutation and
    the augmentation draws come from two separate seeded generators.
    """
    n = len(dataset)
    if not 1 <= batch_size:
        raise ConfigError(f"batch_size must be positive, got {batch_size}")
    policy = policy or AugmentPolicy()
    order = np.random.default_rng([seed, epoch, 0]).permutation(n) if shuffle else np.arange(n)
    aug_rng = np.random.default_rng([seed, epoch, 1])
    for start in range(0, n, batch_size):
        idx = order[start:start + batch_size]
        x = dataset.images[idx]
        if policy.pad_crop or policy.hflip:
            x = augment(x, policy, aug_rng)
        yield normalize(x, policy), dataset.labels[idx]

import os
import sys

import numpy as np
import pytest

from ffc import tensor as T
from ffc.data import encode_idx_images, encode_idx_labels

MNIST_DIR = os.environ.get("FFC_MNIST_DIR", "/root/data/mnist")
CIFAR_DIR = os.environ.get("FFC_CIFAR_DIR", "/root/data/cifar-10-batches-bin")


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture
def f64():
    with T.precision("f64"):
        yield


@pytest.fixture
def mnist_dir():
    if not os.path.exists(os.path.join(MNIST_DIR, "train-images-idx3-ubyte")):
        pytest.skip(f"MNIST IDX files not found in {MNIST_DIR}")
    return MNIST_DIR


def write_synthetic_mnist(root, n_train=96, n_test=48, size=12, seed=0):
    """Class-dependent blob images in MNIST IDX layout, learnable in a few steps."""
    rng = np.random.default_rng(seed)
    os.makedirs(root, exist_ok=True)
    for split, n in (("train", n_train), ("t10k", n_test)):
        labels = rng.integers(0, 10, n).astype(np.uint8)
        imgs = rng.integers(0, 40, (n, size, size)).astype(np.uint8)
        for i, lab in enumerate(labels):
            r, c = divmod(int(lab), 4)
            imgs[i, 3 * r:3 * r + 3, 3 * c:3 * c + 3] = 255
        with open(os.path.join(root, f"{split}-images-idx3-ubyte"), "wb") as f:
            f.write(encode_idx_images(imgs))
        with open(os.path.join(root, f"{split}-labels-idx1-ubyte"), "wb") as f:
            f.write(encode_idx_labels(labels))
    return root


@pytest.fixture
def synthetic_mnist(tmp_path):
    return write_synthetic_mnist(str(tmp_path / "mnist"))


def pytest_terminal_summary(terminalreporter):
    acceptance = sys.modules.get("test_acceptance")
    if acceptance and acceptance.RESULTS:
        terminalreporter.section("acceptance criteria")
        for line in sorted(acceptance.RESULTS, key=lambda s: int(s.split()[1].rstrip(":"))):
            terminalreporter.write_line(line)

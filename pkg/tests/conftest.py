import os
import sys
from pathlib import Path

import numpy as np
import pytest

from iterprune.datasets import MNIST_MEAN, MNIST_STD, Dataset, normalize, verify_dir

DATA_ROOT = Path(os.environ.get("ITERPRUNE_DATA_DIR", "/root/data"))


def mnist_available() -> bool:
    return DATA_ROOT.is_dir() and not verify_dir("mnist", DATA_ROOT)


def cifar_available() -> bool:
    return DATA_ROOT.is_dir() and not verify_dir("cifar10", DATA_ROOT)


needs_mnist = pytest.mark.skipif(not mnist_available(), reason=f"MNIST not found under {DATA_ROOT}")


def toy_mnist(n=240, seed=0, split="train"):
    """Learnable MNIST-shaped data: each class lights up its own band of rows."""
    rng = np.random.default_rng(seed)
    labels = rng.integers(0, 10, size=n)
    raw = rng.integers(0, 60, size=(n, 1, 28, 28)).astype(np.uint8)
    for i, c in enumerate(labels):
        raw[i, 0, 2 * c + 4:2 * c + 6, :] = 230
    return Dataset("mnist", split, normalize(raw, MNIST_MEAN, MNIST_STD), labels.astype(np.int64),
                   MNIST_MEAN, MNIST_STD, raw)


@pytest.fixture
def toy_data():
    return toy_mnist(240, 0, "train"), toy_mnist(100, 1, "test")


def pytest_terminal_summary(terminalreporter):
    mod = sys.modules.get("test_acceptance")
    lines = getattr(mod, "RESULTS", None)
    if lines:
        terminalreporter.section("acceptance criteria")
        for line in lines:
            terminalreporter.write_line(line)

import os
from pathlib import Path

import numpy as np
import pytest

from mbnn.data import write_idx_images, write_idx_labels

ROOT = Path(__file__).resolve().parents[1]

# (criterion, passed, detail) lines printed at the end of the run
ACCEPTANCE_RESULTS = []


def mnist_dir():
    candidates = [os.environ.get("MBNN_DATA_DIR"), ROOT / "data" / "mnist", Path.home() / "data" / "mnist"]
    for c in candidates:
        if c and (Path(c) / "t10k-labels-idx1-ubyte").exists():
            return Path(c)
    return None


def synthetic_digits(n, seed):
    """Images whose label is written as a bright 6x6 block at a label-specific spot."""
    rng = np.random.default_rng(seed)
    labels = np.arange(n) % 10
    rng.shuffle(labels)
    images = rng.integers(0, 40, size=(n, 28, 28)).astype(np.uint8)
    for i, y in enumerate(labels):
        r, c = 3 + 8 * (y // 4), 3 + 8 * (y % 4)
        images[i, r : r + 6, c : c + 6] = 250
    return images, labels.astype(np.uint8)


@pytest.fixture(scope="session")
def synthetic_mnist(tmp_path_factory):
    """A tiny directory laid out like MNIST (300 train / 100 test images)."""
    d = tmp_path_factory.mktemp("mnist")
    for part, n, seed in (("train", 300, 1), ("t10k", 100, 2)):
        images, labels = synthetic_digits(n, seed)
        write_idx_images(d / f"{part}-images-idx3-ubyte", images)
        write_idx_labels(d / f"{part}-labels-idx1-ubyte", labels)
    return d


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE_RESULTS:
        return
    terminalreporter.section("acceptance criteria")
    for name, ok, detail in ACCEPTANCE_RESULTS:
        terminalreporter.write_line(f"{'PASS' if ok else 'FAIL'}  {name}: {detail}")

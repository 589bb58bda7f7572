import os

import numpy as np
import pytest

MNIST_DIR = os.environ.get("DIGITLAB_MNIST", "/root/data/mnist")


def have_mnist():
    return os.path.exists(os.path.join(MNIST_DIR, "train-images-idx3-ubyte")) or os.path.exists(
        os.path.join(MNIST_DIR, "train-images-idx3-ubyte.gz"))


@pytest.fixture
def mnist_dir():
    if not have_mnist():
        pytest.skip(f"MNIST IDX files not found in {MNIST_DIR} (set DIGITLAB_MNIST)")
    return MNIST_DIR


def write_idx(path, array, magic):
    import struct
    array = np.asarray(array, dtype=np.uint8)
    with open(path, "wb") as f:
        f.write(struct.pack(">I", magic))
        f.write(struct.pack(f">{array.ndim}I", *array.shape))
        f.write(array.tobytes())


@pytest.fixture
def idx_corpus(tmp_path):
    """A tiny MNIST-shaped corpus: 120 train and 40 test 28x28 images."""
    rng = np.random.default_rng(7)

    def make(n):
        labels = np.arange(n) % 10
        images = rng.integers(0, 40, (n, 28, 28))
        for i, lab in enumerate(labels):
            # a class-dependent bright bar so tiny models can learn something
            images[i, 4 + 2 * lab:6 + 2 * lab, 4:24] = 250
        return images, labels

    for stem, n in (("train", 120), ("t10k", 40)):
        images, labels = make(n)
        write_idx(tmp_path / f"{stem}-images-idx3-ubyte", images, 0x803)
        write_idx(tmp_path / f"{stem}-labels-idx1-ubyte", labels, 0x801)
    return tmp_path


def pytest_terminal_summary(terminalreporter):
    import sys
    mod = sys.modules.get("test_acceptance") or sys.modules.get("tests.test_acceptance")
    if mod is None or not mod.RESULTS:
        return
    terminalreporter.section("acceptance criteria")
    for line in mod.RESULTS:
        terminalreporter.write_line(line)

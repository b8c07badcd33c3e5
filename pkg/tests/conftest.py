import os
from pathlib import Path

import pytest
import torch

from helpers import make_fake_mnist

torch.set_num_threads(1)

MNIST_DIR = Path(os.environ.get("DRIFTDECODE_MNIST", "/root/data/mnist"))


@pytest.fixture
def fake_mnist(tmp_path):
    return make_fake_mnist(tmp_path / "mnist")


@pytest.fixture
def mnist_dir():
    if not (MNIST_DIR / "train-images-idx3-ubyte").exists() and not (MNIST_DIR / "train-images-idx3-ubyte.gz").exists():
        pytest.skip(f"MNIST IDX files not found under {MNIST_DIR} (set DRIFTDECODE_MNIST)")
    return MNIST_DIR


def pytest_terminal_summary(terminalreporter):
    from helpers import ACCEPTANCE

    if ACCEPTANCE:
        terminalreporter.write_sep("=", "acceptance criteria")
        for n in sorted(ACCEPTANCE):
            terminalreporter.write_line(ACCEPTANCE[n])

import os
from pathlib import Path

import numpy as np
import pytest
import torch

from aaae.data import write_idx
from aaae.model import image_spec, vector_spec

# criterion lines recorded by test_acceptance.py, printed at the end of the run
ACCEPTANCE = []

MNIST_ROOT = Path(os.environ.get("AAAE_DATA_ROOT", "/root/data")) / "mnist"


def record(number, name, ok, detail=""):
    ACCEPTANCE.append((number, name, bool(ok), detail))
    print(f"[criterion {number}] {'PASS' if ok else 'FAIL'} {name}: {detail}")


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for number, name, ok, detail in sorted(ACCEPTANCE, key=lambda r: r[0]):
        terminalreporter.write_line(f"criterion {number} {'PASS' if ok else 'FAIL'}  {name}  ({detail})")


def tiny_image_spec(resolution=32, code_dim=8, noise_dim=4):
    return image_spec(resolution, 3, code_dim=code_dim, noise_dim=noise_dim,
                      base_width=4, max_width=16, latent_width=16, name="tiny")


@pytest.fixture
def tiny_spec():
    return tiny_image_spec()


@pytest.fixture
def ring_spec():
    return vector_spec(code_dim=4, noise_dim=4, hidden=16, depth=2)


@pytest.fixture(autouse=True)
def _seed():
    torch.manual_seed(0)
    np.random.seed(0)


def fake_mnist(root: Path, n_train=60, n_test=20, seed=0):
    """Write a small MNIST-shaped IDX archive with digit-like blobs."""
    rng = np.random.default_rng(seed)
    root.mkdir(parents=True, exist_ok=True)
    for prefix, n in (("train", n_train), ("t10k", n_test)):
        labels = rng.integers(0, 10, n).astype(np.uint8)
        imgs = np.zeros((n, 28, 28), dtype=np.uint8)
        for i, lab in enumerate(labels):
            r = 4 + lab
            imgs[i, 14 - r // 2:14 + r // 2, 10:18] = 255
        write_idx(root / f"{prefix}-images-idx3-ubyte.gz", imgs)
        write_idx(root / f"{prefix}-labels-idx1-ubyte.gz", labels)
    return root


@pytest.fixture
def mnist_like(tmp_path):
    return fake_mnist(tmp_path / "mnist")

"""Shared fixtures.

``synthetic_mnist_dir`` builds a deterministic 10-class 28x28 image
dataset, writes it through the package's IDX writer under the standard
MNIST filenames, and exposes the directory. Real MNIST files are not
available in this environment, so image-protocol tests run against this
stand-in through the exact same loading pipeline.
"""

from pathlib import Path

import numpy as np
import pytest

from relayvi.data import save_idx_images, save_idx_labels


def _smooth(img: np.ndarray, passes: int = 2) -> np.ndarray:
    out = img.copy()
    for _ in range(passes):
        padded = np.pad(out, 1, mode="edge")
        out = (
            padded[:-2, 1:-1] + padded[2:, 1:-1] + padded[1:-1, :-2] + padded[1:-1, 2:] + padded[1:-1, 1:-1]
        ) / 5.0
    return out


def class_prototypes(seed: int = 12345) -> np.ndarray:
    """Ten distinct smooth 28x28 patterns in [0, 1]."""
    rng = np.random.default_rng(seed)
    protos = []
    for _ in range(10):
        base = _smooth(rng.random((28, 28)), passes=3)
        base = (base - base.min()) / (base.max() - base.min() + 1e-12)
        protos.append(base)
    return np.stack(protos)


def synthetic_image_split(n: int, seed: int) -> tuple[np.ndarray, np.ndarray]:
    """(uint8 images (n, 28, 28), labels (n,)) with clear class structure."""
    rng = np.random.default_rng(seed)
    protos = class_prototypes()
    labels = rng.integers(0, 10, size=n)
    brightness = rng.uniform(0.7, 1.0, size=(n, 1, 1))
    noise = 0.08 * rng.standard_normal((n, 28, 28))
    images = np.clip(protos[labels] * brightness + noise, 0.0, 1.0)
    return np.rint(images * 255.0).astype(np.uint8), labels.astype(np.uint8)


@pytest.fixture(scope="session")
def synthetic_mnist_dir(tmp_path_factory) -> Path:
    root = tmp_path_factory.mktemp("idx-data") / "mnist"
    root.mkdir()
    train_images, train_labels = synthetic_image_split(12_000, seed=777)
    test_images, test_labels = synthetic_image_split(2_000, seed=778)
    save_idx_images(root / "train-images-idx3-ubyte", train_images)
    save_idx_labels(root / "train-labels-idx1-ubyte", train_labels)
    save_idx_images(root / "t10k-images-idx3-ubyte", test_images)
    save_idx_labels(root / "t10k-labels-idx1-ubyte", test_labels)
    return root.parent

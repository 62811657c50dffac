import os

import numpy as np
import pytest

from bld.augment import AugmentPolicy
from bld.model import MultiHeadNet
from bld.streams import write_idx


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture
def toy_net():
    """Factory for small float64 nets with a given number of 2-class heads."""

    def build(seed=0, input_dim=6, hidden=(8, 5), n_heads=1, classes=2, precision="float64"):
        r = np.random.default_rng(seed)
        net = MultiHeadNet.build(input_dim, hidden, precision, r)
        for t in range(n_heads):
            net.spawn_head(range(t * classes, (t + 1) * classes), r)
        return net

    return build


@pytest.fixture
def vector_policy():
    """Jitter-only policy for flat synthetic vectors (no pixel clamp)."""
    return AugmentPolicy((1, 6), clip=None)


def _digits_arrays():
    from sklearn.datasets import load_digits

    d = load_digits()
    images = np.round(d.images / 16.0 * 255).astype(np.uint8)
    labels = d.target.astype(np.uint8)
    rng = np.random.default_rng(42)
    tr_idx, te_idx = [], []
    for c in range(10):
        idx = rng.permutation(np.flatnonzero(labels == c))
        n_te = len(idx) // 5
        te_idx.extend(idx[:n_te])
        tr_idx.extend(idx[n_te:])
    tr_idx = np.sort(np.asarray(tr_idx))
    te_idx = np.sort(np.asarray(te_idx))
    return images, labels, tr_idx, te_idx


@pytest.fixture(scope="session")
def digits_idx(tmp_path_factory):
    """Small real digit dataset written through the IDX fixture path.

    Real MNIST files are used instead when BLD_MNIST_DIR points at a
    directory holding the four standard ubyte(.gz) files.
    """
    mnist_dir = os.environ.get("BLD_MNIST_DIR")
    if mnist_dir:
        def find(stem):
            for suffix in ("-ubyte", "-ubyte.gz"):
                p = os.path.join(mnist_dir, stem + suffix)
                if os.path.exists(p):
                    return p
            raise FileNotFoundError(f"BLD_MNIST_DIR set but {stem} not found")

        return {
            "images": find("train-images-idx3"),
            "labels": find("train-labels-idx1"),
            "test_images": find("t10k-images-idx3"),
            "test_labels": find("t10k-labels-idx1"),
            "limit_per_task": 4000,
        }

    images, labels, tr_idx, te_idx = _digits_arrays()
    root = tmp_path_factory.mktemp("digits")
    paths = {
        "images": str(root / "train-images.gz"),
        "labels": str(root / "train-labels.gz"),
        "test_images": str(root / "test-images.gz"),
        "test_labels": str(root / "test-labels.gz"),
        "limit_per_task": 0,
    }
    write_idx(images[tr_idx], labels[tr_idx], paths["images"], paths["labels"])
    write_idx(images[te_idx], labels[te_idx], paths["test_images"], paths["test_labels"])
    return paths

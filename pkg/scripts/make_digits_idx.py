#!/usr/bin/env python3
"""Export the sklearn 8x8 digit dataset as IDX files under data/digits/.

Produces a stratified 80/20 train/test split with a fixed seed so every
run and every method sees the same files. These are the inputs the
split-digit experiment configs point at.
"""

import argparse
import os

import numpy as np
from sklearn.datasets import load_digits

from bld.streams import write_idx


def export(out_dir, seed=42):
    d = load_digits()
    images = np.round(d.images / 16.0 * 255).astype(np.uint8)
    labels = d.target.astype(np.uint8)
    rng = np.random.default_rng(seed)
    train_idx, test_idx = [], []
    for c in range(10):
        idx = rng.permutation(np.flatnonzero(labels == c))
        n_test = len(idx) // 5
        test_idx.extend(idx[:n_test])
        train_idx.extend(idx[n_test:])
    train_idx = np.sort(np.asarray(train_idx))
    test_idx = np.sort(np.asarray(test_idx))

    os.makedirs(out_dir, exist_ok=True)
    paths = {
        "images": os.path.join(out_dir, "train-images-idx3-ubyte.gz"),
        "labels": os.path.join(out_dir, "train-labels-idx1-ubyte.gz"),
        "test_images": os.path.join(out_dir, "test-images-idx3-ubyte.gz"),
        "test_labels": os.path.join(out_dir, "test-labels-idx1-ubyte.gz"),
    }
    write_idx(images[train_idx], labels[train_idx], paths["images"], paths["labels"])
    write_idx(images[test_idx], labels[test_idx], paths["test_images"], paths["test_labels"])
    print(f"wrote {len(train_idx)} train / {len(test_idx)} test digit images to {out_dir}")
    return paths


if __name__ == "__main__":
    parser = argparse.ArgumentParser(description=__doc__)
    parser.add_argument("--out", default="data/digits")
    parser.add_argument("--seed", type=int, default=42)
    args = parser.parse_args()
    export(args.out, args.seed)

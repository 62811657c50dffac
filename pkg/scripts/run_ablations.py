#!/usr/bin/env python3
"""Ablations of the distillation engine on the 5-task digit split: the full
two-stage method against the no-balancing and alternated variants, plus the
finetune reference.
"""

import argparse
import os
import sys

sys.path.insert(0, os.path.dirname(__file__))
from make_digits_idx import export  # noqa: E402
from run_split_digits import experiment  # noqa: E402

from bld.harness import render_accuracy_table  # noqa: E402


def main():
    parser = argparse.ArgumentParser(description=__doc__)
    parser.add_argument("--data", default="data/digits")
    parser.add_argument("--seeds", default="0,1,2")
    args = parser.parse_args()
    seeds = [int(s) for s in args.seeds.split(",")]

    train_images = os.path.join(args.data, "train-images-idx3-ubyte.gz")
    if os.path.exists(train_images):
        paths = {
            "images": train_images,
            "labels": os.path.join(args.data, "train-labels-idx1-ubyte.gz"),
            "test_images": os.path.join(args.data, "test-images-idx3-ubyte.gz"),
            "test_labels": os.path.join(args.data, "test-labels-idx1-ubyte.gz"),
        }
    else:
        paths = export(args.data)

    alpha_j, alpha_w = 0.05, 0.0125
    rows = [
        ("finetune", experiment(paths, "finetune", 5, alpha_j, alpha_w, seeds)),
        ("alternated", experiment(paths, "bld", 5, alpha_j, alpha_w, seeds, mode="alternated")),
        ("no_balancing", experiment(paths, "bld", 5, alpha_j, alpha_w, seeds, mode="no_balancing")),
        ("full", experiment(paths, "bld", 5, alpha_j, alpha_w, seeds, mode="full")),
    ]
    for name, agg in rows:
        agg.method = name
    print("\n== 5-task digit ablations ==")
    print(render_accuracy_table([agg for _, agg in rows]))


if __name__ == "__main__":
    main()

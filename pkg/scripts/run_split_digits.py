#!/usr/bin/env python3
"""Split-digit continual-learning comparison: the distillation engine
against the reference methods on 2-task and 5-task class splits.

Generates the IDX fixture if needed, trains every method on the same
splits over three seeds, and prints one accuracy/memory table per setting.
"""

import argparse
import os
import sys

sys.path.insert(0, os.path.dirname(__file__))
from make_digits_idx import export  # noqa: E402

from bld.baselines import BaselineConfig  # noqa: E402
from bld.engine import BLDConfig  # noqa: E402
from bld.harness import ExperimentConfig, render_accuracy_table, run_experiment  # noqa: E402

AUG = dict(rotation_limit=5.0, shift_limit=1, jitter_amplitude=0.02)


def experiment(paths, method, n_tasks, alpha_j, alpha_w, seeds, mode="full", **extra):
    kw = dict(
        data_kind="idx",
        images=paths["images"], labels=paths["labels"],
        test_images=paths["test_images"], test_labels=paths["test_labels"],
        n_tasks=n_tasks, split_seed=7, precision="float32", hidden=(256, 128),
        seeds=list(seeds), **AUG,
    )
    shared = dict(alpha_j=alpha_j, alpha_w=alpha_w, transforms=20, batch_size=5, **extra)
    if method == "bld":
        kw.update(method="bld", bld=BLDConfig(mode=mode, **shared))
    else:
        kw.update(method=method, baseline=BaselineConfig(method=method, **shared))
    return run_experiment(ExperimentConfig(**kw))


def main():
    parser = argparse.ArgumentParser(description=__doc__)
    parser.add_argument("--data", default="data/digits")
    parser.add_argument("--seeds", default="0,1,2")
    args = parser.parse_args()
    seeds = [int(s) for s in args.seeds.split(",")]

    if os.path.exists(os.path.join(args.data, "train-images-idx3-ubyte.gz")):
        paths = {
            "images": os.path.join(args.data, "train-images-idx3-ubyte.gz"),
            "labels": os.path.join(args.data, "train-labels-idx1-ubyte.gz"),
            "test_images": os.path.join(args.data, "test-images-idx3-ubyte.gz"),
            "test_labels": os.path.join(args.data, "test-labels-idx1-ubyte.gz"),
        }
    else:
        paths = export(args.data)

    for n_tasks, alpha_j in ((2, 0.02), (5, 0.05)):
        alpha_w = alpha_j / 4
        aggregates = [
            experiment(paths, "finetune", n_tasks, alpha_j, alpha_w, seeds),
            experiment(paths, "batch_l2", n_tasks, alpha_j, alpha_w, seeds),
            experiment(paths, "bld", n_tasks, alpha_j, alpha_w, seeds),
        ]
        print(f"\n== split-digits, {n_tasks} tasks ==")
        print(render_accuracy_table(aggregates))


if __name__ == "__main__":
    main()

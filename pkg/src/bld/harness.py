"""Experiment driver: config parsing, seeded multi-run execution, per-task
evaluation, and table emission.

Configs are flat key/value INI files with one section per concern ([data],
[model], [method], [augment], [run]). Environment variables are expanded in
path values only. A run trains one method over the task stream for each
seed, evaluates every seen task under its own head at the end, audits the
engine for leftover state after every batch, and reports per-task
accuracies together with the method's closed-form memory overheads.
"""

from __future__ import annotations

import configparser
import json
import os
import time

import numpy as np

from . import audit
from .augment import AugmentPolicy
from .baselines import (
    BaselineConfig,
    BatchL2Engine,
    FinetuneEngine,
    LwFOfflineEngine,
    LwFSinglePassEngine,
)
from .engine import BLDConfig, BLDEngine
from .errors import ConfigError
from .model import MultiHeadNet, predict_task_labels
from .streams import Dataset, TaskStream, load_idx, make_splits, synthetic_tasks

ENGINE_TYPES = {
    "bld": BLDEngine,
    "finetune": FinetuneEngine,
    "batch_l2": BatchL2Engine,
    "lwf_single_pass": LwFSinglePassEngine,
    "lwf_offline": LwFOfflineEngine,
}

_KNOWN_KEYS = {
    "data": {
        "kind",
        "images",
        "labels",
        "test_images",
        "test_labels",
        "n_tasks",
        "split_seed",
        "limit_per_task",
        "classes_per_task",
        "samples_per_class",
        "dim",
        "separation",
    },
    "model": {"hidden", "precision"},
    "method": {
        "name",
        "alpha_j",
        "alpha_w",
        "balance_weight",
        "tau",
        "joint_iterations",
        "transforms",
        "batch_size",
        "mode",
        "l2_weight",
        "distill_weight",
        "epochs",
        "offline_batch_size",
        "iid",
    },
    "augment": {"rotation_limit", "shift_limit", "jitter_amplitude", "allow_flip"},
    "run": {"seeds", "output", "audit_every_batch", "diagnostics"},
}


class ExperimentConfig:
    """Parsed experiment description; see parse_config for the file schema."""

    def __init__(self, **kw):
        self.data_kind = kw.get("data_kind", "synthetic")
        self.images = kw.get("images")
        self.labels = kw.get("labels")
        self.test_images = kw.get("test_images")
        self.test_labels = kw.get("test_labels")
        self.n_tasks = kw.get("n_tasks", 2)
        self.split_seed = kw.get("split_seed", 7)
        self.limit_per_task = kw.get("limit_per_task", 0)
        self.classes_per_task = kw.get("classes_per_task", 2)
        self.samples_per_class = kw.get("samples_per_class", 100)
        self.dim = kw.get("dim", 16)
        self.separation = kw.get("separation", 8.0)
        self.hidden = tuple(kw.get("hidden", (256, 128)))
        self.precision = kw.get("precision", "float32")
        self.method = kw.get("method", "bld")
        self.bld = kw.get("bld")
        self.baseline = kw.get("baseline")
        self.rotation_limit = kw.get("rotation_limit", 15.0)
        self.shift_limit = kw.get("shift_limit", 2)
        self.jitter_amplitude = kw.get("jitter_amplitude", 0.05)
        self.allow_flip = kw.get("allow_flip", False)
        self.seeds = list(kw.get("seeds", (0,)))
        self.output = kw.get("output")
        self.audit_every_batch = kw.get("audit_every_batch", True)
        self.diagnostics = kw.get("diagnostics")
        if not self.seeds:
            raise ConfigError("at least one seed is required")
        if self.method not in ENGINE_TYPES:
            raise ConfigError(f"unknown method {self.method!r}")
        if self.method == "bld" and self.bld is None:
            self.bld = BLDConfig()
        if self.method != "bld" and self.baseline is None:
            self.baseline = BaselineConfig(method=self.method)

    @property
    def method_config(self):
        return self.bld if self.method == "bld" else self.baseline

    @property
    def batch_size(self):
        return self.method_config.batch_size


def _get(cp, section, key, cast, default):
    if not cp.has_option(section, key):
        return default
    raw = cp.get(section, key)
    try:
        if cast is bool:
            return cp.getboolean(section, key)
        return cast(raw)
    except ValueError as e:
        raise ConfigError(f"[{section}] {key} = {raw!r}: {e}") from None


def _path(cp, section, key):
    if not cp.has_option(section, key):
        return None
    return os.path.expandvars(cp.get(section, key))


def parse_config(path):
    """Parse an INI experiment config into an ExperimentConfig."""
    cp = configparser.ConfigParser(inline_comment_prefixes=("#", ";"))
    try:
        if not cp.read(path):
            raise ConfigError(f"cannot read config file {str(path)!r}")
    except configparser.Error as e:
        raise ConfigError(f"malformed config file: {e}") from None
    for section in cp.sections():
        if section not in _KNOWN_KEYS:
            raise ConfigError(f"unknown config section [{section}]")
        for key in cp[section]:
            if key not in _KNOWN_KEYS[section]:
                raise ConfigError(f"unknown key {key!r} in section [{section}]")

    kind = _get(cp, "data", "kind", str, "synthetic")
    if kind not in ("idx", "synthetic"):
        raise ConfigError(f"unknown data kind {kind!r}")
    method = _get(cp, "method", "name", str, "bld")

    method_kw = {}
    for key, cast in (
        ("alpha_j", float),
        ("alpha_w", float),
        ("balance_weight", float),
        ("tau", float),
        ("joint_iterations", int),
        ("transforms", int),
        ("batch_size", int),
        ("mode", str),
        ("l2_weight", float),
        ("distill_weight", float),
        ("epochs", int),
        ("offline_batch_size", int),
        ("iid", bool),
    ):
        val = _get(cp, "method", key, cast, None)
        if val is not None:
            method_kw[key] = val

    bld_cfg = baseline_cfg = None
    if method == "bld":
        allowed = {"alpha_j", "alpha_w", "balance_weight", "tau", "joint_iterations", "transforms", "batch_size", "mode"}
        bld_cfg = BLDConfig(**{k: v for k, v in method_kw.items() if k in allowed})
    else:
        method_kw.pop("balance_weight", None)
        method_kw.pop("mode", None)
        baseline_cfg = BaselineConfig(method=method, **method_kw)

    seeds_raw = _get(cp, "run", "seeds", str, "0")
    try:
        seeds = [int(s) for s in seeds_raw.replace(",", " ").split()]
    except ValueError:
        raise ConfigError(f"bad seeds list {seeds_raw!r}") from None

    hidden_raw = _get(cp, "model", "hidden", str, "256,128")
    try:
        hidden = tuple(int(s) for s in hidden_raw.replace(",", " ").split())
    except ValueError:
        raise ConfigError(f"bad hidden layout {hidden_raw!r}") from None

    return ExperimentConfig(
        data_kind=kind,
        images=_path(cp, "data", "images"),
        labels=_path(cp, "data", "labels"),
        test_images=_path(cp, "data", "test_images"),
        test_labels=_path(cp, "data", "test_labels"),
        n_tasks=_get(cp, "data", "n_tasks", int, 2),
        split_seed=_get(cp, "data", "split_seed", int, 7),
        limit_per_task=_get(cp, "data", "limit_per_task", int, 0),
        classes_per_task=_get(cp, "data", "classes_per_task", int, 2),
        samples_per_class=_get(cp, "data", "samples_per_class", int, 100),
        dim=_get(cp, "data", "dim", int, 16),
        separation=_get(cp, "data", "separation", float, 8.0),
        hidden=hidden,
        precision=_get(cp, "model", "precision", str, "float32"),
        method=method,
        bld=bld_cfg,
        baseline=baseline_cfg,
        rotation_limit=_get(cp, "augment", "rotation_limit", float, 15.0),
        shift_limit=_get(cp, "augment", "shift_limit", int, 2),
        jitter_amplitude=_get(cp, "augment", "jitter_amplitude", float, 0.05),
        allow_flip=_get(cp, "augment", "allow_flip", bool, False),
        seeds=seeds,
        output=_path(cp, "run", "output"),
        audit_every_batch=_get(cp, "run", "audit_every_batch", bool, True),
        diagnostics=_path(cp, "run", "diagnostics"),
    )


def load_experiment_data(config):
    """(train, test, splits) per the config; file existence checked up front."""
    if config.data_kind == "idx":
        for p in (config.images, config.labels, config.test_images, config.test_labels):
            if not p:
                raise ConfigError("idx data needs images/labels/test_images/test_labels paths")
            if not os.path.exists(p):
                raise ConfigError(f"dataset file does not exist: {p}")
        train = Dataset.from_stacked(*load_idx(config.images, config.labels))
        test = Dataset.from_stacked(*load_idx(config.test_images, config.test_labels))
        splits = make_splits(train.labels, config.n_tasks, config.split_seed)
        return train, test, splits
    train, test, splits = synthetic_tasks(
        config.n_tasks,
        config.classes_per_task,
        config.samples_per_class,
        config.dim,
        config.separation,
        config.split_seed,
    )
    return train, test, splits


def build_policy(config, image_shape):
    # Synthetic feature vectors are not pixels: no [0, 1] clamp.
    clip = (0.0, 1.0) if config.data_kind == "idx" else None
    return AugmentPolicy(
        image_shape,
        rotation_limit=config.rotation_limit,
        shift_limit=config.shift_limit,
        jitter_amplitude=config.jitter_amplitude,
        allow_flip=config.allow_flip,
        clip=clip,
    )


class RunMetrics:
    """Final per-task test accuracies of one seeded run."""

    __slots__ = ("method", "seed", "accuracies", "average", "wall_clock", "memory")

    def __init__(self, method, seed, accuracies, wall_clock, memory):
        self.method = method
        self.seed = seed
        self.accuracies = [float(a) for a in accuracies]
        for a in self.accuracies:
            if not 0.0 <= a <= 100.0:
                raise ConfigError(f"accuracy {a} outside [0, 100]")
        self.average = float(np.mean(self.accuracies))
        self.wall_clock = wall_clock
        self.memory = memory


class MethodAggregate:
    """Cross-seed means and deviations for one method."""

    __slots__ = ("method", "runs", "mean_accuracies", "std_accuracies", "mean_average", "std_average", "memory")

    def __init__(self, method, runs, memory):
        self.method = method
        self.runs = list(runs)
        table = np.array([r.accuracies for r in self.runs], dtype=np.float64)
        self.mean_accuracies = table.mean(axis=0).tolist()
        self.std_accuracies = table.std(axis=0).tolist()
        averages = np.array([r.average for r in self.runs])
        self.mean_average = float(averages.mean())
        self.std_average = float(averages.std())
        self.memory = memory


def evaluate_tasks(net, test_dataset, splits):
    """Final test accuracy (percent) of every task under its own head."""
    accs = []
    for spec in splits:
        idx = np.flatnonzero(np.isin(test_dataset.labels, spec.class_ids))
        pred = predict_task_labels(net, spec.task_index, test_dataset.images[idx].astype(net.dtype))
        accs.append(100.0 * float((pred == test_dataset.labels[idx]).mean()))
    return accs


def overhead_shape_for_run(config, net, splits):
    """Closed-form shape parameters matching this desk-scale run."""
    task_sizes = [len(s.sample_indices) for s in splits]
    if config.limit_per_task:
        task_sizes = [min(n, config.limit_per_task) for n in task_sizes]
    mc = config.method_config
    return audit.OverheadShape(
        param_count=net.num_params,
        batch_size=mc.batch_size,
        transforms=mc.transforms,
        old_class_counts=tuple(len(s.class_ids) for s in splits[:-1]),
        samples_per_task=max(task_sizes),
        pixels_per_sample=net.input_dim,
        bytes_per_float=net.dtype.itemsize,
    )


def run_seed(config, seed, train, test, splits, policy, metrics_sink=None):
    """Train one seed over the full task stream and evaluate every task."""
    rng = np.random.default_rng(seed)
    net = MultiHeadNet.build(
        input_dim=train.images.shape[1], hidden=config.hidden, precision=config.precision, rng=rng
    )
    engine = ENGINE_TYPES[config.method](net, config.method_config, policy, rng, metrics_sink)
    stream = TaskStream(
        train,
        splits,
        config.batch_size,
        seed,
        limit_per_task=config.limit_per_task or None,
        dtype=net.dtype,
    )
    start = time.perf_counter()
    for task in stream.tasks():
        net.spawn_head(task.class_labels, rng, task.task_index)
        if engine.handles_whole_task:
            engine.process_task(task.request_full_task_access())
        else:
            for batch in task.batches():
                engine.process_batch(batch)
                if config.audit_every_batch:
                    audit.inter_batch_inventory(engine)
        if config.audit_every_batch:
            audit.inter_batch_inventory(engine)
    wall = time.perf_counter() - start
    accs = evaluate_tasks(net, test, splits)
    memory = audit.method_overhead(config.method, overhead_shape_for_run(config, net, splits))
    return RunMetrics(config.method, seed, accs, wall, memory)


def run_experiment(config):
    """All seeds of one config; returns the cross-seed aggregate."""
    train, test, splits = load_experiment_data(config)
    policy = build_policy(config, train.image_shape)
    sink_file = None
    metrics_sink = None
    if config.diagnostics:
        sink_file = open(config.diagnostics, "a")
        metrics_sink = lambda rec: sink_file.write(json.dumps(rec) + "\n")  # noqa: E731
    try:
        runs = [run_seed(config, seed, train, test, splits, policy, metrics_sink) for seed in config.seeds]
    finally:
        if sink_file is not None:
            sink_file.close()
    return MethodAggregate(config.method, runs, runs[0].memory)


def metrics_records(aggregate):
    """One machine-readable record per (seed, task)."""
    records = []
    for run in aggregate.runs:
        for task, acc in enumerate(run.accuracies):
            records.append(
                {
                    "method": run.method,
                    "seed": run.seed,
                    "task": task,
                    "accuracy": acc,
                    "intra_batch_bytes": run.memory.intra_batch_bytes,
                    "inter_batch_bytes": run.memory.inter_batch_bytes,
                    "data_storage_bytes": run.memory.data_storage_bytes,
                }
            )
    return records


def write_records(records, path):
    with open(path, "w") as f:
        for rec in records:
            f.write(json.dumps(rec, sort_keys=True) + "\n")


def read_records(paths):
    records = []
    for path in paths:
        with open(path) as f:
            for line in f:
                line = line.strip()
                if line:
                    records.append(json.loads(line))
    return records


def aggregates_from_records(records):
    """Rebuild per-method aggregates from (seed, task) records."""
    by_method = {}
    for rec in records:
        by_method.setdefault(rec["method"], {}).setdefault(rec["seed"], {})[rec["task"]] = rec
    aggregates = []
    for method, seeds in sorted(by_method.items()):
        runs = []
        memory = None
        for seed, tasks in sorted(seeds.items()):
            accs = [tasks[t]["accuracy"] for t in sorted(tasks)]
            any_rec = next(iter(tasks.values()))
            memory = audit.MemoryReport(
                method,
                intra_batch_bytes=any_rec["intra_batch_bytes"],
                inter_batch_bytes=any_rec["inter_batch_bytes"],
                data_storage_bytes=any_rec["data_storage_bytes"],
            )
            runs.append(RunMetrics(method, seed, accs, 0.0, memory))
        aggregates.append(MethodAggregate(method, runs, memory))
    return aggregates


def render_accuracy_table(aggregates):
    """Aligned text table, per-task columns then the average, best average
    marked with '*', memory overhead columns appended."""
    n_tasks = max(len(a.mean_accuracies) for a in aggregates)
    best = max(a.mean_average for a in aggregates)
    cols = [f"T{t}" for t in range(n_tasks)] + ["Avg."]
    header = f"{'Method':<16}" + "".join(f"{c:>8}" for c in cols) + f"{'Intra':>12}{'Inter':>12}{'Data':>12}"
    lines = [header, "-" * len(header)]
    for a in aggregates:
        cells = "".join(f"{v:>8.1f}" for v in a.mean_accuracies)
        avg = f"{a.mean_average:>7.1f}" + ("*" if a.mean_average == best else " ")
        lines.append(
            f"{a.method:<16}" + cells + avg
            + f"{audit.format_bytes(a.memory.intra_batch_bytes):>12}"
            + f"{audit.format_bytes(a.memory.inter_batch_bytes):>12}"
            + f"{audit.format_bytes(a.memory.data_storage_bytes):>12}"
        )
    return "\n".join(lines)

"""Memory-constraint enforcement and closed-form byte accounting.

Two constraints define the training regime: (1) nothing besides the network
parameters may survive a batch boundary, and (2) no memory may be dedicated
to auxiliary networks or network expansions. This module enforces (1) by
walking an engine's live attributes at batch boundaries, and reports each
method's byte overheads in closed form: what is alive while a batch is being
processed (intra-batch), what survives between batches (inter-batch), and
what a method stores of the raw data (data storage).

Closed-form figures are exact: the distillation engine's headline
intra-batch cost is the probability-bank payload, batch_size * transforms *
sum(old class counts) * bytes per float, with the (much smaller) transform
descriptors reported in a separate field; the parameter-snapshot baseline
costs one float per parameter; the prediction-precomputing baselines cost
samples_per_task * sum(old class counts) floats both within and between
batches.
"""

from __future__ import annotations

import json
import numbers
import sys

import numpy as np

from .augment import MAX_DESCRIPTOR_BYTES, TransformSet, transform_set_nbytes
from .engine import ProbabilityBank
from .errors import ConfigError, ConstraintViolationError
from .model import MultiHeadNet
from .nncore import ParameterSet


def bank_bytes(batch_size, transforms, old_class_counts, bytes_per_float):
    """Probability-bank payload: batch_size * transforms replica rows, one
    float per old class per row."""
    if batch_size < 1 or transforms < 1 or bytes_per_float < 1:
        raise ConfigError("bank shape parameters must be positive")
    return int(batch_size) * int(transforms) * int(sum(old_class_counts)) * int(bytes_per_float)


class OverheadShape:
    """Everything the closed forms need about a run's geometry."""

    __slots__ = (
        "param_count",
        "batch_size",
        "transforms",
        "old_class_counts",
        "samples_per_task",
        "pixels_per_sample",
        "bytes_per_float",
    )

    def __init__(
        self,
        param_count=0,
        batch_size=20,
        transforms=50,
        old_class_counts=(),
        samples_per_task=0,
        pixels_per_sample=0,
        bytes_per_float=4,
    ):
        self.param_count = int(param_count)
        self.batch_size = int(batch_size)
        self.transforms = int(transforms)
        self.old_class_counts = tuple(int(c) for c in old_class_counts)
        self.samples_per_task = int(samples_per_task)
        self.pixels_per_sample = int(pixels_per_sample)
        self.bytes_per_float = int(bytes_per_float)


class MemoryReport:
    """Per-method byte overheads plus constraint flags."""

    __slots__ = (
        "method",
        "intra_batch_bytes",
        "inter_batch_bytes",
        "data_storage_bytes",
        "constraint1_violated",
        "constraint2_violated",
        "descriptor_bytes",
        "notes",
    )

    def __init__(
        self,
        method,
        intra_batch_bytes=0,
        inter_batch_bytes=0,
        data_storage_bytes=0,
        constraint1_violated=False,
        constraint2_violated=False,
        descriptor_bytes=0,
        notes="",
    ):
        self.method = method
        self.intra_batch_bytes = int(intra_batch_bytes)
        self.inter_batch_bytes = int(inter_batch_bytes)
        self.data_storage_bytes = int(data_storage_bytes)
        self.constraint1_violated = bool(constraint1_violated)
        self.constraint2_violated = bool(constraint2_violated)
        self.descriptor_bytes = int(descriptor_bytes)
        self.notes = notes

    def as_dict(self):
        return {
            "method": self.method,
            "intra_batch_bytes": self.intra_batch_bytes,
            "inter_batch_bytes": self.inter_batch_bytes,
            "data_storage_bytes": self.data_storage_bytes,
            "constraint1_violated": self.constraint1_violated,
            "constraint2_violated": self.constraint2_violated,
            "descriptor_bytes": self.descriptor_bytes,
        }


def method_overhead(method, shape):
    """Closed-form MemoryReport for one method at one run geometry."""
    if method == "finetune":
        return MemoryReport("finetune")
    if method == "bld":
        return MemoryReport(
            "bld",
            intra_batch_bytes=bank_bytes(
                shape.batch_size, shape.transforms, shape.old_class_counts, shape.bytes_per_float
            ),
            descriptor_bytes=shape.transforms * MAX_DESCRIPTOR_BYTES,
        )
    if method == "batch_l2":
        return MemoryReport("batch_l2", intra_batch_bytes=shape.bytes_per_float * shape.param_count)
    if method in ("lwf_single_pass", "lwf_offline"):
        pred = shape.samples_per_task * sum(shape.old_class_counts) * shape.bytes_per_float
        return MemoryReport(
            method,
            intra_batch_bytes=pred,
            inter_batch_bytes=pred,
            data_storage_bytes=shape.samples_per_task * shape.pixels_per_sample,
            constraint1_violated=True,
            notes="data storage counts raw uint8 pixels of one task; on-disk or compressed sizes differ",
        )
    raise ConfigError(f"unknown method {method!r}")


# Run geometries of the three 5-task digit/object benchmarks: per-task
# training-set sizes 60000/5, 50000/5 and 73257/5, a backbone of 11.2M
# parameters at 4 bytes per float, streams of 20-image batches transformed
# 50 times, and four old 2-class tasks at the final task.
BENCHMARK_SHAPES = {
    "mnist_5task": OverheadShape(
        param_count=11_200_000,
        old_class_counts=(2, 2, 2, 2),
        samples_per_task=12_000,
        pixels_per_sample=784,
    ),
    "cifar10_5task": OverheadShape(
        param_count=11_200_000,
        old_class_counts=(2, 2, 2, 2),
        samples_per_task=10_000,
        pixels_per_sample=3_072,
    ),
    "svhn_5task": OverheadShape(
        param_count=11_200_000,
        old_class_counts=(2, 2, 2, 2),
        samples_per_task=14_651,
        pixels_per_sample=3_072,
    ),
}

BENCHMARK_METHODS = ("finetune", "batch_l2", "bld", "lwf_single_pass", "lwf_offline")


def benchmark_overhead_tables():
    """MemoryReports for every method at every benchmark geometry."""
    return {
        name: [method_overhead(m, shape) for m in BENCHMARK_METHODS]
        for name, shape in BENCHMARK_SHAPES.items()
    }


def format_bytes(n):
    """Decimal units (kB = 1000 B, MB = 1e6 B); '-' for zero."""
    if n == 0:
        return "-"
    if n >= 1_000_000:
        v = n / 1_000_000
        return f"{v:.1f}MB" if v != int(v) else f"{int(v)}MB"
    if n >= 1_000:
        return f"{round(n / 1_000)}kB"
    return f"{n}B"


def render_overhead_table(reports, title=""):
    header = f"{'Method':<16}{'Intra-batch':>14}{'Inter-batch':>14}{'Data Storage':>14}  Flags"
    lines = [title, header, "-" * len(header)] if title else [header, "-" * len(header)]
    for r in reports:
        flags = []
        if r.constraint1_violated:
            flags.append("C1")
        if r.constraint2_violated:
            flags.append("C2")
        lines.append(
            f"{r.method:<16}{format_bytes(r.intra_batch_bytes):>14}"
            f"{format_bytes(r.inter_batch_bytes):>14}{format_bytes(r.data_storage_bytes):>14}"
            f"  {','.join(flags) or '-'}"
        )
    return "\n".join(lines)


class InventoryItem:
    __slots__ = ("name", "kind", "nbytes", "digest")

    def __init__(self, name, kind, nbytes=0, digest=""):
        self.name = name
        self.kind = kind
        self.nbytes = int(nbytes)
        self.digest = digest

    def __repr__(self):
        return f"InventoryItem({self.name!r}, {self.kind!r}, {self.nbytes})"


class StateInventory:
    """Complete enumeration of an engine's live state at an inspection point."""

    def __init__(self, items):
        self.items = list(items)

    def kinds(self):
        return {it.name: it.kind for it in self.items}

    def auxiliary(self):
        return [it for it in self.items if it.kind == "auxiliary"]

    def compliant(self):
        return not self.auxiliary()

    def total_auxiliary_bytes(self):
        return sum(it.nbytes for it in self.auxiliary())


_CONFIG_SCALARS = (str, bytes, bool, numbers.Number, type(None))


def _classify(name, value):
    """(kind, nbytes, digest) for one live attribute."""
    if name == "net" and isinstance(value, MultiHeadNet):
        params = value.full_params()
        return "parameters", params.payload_nbytes, params.sha256()
    if isinstance(value, np.random.Generator):
        state = json.dumps(value.bit_generator.state, sort_keys=True, default=int)
        return "rng", len(state.encode()), ""
    if isinstance(value, _CONFIG_SCALARS) or callable(value):
        return "config", 0, ""
    if isinstance(value, (tuple, list)) and all(isinstance(v, _CONFIG_SCALARS) for v in value):
        return "config", 0, ""
    if hasattr(value, "__slots__") and not isinstance(
        value, (ParameterSet, ProbabilityBank, TransformSet, MultiHeadNet)
    ):
        # static config objects (BLDConfig, BaselineConfig, AugmentPolicy)
        inner = [getattr(value, s) for s in value.__slots__ if hasattr(value, s)]
        if all(isinstance(v, _CONFIG_SCALARS) or isinstance(v, tuple) for v in inner):
            return "config", 0, ""
    # anything else is live auxiliary state
    return "auxiliary", _aux_nbytes(value), ""


def _aux_nbytes(value):
    if isinstance(value, np.ndarray):
        return value.nbytes
    if isinstance(value, ParameterSet):
        return value.payload_nbytes
    if isinstance(value, MultiHeadNet):
        return value.payload_nbytes
    if isinstance(value, ProbabilityBank):
        return value.payload_nbytes + transform_set_nbytes(value.transforms)
    if isinstance(value, TransformSet):
        return transform_set_nbytes(value)
    if isinstance(value, dict):
        return sum(_aux_nbytes(v) for v in value.values())
    if isinstance(value, (list, tuple)):
        return sum(_aux_nbytes(v) for v in value)
    return sys.getsizeof(value)


def _live_attrs(engine):
    attrs = {}
    for holder in (getattr(type(engine), "__slots__", ()), ):
        for name in holder:
            if hasattr(engine, name):
                attrs[name] = getattr(engine, name)
    attrs.update(getattr(engine, "__dict__", {}))
    return attrs


def inter_batch_inventory(engine, at_boundary=True):
    """Enumerate every live engine attribute and classify it.

    At a batch boundary a compliant engine holds exactly the parameters, its
    static configuration, and the RNG cursor. Auxiliary state found at a
    boundary that the engine has not declared persistent (its
    `allowed_persistent` names) raises ConstraintViolationError naming the
    object. Mid-batch inspection (at_boundary=False) lists auxiliary state
    without raising.
    """
    allowed = getattr(engine, "allowed_persistent", frozenset())
    items = []
    for name, value in sorted(_live_attrs(engine).items()):
        if value is None or (isinstance(value, dict) and not value):
            items.append(InventoryItem(name, "config"))
            continue
        kind, nbytes, digest = _classify(name, value)
        if kind == "auxiliary" and at_boundary and name not in allowed:
            raise ConstraintViolationError(
                f"undeclared state survived a batch boundary: {name!r} ({nbytes} bytes)"
            )
        items.append(InventoryItem(name, kind, nbytes, digest))
    return StateInventory(items)

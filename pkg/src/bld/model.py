"""Multi-head classification network.

A shared dense feature extractor feeds one linear-softmax head per task.
Heads are instantiated at task boundaries with fresh random parameters;
spawning a head never touches the extractor or previously created heads.
The union of extractor and head parameters is the only state a compliant
training method carries across batches, so the full parameter view built
here is also what the memory auditor hashes and measures.
"""

from __future__ import annotations

import json
import math
import struct

import numpy as np

from . import nncore
from .errors import ConfigError, NumericError, ShapeError
from .nncore import GradientSet, LayerSpec, ParamBlock, ParameterSet


class Head:
    """Linear-softmax classifier for one task.

    `class_labels` keeps the original dataset labels in column order, so a
    head-local argmax maps back to a dataset label and vice versa.
    """

    __slots__ = ("task_index", "block", "class_labels")

    def __init__(self, task_index, block, class_labels):
        if len(class_labels) < 2:
            raise ConfigError("a head needs at least two classes")
        if block.weight.shape[1] != len(class_labels):
            raise ShapeError("head weight width must equal the class count")
        self.task_index = int(task_index)
        self.block = block
        self.class_labels = tuple(int(c) for c in class_labels)

    @property
    def num_classes(self):
        return len(self.class_labels)


class Batch:
    """One mini-batch: flat images, one-hot labels, owning task index."""

    __slots__ = ("images", "labels", "task_index")

    def __init__(self, images, labels, task_index):
        images = np.asarray(images)
        labels = np.asarray(labels)
        if images.ndim != 2 or images.shape[0] < 1:
            raise ShapeError("batch images must be a nonempty [B, D] matrix")
        if labels.shape != (images.shape[0], labels.shape[1]) or labels.shape[1] < 2:
            raise ShapeError("batch labels must be a [B, C] one-hot matrix")
        if not np.allclose(labels.sum(axis=1), 1.0, atol=1e-6):
            raise ShapeError("each label row must sum to 1")
        self.images = images
        self.labels = labels
        self.task_index = int(task_index)

    @property
    def size(self):
        return self.images.shape[0]


class MultiHeadNet:
    """Shared extractor plus per-task heads; parameters mutate in place."""

    def __init__(self, specs, extractor, heads=None):
        self.specs = list(specs)
        self.extractor = extractor
        self.heads = list(heads or [])

    @classmethod
    def build(cls, input_dim, hidden=(256, 128), precision="float64", rng=None):
        """Fresh network with a uniform fan-in init, U[-1/sqrt(in), +1/sqrt(in)]."""
        dtype = nncore.resolve_dtype(precision)
        rng = rng if rng is not None else np.random.default_rng(0)
        specs = nncore.mlp_specs(input_dim, hidden)
        blocks = []
        dense_index = 0
        for spec in specs:
            if spec.kind != "dense":
                continue
            bound = 1.0 / math.sqrt(spec.in_dim)
            w = rng.uniform(-bound, bound, (spec.in_dim, spec.out_dim)).astype(dtype)
            b = rng.uniform(-bound, bound, spec.out_dim).astype(dtype)
            blocks.append(ParamBlock(f"dense{dense_index}", w, b))
            dense_index += 1
        return cls(specs, ParameterSet(blocks))

    @property
    def dtype(self):
        return self.extractor.dtype

    @property
    def input_dim(self):
        return self.specs[0].in_dim

    @property
    def feature_dim(self):
        return self.specs[-1].out_dim

    @property
    def current_task(self):
        return len(self.heads)

    def spawn_head(self, class_labels, rng, task_index=None):
        """Instantiate the head for the next task; existing parameters untouched."""
        t = self.current_task + 1 if task_index is None else int(task_index)
        if t != self.current_task + 1:
            raise ConfigError(f"task {t} already has a head or is out of order (next is {self.current_task + 1})")
        bound = 1.0 / math.sqrt(self.feature_dim)
        w = rng.uniform(-bound, bound, (self.feature_dim, len(class_labels))).astype(self.dtype)
        b = rng.uniform(-bound, bound, len(class_labels)).astype(self.dtype)
        self.heads.append(Head(t, ParamBlock(f"head{t}", w, b), class_labels))
        return self

    def head_for_task(self, task_index):
        for h in self.heads:
            if h.task_index == task_index:
                return h
        raise ConfigError(f"no head exists for task {task_index}")

    def full_params(self):
        """All parameter blocks (extractor then heads), sharing the live arrays."""
        return ParameterSet(list(self.extractor.blocks) + [h.block for h in self.heads])

    @property
    def num_params(self):
        return self.full_params().num_params

    @property
    def payload_nbytes(self):
        return self.full_params().payload_nbytes


def extract_features(net, images):
    """Shared-extractor features for a [B, D] image matrix."""
    X = np.asarray(images, dtype=net.dtype)
    V, _ = nncore.forward_stack(net.specs, net.extractor.blocks, X)
    return V


def head_predict(head, features, tau):
    """Per-row class probabilities of one head at temperature tau."""
    logits = features @ head.block.weight + head.block.bias
    return nncore.softmax_temperature(logits, tau)


class HeadLoss:
    """One cross-entropy term: head index, target rows, temperature, weight."""

    __slots__ = ("head", "targets", "tau", "weight")

    def __init__(self, head, targets, tau=1.0, weight=1.0):
        self.head = int(head)
        self.targets = targets
        self.tau = float(tau)
        self.weight = float(weight)


def forward_features(net, X):
    """Extractor forward pass returning (features, cache) for reuse."""
    X = np.asarray(X, dtype=net.dtype)
    return nncore.forward_stack(net.specs, net.extractor.blocks, X)


def backward_from_losses(net, V, cache, losses, want_logit_grads=False):
    """Loss value and full-parameter gradient from precomputed features.

    Every loss term is the mean over rows of the soft-target cross-entropy
    of its head at its temperature, times its weight; the combined
    softmax+cross-entropy path uses the closed form (p - target)/tau at the
    logits. Heads not named in any loss receive zero gradient.
    """
    R = V.shape[0]
    params = net.full_params()
    grads = GradientSet.zeros_like(params)
    n_ext = len(net.extractor.blocks)
    dV = np.zeros_like(V)
    total = 0.0
    logit_grads = {}
    for hl in losses:
        head = net.heads[hl.head]
        targets = np.asarray(hl.targets)
        if targets.shape != (R, head.num_classes):
            raise ShapeError(
                f"targets for head {hl.head} have shape {targets.shape}, expected {(R, head.num_classes)}"
            )
        logits = V @ head.block.weight + head.block.bias
        probs = nncore.softmax_temperature(logits, hl.tau)
        total += hl.weight * float(nncore.soft_cross_entropy_rows(probs, targets).mean())
        dU = (probs - targets) * (hl.weight / (hl.tau * R))
        gb = grads.blocks[n_ext + hl.head]
        gb.weight += V.T @ dU
        gb.bias += dU.sum(axis=0)
        dV += dU @ head.block.weight.T
        if want_logit_grads:
            prev = logit_grads.get(hl.head)
            logit_grads[hl.head] = dU if prev is None else prev + dU
    if math.isnan(total):
        raise NumericError("loss evaluated to NaN")
    nncore.backward_stack(net.specs, net.extractor.blocks, cache, dV, grads.blocks[:n_ext])
    if want_logit_grads:
        return total, grads, logit_grads
    return total, grads


def forward_backward(net, X, losses, want_logit_grads=False):
    """Mean loss over the batch and its exact gradient for every block."""
    X = np.asarray(X, dtype=net.dtype)
    V, cache = forward_features(net, X)
    return backward_from_losses(net, V, cache, losses, want_logit_grads)


def forward_loss(net, X, losses):
    """Loss value only; used by finite-difference checks."""
    X = np.asarray(X, dtype=net.dtype)
    V, _ = forward_features(net, X)
    total = 0.0
    for hl in losses:
        head = net.heads[hl.head]
        logits = V @ head.block.weight + head.block.bias
        probs = nncore.softmax_temperature(logits, hl.tau)
        total += hl.weight * float(nncore.soft_cross_entropy_rows(probs, np.asarray(hl.targets)).mean())
    return total


def one_hot(labels, class_labels, dtype=np.float64):
    """One-hot rows over a head's class-label ordering."""
    index = {int(c): i for i, c in enumerate(class_labels)}
    out = np.zeros((len(labels), len(class_labels)), dtype=dtype)
    for r, lab in enumerate(labels):
        out[r, index[int(lab)]] = 1.0
    return out


def predict_task_labels(net, task_index, images):
    """Original dataset labels predicted by the task's own head (tau = 1)."""
    head = net.head_for_task(task_index)
    probs = head_predict(head, extract_features(net, images), 1.0)
    return np.asarray(head.class_labels)[probs.argmax(axis=1)]


def save_checkpoint(net, path):
    """Shape header + canonical parameter bytes + head metadata."""
    meta = {
        "specs": [[s.kind, s.in_dim, s.out_dim] for s in net.specs],
        "precision": nncore.DTYPE_NAMES[net.dtype],
        "heads": [{"task_index": h.task_index, "class_labels": list(h.class_labels)} for h in net.heads],
    }
    meta_bytes = json.dumps(meta, sort_keys=True).encode("utf-8")
    blob = net.full_params().to_bytes()
    with open(path, "wb") as f:
        f.write(struct.pack("<I", len(meta_bytes)))
        f.write(meta_bytes)
        f.write(blob)


def load_checkpoint(path):
    with open(path, "rb") as f:
        (mlen,) = struct.unpack("<I", f.read(4))
        meta = json.loads(f.read(mlen).decode("utf-8"))
        params = ParameterSet.from_bytes(f.read())
    specs = [LayerSpec(k, i, o) for k, i, o in meta["specs"]]
    n_ext = sum(1 for s in specs if s.kind == "dense")
    extractor = ParameterSet(params.blocks[:n_ext])
    heads = [
        Head(h["task_index"], params.blocks[n_ext + i], h["class_labels"])
        for i, h in enumerate(meta["heads"])
    ]
    return MultiHeadNet(specs, extractor, heads)

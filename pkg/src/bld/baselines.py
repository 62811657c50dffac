"""Reference training methods the distillation engine is compared against.

Finetune takes plain cross-entropy steps on whatever arrives. Batch-level L2
snapshots the parameters at the start of each batch and penalizes drift from
the snapshot during the joint steps; the snapshot is the method's (large)
intra-batch memory cost and is released at batch end. The two
prediction-precomputing variants store old-head predictions for an entire
task before training on it, which breaks the no-information-across-batches
constraint; they exist as reference points and are flagged as such in every
memory report.

Finetune and Batch-level L2 share the warm-up + joint step schedule of the
distillation engine, so with the L2 weight at zero they coincide with it
bit for bit on a first task.
"""

from __future__ import annotations

import numpy as np

from .augment import sample_descriptors
from .engine import _replicas
from .errors import ConfigError
from .model import HeadLoss, backward_from_losses, extract_features, forward_features, head_predict
from .nncore import sgd_step

METHOD_NAMES = ("finetune", "batch_l2", "lwf_single_pass", "lwf_offline")


class BaselineConfig:
    """Knobs for every baseline; each method reads the fields it needs.

    The prediction-precomputing methods train without augmentation (one
    replica per batch) and, in the offline variant, sample i.i.d. for a
    configurable number of epochs with large batches.
    """

    __slots__ = (
        "method",
        "alpha_j",
        "alpha_w",
        "joint_iterations",
        "transforms",
        "batch_size",
        "l2_weight",
        "tau",
        "distill_weight",
        "epochs",
        "offline_batch_size",
        "iid",
    )

    def __init__(
        self,
        method="finetune",
        alpha_j=1e-4,
        alpha_w=None,
        joint_iterations=2,
        transforms=50,
        batch_size=20,
        l2_weight=1.0,
        tau=2.0,
        distill_weight=1.0,
        epochs=10,
        offline_batch_size=500,
        iid=True,
    ):
        if method not in METHOD_NAMES:
            raise ConfigError(f"unknown baseline {method!r}; expected one of {METHOD_NAMES}")
        self.method = method
        self.alpha_j = float(alpha_j)
        self.alpha_w = 1e-2 * self.alpha_j if alpha_w is None else float(alpha_w)
        self.joint_iterations = int(joint_iterations)
        self.transforms = int(transforms)
        self.batch_size = int(batch_size)
        self.l2_weight = float(l2_weight)
        self.tau = float(tau)
        self.distill_weight = float(distill_weight)
        self.epochs = int(epochs)
        self.offline_batch_size = int(offline_batch_size)
        self.iid = bool(iid)
        if self.alpha_j < 0 or self.alpha_w < 0:
            raise ConfigError("learning rates must be nonnegative")
        if self.l2_weight < 0 or self.tau <= 0 or self.epochs < 1:
            raise ConfigError("invalid baseline parameters")


def _ce_step(net, X, Y, alpha):
    cur = len(net.heads) - 1
    V, cache = forward_features(net, X)
    loss, g = backward_from_losses(net, V, cache, [HeadLoss(cur, Y, tau=1.0)])
    sgd_step(net.full_params(), g, alpha)
    return loss


def finetune_batch(net, batch, config, policy, rng):
    """Warm-up step plus joint cross-entropy steps, augmentation-averaged; no
    attempt to preserve old tasks."""
    tset = sample_descriptors(config.transforms, rng, policy)
    X, Y = _replicas(batch, tset)
    _ce_step(net, X, Y, config.alpha_w)
    for _ in range(config.joint_iterations):
        _ce_step(net, X, Y, config.alpha_j)
    return net


def l2_batch(net, batch, config, policy, rng, snapshot_probe=None):
    """Finetune schedule plus an L2 pull toward the parameters saved at the
    start of the batch; the saved copy is released before the batch ends."""
    snapshot = net.full_params().copy()
    if snapshot_probe is not None:
        snapshot_probe(snapshot)
    tset = sample_descriptors(config.transforms, rng, policy)
    X, Y = _replicas(batch, tset)
    _ce_step(net, X, Y, config.alpha_w)
    cur = len(net.heads) - 1
    for _ in range(config.joint_iterations):
        V, cache = forward_features(net, X)
        _, g = backward_from_losses(net, V, cache, [HeadLoss(cur, Y, tau=1.0)])
        if config.l2_weight != 0.0:
            _add_l2_pull(g, net.full_params(), snapshot, config.l2_weight)
        sgd_step(net.full_params(), g, config.alpha_j)
    return net


def _add_l2_pull(grads, params, snapshot, weight):
    # gradient of weight * sum((theta - snapshot)^2)
    for gb, pb, sb in zip(grads.blocks, params.blocks, snapshot.blocks):
        gb.weight += (2.0 * weight) * (pb.weight - sb.weight)
        gb.bias += (2.0 * weight) * (pb.bias - sb.bias)


def l2_penalty(params, snapshot, weight):
    """Value of the drift penalty; used by gradient verification."""
    total = 0.0
    for pb, sb in zip(params.blocks, snapshot.blocks):
        dw = pb.weight - sb.weight
        db = pb.bias - sb.bias
        total += float((dw * dw).sum() + (db * db).sum())
    return weight * total


def lwf_task(net, task, config, rng, epochs, iid, batch_size, store_host=None):
    """Shared routine for the prediction-precomputing variants.

    Phase 1 stores old-head predictions for every sample of the task at the
    incoming parameters. Phase 2 runs cross-entropy plus distillation against
    the store, one step per batch, for the requested epochs. The store spans
    the whole task, so it survives batch boundaries by construction.
    """
    if net.current_task != task.task_index:
        raise ConfigError(f"no head for task {task.task_index}")
    X_all = np.asarray(task.images, dtype=net.dtype)
    Y_all = np.asarray(task.labels, dtype=net.dtype)
    n = len(X_all)
    if n == 0:
        raise ConfigError("empty task")

    store = {}
    if len(net.heads) > 1:
        V = extract_features(net, X_all)
        for h in net.heads[:-1]:
            store[h.task_index] = head_predict(h, V, config.tau)
    if store_host is not None:
        store_host.prediction_store = store

    cur = len(net.heads) - 1
    old = list(enumerate(net.heads[:-1]))
    for _ in range(epochs):
        order = rng.permutation(n) if iid else np.arange(n)
        for start in range(0, n, batch_size):
            idx = order[start : start + batch_size]
            losses = [HeadLoss(cur, Y_all[idx], tau=1.0)]
            for i, h in old:
                losses.append(
                    HeadLoss(i, store[h.task_index][idx], tau=config.tau, weight=config.distill_weight)
                )
            V, cache = forward_features(net, X_all[idx])
            _, g = backward_from_losses(net, V, cache, losses)
            sgd_step(net.full_params(), g, config.alpha_j)

    if store_host is not None:
        store_host.prediction_store = None
    return net


def lwf_single_pass_task(net, task, config, rng, store_host=None):
    """One pass over the task at the stream batch size, after precomputing
    predictions for the whole task."""
    return lwf_task(net, task, config, rng, epochs=1, iid=False, batch_size=config.batch_size, store_host=store_host)


def lwf_offline(net, task, config, rng, store_host=None):
    """Multi-epoch i.i.d. upper bound; with one epoch of sequential sampling
    it coincides with the single-pass variant exactly."""
    return lwf_task(
        net,
        task,
        config,
        rng,
        epochs=config.epochs,
        iid=config.iid,
        batch_size=config.offline_batch_size,
        store_host=store_host,
    )


class FinetuneEngine:
    method_name = "finetune"
    handles_whole_task = False
    violates_constraint1 = False
    violates_constraint2 = False
    allowed_persistent = frozenset()

    def __init__(self, net, config, policy, rng, metrics_sink=None):
        self.net = net
        self.config = config
        self.policy = policy
        self.rng = rng

    def process_batch(self, batch):
        finetune_batch(self.net, batch, self.config, self.policy, self.rng)


class BatchL2Engine:
    method_name = "batch_l2"
    handles_whole_task = False
    violates_constraint1 = False
    violates_constraint2 = False
    allowed_persistent = frozenset()

    def __init__(self, net, config, policy, rng, metrics_sink=None):
        self.net = net
        self.config = config
        self.policy = policy
        self.rng = rng
        self.theta_snapshot = None

    def process_batch(self, batch):
        def probe(snapshot):
            self.theta_snapshot = snapshot

        try:
            l2_batch(self.net, batch, self.config, self.policy, self.rng, snapshot_probe=probe)
        finally:
            self.theta_snapshot = None


class LwFSinglePassEngine:
    method_name = "lwf_single_pass"
    handles_whole_task = True
    violates_constraint1 = True
    violates_constraint2 = False
    allowed_persistent = frozenset({"prediction_store"})

    def __init__(self, net, config, policy, rng, metrics_sink=None):
        self.net = net
        self.config = config
        self.rng = rng
        self.prediction_store = None

    def process_task(self, task):
        lwf_single_pass_task(self.net, task, self.config, self.rng, store_host=self)


class LwFOfflineEngine(LwFSinglePassEngine):
    method_name = "lwf_offline"

    def process_task(self, task):
        lwf_offline(self.net, task, self.config, self.rng, store_host=self)

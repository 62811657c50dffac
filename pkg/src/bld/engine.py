"""Two-stage batch-level distillation with per-layer gradient balancing.

Each incoming batch is processed in two stages. The warm-up stage, at the
incoming parameters, banks the old heads' soft predictions on every
augmented replica of the batch, takes one small cross-entropy step on the
current task, and records per-layer gradient norms. The joint stage then
replays the same replicas, measures how far the old heads' predictions have
drifted from the bank (a soft-target cross-entropy), rescales that
distillation gradient layer by layer to a fixed multiple of the warm-up
norms, adds the new-task gradient, and steps; it iterates a configurable
number of times, re-evaluating both losses at the updated parameters each
iteration while reusing the bank and the warm-up norms.

The warm-up step exists because at the incoming parameters the drift is
identically zero, so the distillation loss has zero gradient there; only
after that first update does distillation produce a learning signal.

Everything allocated for a batch (bank, transform descriptors, norms) dies
with the batch: the only state an engine carries across batches is the
network, its config, and the RNG cursor.
"""

from __future__ import annotations

import math

import numpy as np

from .augment import replicate_batch, sample_descriptors, transform_set_nbytes
from .errors import ConfigError, NumericError, ShapeError
from .model import HeadLoss, backward_from_losses, forward_features, head_predict
from .nncore import GradientSet, sgd_step

MODES = ("full", "no_balancing", "alternated")

# Layers whose distillation gradient norm falls below this are left at zero
# instead of dividing by a vanishing norm.
NORM_EPS = 1e-12


class BLDConfig:
    """Batch-level distillation hyperparameters.

    Defaults: batches of 20 images transformed 50 times, joint learning rate
    1e-4 with the warm-up rate two orders of magnitude smaller, balancing
    factor 2, two joint iterations. The distillation temperature defaults to
    2.0 and applies only to the old-head paths (bank filling and the
    distillation loss); the new-task loss always runs at temperature 1.
    """

    __slots__ = (
        "alpha_j",
        "alpha_w",
        "balance_weight",
        "tau",
        "joint_iterations",
        "transforms",
        "batch_size",
        "mode",
    )

    def __init__(
        self,
        alpha_j=1e-4,
        alpha_w=None,
        balance_weight=2.0,
        tau=2.0,
        joint_iterations=2,
        transforms=50,
        batch_size=20,
        mode="full",
    ):
        self.alpha_j = float(alpha_j)
        self.alpha_w = 1e-2 * self.alpha_j if alpha_w is None else float(alpha_w)
        self.balance_weight = float(balance_weight)
        self.tau = float(tau)
        self.joint_iterations = int(joint_iterations)
        self.transforms = int(transforms)
        self.batch_size = int(batch_size)
        self.mode = mode
        if self.alpha_j <= 0 or self.alpha_w < 0:
            raise ConfigError("learning rates must be positive (alpha_w may be zero only for diagnostics)")
        if self.balance_weight <= 0 or self.tau <= 0:
            raise ConfigError("balance weight and temperature must be positive")
        if self.joint_iterations < 1 or self.transforms < 1 or self.batch_size < 1:
            raise ConfigError("joint_iterations, transforms and batch_size must be at least 1")
        if mode not in MODES:
            raise ConfigError(f"unknown mode {mode!r}; expected one of {MODES}")


class ProbabilityBank:
    """Old-head soft predictions for every replica row of one batch, plus the
    transform descriptors needed to regenerate those rows.

    Lives strictly inside one batch: created by the warm-up stage, consumed
    by the joint stage, released before the next batch arrives.
    """

    __slots__ = ("predictions", "transforms")

    def __init__(self, predictions, transforms):
        self.predictions = dict(predictions)  # task_index -> [(B*K) x classes]
        self.transforms = transforms

    @property
    def rows(self):
        for arr in self.predictions.values():
            return arr.shape[0]
        return 0

    @property
    def payload_nbytes(self):
        return sum(arr.nbytes for arr in self.predictions.values())

    def to_bytes(self):
        import struct

        out = [struct.pack("<H", len(self.predictions))]
        for t in sorted(self.predictions):
            arr = self.predictions[t]
            out.append(struct.pack("<HII", t, arr.shape[0], arr.shape[1]))
            out.append(np.ascontiguousarray(arr, dtype="<f8").tobytes())
        return b"".join(out)

    @classmethod
    def from_bytes(cls, data, transforms=None):
        import struct

        (count,) = struct.unpack_from("<H", data, 0)
        off = 2
        preds = {}
        for _ in range(count):
            t, rows, cols = struct.unpack_from("<HII", data, off)
            off += 10
            n = rows * cols * 8
            preds[t] = np.frombuffer(data[off : off + n], dtype="<f8").reshape(rows, cols).copy()
            off += n
        return cls(preds, transforms)


class WarmUpOutput:
    """Everything the warm-up stage hands to the joint stage."""

    __slots__ = ("theta_prime", "bank", "gw_norms")

    def __init__(self, theta_prime, bank, gw_norms):
        self.theta_prime = theta_prime
        self.bank = bank
        self.gw_norms = gw_norms

    @property
    def aux_nbytes(self):
        """Live auxiliary bytes this output pins: bank payload, descriptors,
        one float per layer norm."""
        return self.bank.payload_nbytes + transform_set_nbytes(self.bank.transforms) + 8 * len(self.gw_norms)


def _replicas(batch, tset):
    X = replicate_batch(batch.images, tset)
    Y = np.tile(batch.labels, (len(tset), 1))
    return X, Y


def warm_up_stage(net, batch, config, policy, rng):
    """Bank old-head predictions, take one warm-up step, record layer norms.

    Features for all replicas are computed once at the incoming parameters
    and shared between bank filling and the warm-up loss.
    """
    if net.current_task != batch.task_index:
        raise ConfigError(f"no head for task {batch.task_index} (current task is {net.current_task})")
    tset = sample_descriptors(config.transforms, rng, policy)
    X, Y = _replicas(batch, tset)
    V, cache = forward_features(net, X)

    preds = {}
    for h in net.heads[:-1]:
        preds[h.task_index] = head_predict(h, V, config.tau)
    bank = ProbabilityBank(preds, tset)

    cur = len(net.heads) - 1
    loss, gw = backward_from_losses(net, V, cache, [HeadLoss(cur, Y, tau=1.0)])
    if math.isnan(loss):
        raise NumericError("warm-up loss is NaN")
    gw_norms = gw.norms()
    sgd_step(net.full_params(), gw, config.alpha_w)
    return WarmUpOutput(net.full_params(), bank, gw_norms)


def balance_distillation_gradient(gj, gw_norms, balance_weight, unit_ratio=False):
    """Rescale each layer block of the distillation gradient to norm
    balance_weight * ||warm-up gradient of that layer||.

    With unit_ratio the norm ratio is replaced by 1 (the balancing ablation),
    so every block is scaled by balance_weight alone. Blocks whose own norm
    is below NORM_EPS are left untouched at zero; no division occurs.
    Mutates and returns gj.
    """
    gw_norms = np.asarray(gw_norms, dtype=np.float64)
    if len(gw_norms) != len(gj.blocks):
        raise ShapeError(f"{len(gw_norms)} norms for {len(gj.blocks)} gradient blocks")
    if unit_ratio:
        return gj.scale_(balance_weight)
    gj_norms = gj.norms()
    for i in range(len(gj.blocks)):
        if gj_norms[i] > NORM_EPS:
            gj.scale_block_(i, balance_weight * gw_norms[i] / gj_norms[i])
    return gj


def _check_bank(net, batch, bank, config):
    K = len(bank.transforms)
    if K != config.transforms:
        raise ShapeError(f"bank built from {K} transforms, config expects {config.transforms}")
    expected_rows = batch.size * K
    if net.current_task > 1 and bank.rows != expected_rows:
        raise ShapeError(f"bank has {bank.rows} rows, batch implies {expected_rows}")


def joint_training_stage(net, batch, bank, gw_norms, config, diagnostics=None):
    """Iterate balanced distillation plus new-task learning on one batch.

    Each iteration recomputes replica features at the current parameters,
    forms the distillation gradient against the bank, rescales it per layer
    with the warm-up norms (reused unchanged across iterations, as is the
    bank), adds the new-task cross-entropy gradient, and takes one step.
    """
    _check_bank(net, batch, bank, config)
    X, Y = _replicas(batch, bank.transforms)
    cur = len(net.heads) - 1
    unit_ratio = config.mode == "no_balancing"
    d_losses = [
        HeadLoss(i, bank.predictions[h.task_index], tau=config.tau) for i, h in enumerate(net.heads[:-1])
    ]
    for it in range(config.joint_iterations):
        V, cache = forward_features(net, X)
        if d_losses:
            ld, gj = backward_from_losses(net, V, cache, d_losses)
            gj = balance_distillation_gradient(gj, gw_norms, config.balance_weight, unit_ratio=unit_ratio)
        else:
            ld, gj = 0.0, GradientSet.zeros_like(net.full_params())
        lt, gt = backward_from_losses(net, V, cache, [HeadLoss(cur, Y, tau=1.0)])
        if diagnostics is not None:
            gt_norms = gt.norms()
            diagnostics.setdefault("joint", []).append(
                {
                    "distill_loss": ld,
                    "task_loss": lt,
                    # stability of the warm-up norm estimate across stages
                    "norm_drift": _norm_ratio(gt_norms, gw_norms),
                }
            )
        gj.add_(gt)
        sgd_step(net.full_params(), gj, config.alpha_j)
    return net.full_params()


def _alternated_stage(net, batch, bank, config):
    """Ablation: per iteration, one pure new-task step then one raw
    (unbalanced, unweighted) distillation step."""
    _check_bank(net, batch, bank, config)
    X, Y = _replicas(batch, bank.transforms)
    cur = len(net.heads) - 1
    d_losses = [
        HeadLoss(i, bank.predictions[h.task_index], tau=config.tau) for i, h in enumerate(net.heads[:-1])
    ]
    for _ in range(config.joint_iterations):
        V, cache = forward_features(net, X)
        _, gt = backward_from_losses(net, V, cache, [HeadLoss(cur, Y, tau=1.0)])
        sgd_step(net.full_params(), gt, config.alpha_j)
        if d_losses:
            V, cache = forward_features(net, X)
            _, gd = backward_from_losses(net, V, cache, d_losses)
            sgd_step(net.full_params(), gd, config.alpha_j)
    return net.full_params()


def _norm_ratio(a, b):
    num = float(np.linalg.norm(a))
    den = float(np.linalg.norm(b))
    return num / den if den > 0 else float("inf")


def process_batch(net, batch, config, policy, rng, metrics_sink=None):
    """Run both stages on one batch; afterwards only the parameters survive."""
    diagnostics = {} if metrics_sink is not None else None
    warm = warm_up_stage(net, batch, config, policy, rng)
    if config.mode == "alternated":
        _alternated_stage(net, batch, warm.bank, config)
    else:
        joint_training_stage(net, batch, warm.bank, warm.gw_norms, config, diagnostics)
    if metrics_sink is not None:
        metrics_sink(
            {
                "task": batch.task_index,
                "gw_norms": [float(v) for v in warm.gw_norms],
                **{k: v for k, v in (diagnostics or {}).items()},
            }
        )
    return net


class BLDEngine:
    """Per-batch driver holding exactly the state allowed between batches:
    the network, static config, and the RNG cursor."""

    method_name = "bld"
    handles_whole_task = False
    violates_constraint1 = False
    violates_constraint2 = False
    allowed_persistent = frozenset()

    def __init__(self, net, config, policy, rng, metrics_sink=None):
        self.net = net
        self.config = config
        self.policy = policy
        self.rng = rng
        self.metrics_sink = metrics_sink

    def process_batch(self, batch):
        process_batch(self.net, batch, self.config, self.policy, self.rng, self.metrics_sink)

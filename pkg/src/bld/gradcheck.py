"""Finite-difference verification of every analytic gradient path.

Central differences with step 1e-5 on seeded random 64-bit nets of at most
a thousand parameters, covering the new-task cross-entropy, the soft-target
distillation loss over multiple old heads, and the parameter-drift penalty
of the L2 baseline.
"""

from __future__ import annotations

import numpy as np

from .baselines import l2_penalty
from .model import HeadLoss, MultiHeadNet, forward_backward, forward_loss, head_predict, one_hot
from .nncore import GradientSet

FD_STEP = 1e-5
REL_TOLERANCE = 1e-4


def central_difference(loss_fn, params, step=FD_STEP):
    """Numeric gradient of loss_fn() with respect to every parameter scalar,
    perturbing the live arrays in place."""
    grads = GradientSet.zeros_like(params)
    for pb, gb in zip(params.blocks, grads.blocks):
        for arr, garr in ((pb.weight, gb.weight), (pb.bias, gb.bias)):
            flat = arr.ravel()
            gflat = garr.ravel()
            for i in range(flat.size):
                orig = flat[i]
                flat[i] = orig + step
                lp = loss_fn()
                flat[i] = orig - step
                lm = loss_fn()
                flat[i] = orig
                gflat[i] = (lp - lm) / (2.0 * step)
    return grads


def max_relative_error(analytic, numeric):
    """Elementwise |a - n| / max(|a|, |n|, 1e-8), maximized over all blocks."""
    worst = 0.0
    for ab, nb in zip(analytic.blocks, numeric.blocks):
        for a, n in ((ab.weight, nb.weight), (ab.bias, nb.bias)):
            denom = np.maximum(np.maximum(np.abs(a), np.abs(n)), 1e-8)
            worst = max(worst, float((np.abs(a - n) / denom).max()))
    return worst


def _toy_net(rng, n_heads=2, input_dim=5, hidden=(7, 6), classes=3):
    net = MultiHeadNet.build(input_dim, hidden, precision="float64", rng=rng)
    for _ in range(n_heads):
        net.spawn_head(range(classes), rng)
    assert net.num_params <= 1000
    return net


def check_new_task_ce(seed):
    """Cross-entropy on one-hot labels against the current head."""
    rng = np.random.default_rng(seed)
    net = _toy_net(rng, n_heads=1)
    X = rng.standard_normal((4, net.input_dim))
    labels = rng.integers(0, net.heads[0].num_classes, size=4)
    losses = [HeadLoss(0, one_hot(labels, net.heads[0].class_labels), tau=1.0)]
    _, analytic = forward_backward(net, X, losses)
    numeric = central_difference(lambda: forward_loss(net, X, losses), net.full_params())
    return max_relative_error(analytic, numeric)


def check_distillation(seed, tau=2.0):
    """Soft-target cross-entropy against banked old-head predictions."""
    rng = np.random.default_rng(seed)
    net = _toy_net(rng, n_heads=3)
    X = rng.standard_normal((4, net.input_dim))
    # bank soft targets at the current parameters, then perturb so the
    # gradient is nonzero where it should be
    from .model import extract_features

    V = extract_features(net, X)
    losses = [HeadLoss(i, head_predict(net.heads[i], V, tau), tau=tau) for i in range(2)]
    for b in net.full_params().blocks:
        b.weight += 0.05 * rng.standard_normal(b.weight.shape)
        b.bias += 0.05 * rng.standard_normal(b.bias.shape)
    _, analytic = forward_backward(net, X, losses)
    numeric = central_difference(lambda: forward_loss(net, X, losses), net.full_params())
    return max_relative_error(analytic, numeric)


def check_l2_baseline(seed, weight=0.7):
    """Cross-entropy plus the drift penalty toward a parameter snapshot."""
    rng = np.random.default_rng(seed)
    net = _toy_net(rng, n_heads=1)
    snapshot = net.full_params().copy()
    for b in net.full_params().blocks:
        b.weight += 0.1 * rng.standard_normal(b.weight.shape)
        b.bias += 0.1 * rng.standard_normal(b.bias.shape)
    X = rng.standard_normal((4, net.input_dim))
    labels = rng.integers(0, net.heads[0].num_classes, size=4)
    losses = [HeadLoss(0, one_hot(labels, net.heads[0].class_labels), tau=1.0)]

    _, analytic = forward_backward(net, X, losses)
    params = net.full_params()
    for gb, pb, sb in zip(analytic.blocks, params.blocks, snapshot.blocks):
        gb.weight += (2.0 * weight) * (pb.weight - sb.weight)
        gb.bias += (2.0 * weight) * (pb.bias - sb.bias)

    def loss_fn():
        return forward_loss(net, X, losses) + l2_penalty(net.full_params(), snapshot, weight)

    numeric = central_difference(loss_fn, params)
    return max_relative_error(analytic, numeric)


def run_gradient_checks(seed=0, repeats=3):
    """Max relative FD error per loss kind over several seeded nets."""
    results = {}
    for name, fn in (
        ("new_task_ce", check_new_task_ce),
        ("distillation", check_distillation),
        ("l2_baseline", check_l2_baseline),
    ):
        results[name] = max(fn(seed + r) for r in range(repeats))
    return results

import numpy as np
import pytest

from bld.augment import AugmentPolicy, replicate_batch, sample_descriptors
from bld.baselines import (
    BaselineConfig,
    BatchL2Engine,
    FinetuneEngine,
    finetune_batch,
    l2_batch,
    l2_penalty,
    lwf_offline,
    lwf_single_pass_task,
)
from bld.errors import ConfigError
from bld.model import Batch, HeadLoss, MultiHeadNet, forward_backward, forward_features, one_hot
from bld.model import backward_from_losses
from bld.nncore import GradientSet, sgd_step
from bld.streams import TaskData

POLICY = AugmentPolicy((1, 6), clip=None)


def make_net(seed=0, n_heads=1, classes=2, precision="float64"):
    r = np.random.default_rng(seed)
    net = MultiHeadNet.build(6, (8, 5), precision, r)
    for t in range(n_heads):
        net.spawn_head(range(t * classes, (t + 1) * classes), r)
    return net


def make_batch(net, rng, size=6):
    images = rng.standard_normal((size, net.input_dim))
    head = net.heads[-1]
    labels = one_hot(rng.choice(head.class_labels, size), head.class_labels)
    return Batch(images, labels, net.current_task)


def make_task(net, rng, n=20):
    head = net.heads[-1]
    images = rng.standard_normal((n, net.input_dim))
    labels = one_hot(rng.choice(head.class_labels, n), head.class_labels)
    return TaskData(net.current_task, head.class_labels, images, labels)


class TestConfig:
    def test_unknown_method(self):
        with pytest.raises(ConfigError):
            BaselineConfig(method="ewc")

    def test_zero_lr_allowed(self):
        cfg = BaselineConfig(method="finetune", alpha_j=0.0)
        assert cfg.alpha_j == 0.0 and cfg.alpha_w == 0.0


class TestFinetune:
    def test_zero_lr_freezes_parameters(self, rng):
        net = make_net(seed=1)
        before = net.full_params().to_bytes()
        cfg = BaselineConfig(method="finetune", alpha_j=0.0, transforms=3, batch_size=6)
        finetune_batch(net, make_batch(net, rng), cfg, POLICY, rng)
        assert net.full_params().to_bytes() == before

    def test_forgetting_direction_on_synthetic_tasks(self):
        # after training task 2, the fresher task scores at least as well
        from bld.harness import ExperimentConfig, run_experiment

        cfg = ExperimentConfig(
            data_kind="synthetic", n_tasks=2, classes_per_task=2, samples_per_class=80,
            dim=6, separation=6.0, split_seed=0, precision="float64", hidden=(16, 8),
            method="finetune",
            baseline=BaselineConfig(method="finetune", alpha_j=0.05, transforms=3, batch_size=8),
            seeds=[0, 1, 2],
        )
        agg = run_experiment(cfg)
        assert agg.mean_accuracies[1] >= agg.mean_accuracies[0]


class TestBatchL2:
    def test_weight_zero_equals_finetune_bit_exact(self, rng):
        batch = make_batch(make_net(seed=2), np.random.default_rng(0))

        def run(engine_cls, **kw):
            net = make_net(seed=2)
            cfg = BaselineConfig(alpha_j=0.03, transforms=3, batch_size=6, **kw)
            engine = engine_cls(net, cfg, POLICY, np.random.default_rng(7))
            for _ in range(4):
                engine.process_batch(batch)
            return net.full_params().to_bytes()

        assert run(BatchL2Engine, method="batch_l2", l2_weight=0.0) == run(FinetuneEngine, method="finetune")

    def test_pull_gradient_zero_at_snapshot(self, rng):
        net = make_net(seed=3)
        snapshot = net.full_params().copy()
        grads = GradientSet.zeros_like(net.full_params())
        from bld.baselines import _add_l2_pull

        _add_l2_pull(grads, net.full_params(), snapshot, weight=5.0)
        assert grads.max_abs() == 0.0
        assert l2_penalty(net.full_params(), snapshot, 5.0) == 0.0

    def test_snapshot_bytes_equal_parameter_payload(self, rng):
        net = make_net(seed=4)
        batch = make_batch(net, rng)
        cfg = BaselineConfig(method="batch_l2", alpha_j=0.02, transforms=3, batch_size=6)
        seen = {}
        l2_batch(net, batch, cfg, POLICY, rng, snapshot_probe=lambda s: seen.setdefault("bytes", s.payload_nbytes))
        assert seen["bytes"] == net.full_params().payload_nbytes

    def test_l2_weight_pulls_toward_snapshot(self, rng):
        # stronger pull keeps parameters closer to the batch-start copy
        # (weight kept inside the stable region alpha * 2w < 1)
        def drift(weight):
            net = make_net(seed=5)
            batch = make_batch(net, np.random.default_rng(1))
            start = net.full_params().copy()
            cfg = BaselineConfig(method="batch_l2", alpha_j=0.05, transforms=3, batch_size=6, l2_weight=weight)
            l2_batch(net, batch, cfg, POLICY, np.random.default_rng(2))
            total = 0.0
            for pb, sb in zip(net.full_params().blocks, start.blocks):
                total += float(((pb.weight - sb.weight) ** 2).sum() + ((pb.bias - sb.bias) ** 2).sum())
            return total

        assert drift(5.0) < drift(0.0)


class TestLwF:
    def test_offline_one_sequential_epoch_equals_single_pass(self):
        task = make_task(make_net(seed=6, n_heads=2), np.random.default_rng(3))

        def run(fn, **kw):
            net = make_net(seed=6, n_heads=2)
            cfg = BaselineConfig(alpha_j=0.05, batch_size=5, tau=2.0, **kw)
            fn(net, task, cfg, np.random.default_rng(11))
            return net.full_params().to_bytes()

        single = run(lwf_single_pass_task, method="lwf_single_pass")
        offline = run(lwf_offline, method="lwf_offline", epochs=1, iid=False, offline_batch_size=5)
        assert single == offline

    def test_first_task_is_pure_cross_entropy(self):
        # no old heads: the pass reduces to sequential cross-entropy steps
        task = make_task(make_net(seed=7), np.random.default_rng(4))
        net = make_net(seed=7)
        cfg = BaselineConfig(method="lwf_single_pass", alpha_j=0.05, batch_size=5)
        store = lwf_single_pass_task(net, task, cfg, np.random.default_rng(0))

        twin = make_net(seed=7)
        for start in range(0, len(task.images), 5):
            X = task.images[start : start + 5]
            Y = task.labels[start : start + 5]
            V, cache = forward_features(twin, X)
            _, g = backward_from_losses(twin, V, cache, [HeadLoss(0, Y, tau=1.0)])
            sgd_step(twin.full_params(), g, 0.05)
        assert net.full_params().to_bytes() == twin.full_params().to_bytes()

    def test_prediction_store_shape_and_bytes(self):
        net = make_net(seed=8, n_heads=3, precision="float32")
        task = make_task(net, np.random.default_rng(5), n=40)

        class Host:
            prediction_store = None

        stores = []

        class Spy(Host):
            @property
            def prediction_store(self):
                return None

            @prediction_store.setter
            def prediction_store(self, value):
                if value:
                    stores.append(value)

        cfg = BaselineConfig(method="lwf_single_pass", alpha_j=0.01, batch_size=10, tau=2.0)
        lwf_single_pass_task(net, task, cfg, np.random.default_rng(0), store_host=Spy())
        (store,) = stores
        total = sum(arr.nbytes for arr in store.values())
        # closed form: samples * sum(old class counts) * bytes per float
        assert total == 40 * (2 + 2) * 4

    def test_store_released_at_task_end(self):
        net = make_net(seed=9, n_heads=2)
        task = make_task(net, np.random.default_rng(6))

        class Host:
            prediction_store = None

        host = Host()
        cfg = BaselineConfig(method="lwf_single_pass", alpha_j=0.01, batch_size=5)
        lwf_single_pass_task(net, task, cfg, np.random.default_rng(0), store_host=host)
        assert host.prediction_store is None

    def test_zero_lr_no_learning(self):
        net = make_net(seed=10, n_heads=2)
        task = make_task(net, np.random.default_rng(7))
        before = net.full_params().to_bytes()
        cfg = BaselineConfig(method="lwf_offline", alpha_j=0.0, epochs=3, offline_batch_size=5)
        lwf_offline(net, task, cfg, np.random.default_rng(0))
        assert net.full_params().to_bytes() == before

    def test_epochs_monotonic_on_synthetic(self):
        from bld.harness import ExperimentConfig, run_experiment

        def run(epochs):
            cfg = ExperimentConfig(
                data_kind="synthetic", n_tasks=2, classes_per_task=2, samples_per_class=60,
                dim=6, separation=6.0, split_seed=1, precision="float64", hidden=(16, 8),
                method="lwf_offline",
                baseline=BaselineConfig(
                    method="lwf_offline", alpha_j=0.02, batch_size=8, epochs=epochs,
                    offline_batch_size=16, iid=True,
                ),
                seeds=[0, 1, 2],
            )
            return run_experiment(cfg).mean_average

        assert run(10) >= run(1)

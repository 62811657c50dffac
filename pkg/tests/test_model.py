import numpy as np
import pytest

from bld.errors import ConfigError, ShapeError
from bld.model import (
    Batch,
    MultiHeadNet,
    extract_features,
    head_predict,
    load_checkpoint,
    one_hot,
    predict_task_labels,
    save_checkpoint,
)
from bld.nncore import softmax_temperature


class TestExtractFeatures:
    def test_zero_weights_give_zero_features(self, toy_net, rng):
        net = toy_net()
        for b in net.extractor.blocks:
            b.weight[:] = 0.0
            b.bias[:] = 0.0
        V = extract_features(net, rng.standard_normal((3, 6)))
        assert np.all(V == 0.0)

    def test_identical_images_identical_rows(self, toy_net, rng):
        net = toy_net(seed=2)
        x = rng.standard_normal(6)
        V = extract_features(net, np.stack([x, x, x]))
        assert np.array_equal(V[0], V[1]) and np.array_equal(V[1], V[2])

    def test_matches_manual_matrix_algebra(self, toy_net, rng):
        net = toy_net(seed=5, input_dim=4, hidden=(7, 3))
        X = rng.standard_normal((6, 4))
        # independent reimplementation of the same algebra
        a = X
        for blk in net.extractor.blocks:
            a = np.maximum(a @ blk.weight + blk.bias, 0.0)
        assert np.allclose(extract_features(net, X), a, atol=1e-14)

    def test_dim_mismatch(self, toy_net):
        with pytest.raises(ShapeError):
            extract_features(toy_net(), np.zeros((2, 5)))


class TestHeadPredict:
    def test_zero_head_uniform(self, toy_net, rng):
        net = toy_net(n_heads=1, classes=4)
        net.heads[0].block.weight[:] = 0.0
        net.heads[0].block.bias[:] = 0.0
        P = head_predict(net.heads[0], extract_features(net, rng.standard_normal((3, 6))), 1.0)
        assert np.allclose(P, 0.25, atol=1e-15)

    def test_tau_one_is_plain_softmax(self, toy_net, rng):
        net = toy_net(n_heads=1)
        V = extract_features(net, rng.standard_normal((4, 6)))
        logits = V @ net.heads[0].block.weight + net.heads[0].block.bias
        assert np.allclose(head_predict(net.heads[0], V, 1.0), softmax_temperature(logits, 1.0), atol=1e-15)

    def test_tau_two_matches_formula(self, toy_net, rng):
        net = toy_net(n_heads=1)
        V = extract_features(net, rng.standard_normal((4, 6)))
        logits = V @ net.heads[0].block.weight + net.heads[0].block.bias
        expected = np.exp(logits / 2.0 - (logits / 2.0).max(axis=1, keepdims=True))
        expected /= expected.sum(axis=1, keepdims=True)
        assert np.allclose(head_predict(net.heads[0], V, 2.0), expected, atol=1e-12)


class TestSpawnHead:
    def test_first_spawn(self, rng):
        net = MultiHeadNet.build(6, (8, 5), "float64", rng)
        net.spawn_head([0, 1], rng)
        assert net.current_task == 1
        assert [h.task_index for h in net.heads] == [1]

    def test_old_heads_untouched(self, rng):
        net = MultiHeadNet.build(6, (8, 5), "float64", rng)
        net.spawn_head([0, 1], rng)
        first = net.heads[0].block.weight.tobytes() + net.heads[0].block.bias.tobytes()
        ext = net.extractor.to_bytes()
        net.spawn_head([2, 3], rng)
        assert net.heads[0].block.weight.tobytes() + net.heads[0].block.bias.tobytes() == first
        assert net.extractor.to_bytes() == ext
        assert [h.task_index for h in net.heads] == [1, 2]

    def test_seed_determinism(self):
        def spawn(seed):
            r = np.random.default_rng(seed)
            net = MultiHeadNet.build(6, (8, 5), "float64", r)
            net.spawn_head([0, 1], r)
            return net.heads[0].block.weight.copy()

        assert np.array_equal(spawn(3), spawn(3))

    def test_out_of_order_spawn_rejected(self, rng):
        net = MultiHeadNet.build(6, (8, 5), "float64", rng)
        net.spawn_head([0, 1], rng, task_index=1)
        with pytest.raises(ConfigError):
            net.spawn_head([2, 3], rng, task_index=1)
        with pytest.raises(ConfigError):
            net.spawn_head([2, 3], rng, task_index=3)

    def test_needs_two_classes(self, rng):
        net = MultiHeadNet.build(6, (8, 5), "float64", rng)
        with pytest.raises(ConfigError):
            net.spawn_head([0], rng)

    def test_init_bound(self, rng):
        net = MultiHeadNet.build(6, (8, 5), "float64", rng)
        net.spawn_head([0, 1], rng)
        bound = 1.0 / np.sqrt(net.feature_dim)
        assert abs(net.heads[0].block.weight).max() <= bound
        assert abs(net.heads[0].block.bias).max() <= bound


class TestLabelMapping:
    def test_roundtrip(self, toy_net, rng):
        net = toy_net(seed=6, n_heads=2, classes=3)
        labels = predict_task_labels(net, 2, rng.standard_normal((10, 6)))
        assert set(labels) <= set(net.heads[1].class_labels)

    def test_one_hot(self):
        Y = one_hot([7, 3, 3], (3, 7))
        assert Y.tolist() == [[0.0, 1.0], [1.0, 0.0], [1.0, 0.0]]

    def test_one_hot_rows_sum_to_one(self, rng):
        labels = rng.integers(0, 3, 20)
        Y = one_hot(labels, (0, 1, 2))
        assert np.all(Y.sum(axis=1) == 1.0)


class TestBatchValidation:
    def test_rejects_bad_label_rows(self):
        with pytest.raises(ShapeError):
            Batch(np.zeros((2, 4)), np.array([[0.5, 0.2], [1.0, 0.0]]), 1)

    def test_rejects_empty(self):
        with pytest.raises(ShapeError):
            Batch(np.zeros((0, 4)), np.zeros((0, 2)), 1)


class TestCheckpoint:
    def test_roundtrip(self, toy_net, tmp_path):
        net = toy_net(seed=8, n_heads=2, classes=3)
        path = tmp_path / "ckpt.bin"
        save_checkpoint(net, path)
        back = load_checkpoint(path)
        assert back.full_params().to_bytes() == net.full_params().to_bytes()
        assert [h.class_labels for h in back.heads] == [h.class_labels for h in net.heads]
        assert back.current_task == net.current_task
        assert back.dtype == net.dtype

    def test_inference_identical_after_reload(self, toy_net, tmp_path, rng):
        net = toy_net(seed=8, n_heads=1)
        path = tmp_path / "ckpt.bin"
        save_checkpoint(net, path)
        X = rng.standard_normal((4, 6))
        assert np.array_equal(
            predict_task_labels(net, 1, X), predict_task_labels(load_checkpoint(path), 1, X)
        )

"""Loss closed forms, Adam algebra, the epoch loop, and metric bookkeeping."""

import json
import math

import numpy as np
import pytest

from helpers import build_toy, fd_gradient, max_rel_err, toy_cnn_layers, zeroed_cnn
from signforge.dataset import LabeledDataset
from signforge.errors import ConfigError, ContractError, NumericError, ShapeError
from signforge.models import build_asl_cnn
from signforge.tensor import softmax
from signforge.trainer import (AdamState, TrainConfig, adam_step,
                               cross_entropy_loss, evaluate, train)


def one_hot(i, classes=29):
    row = np.zeros((1, classes), np.float32)
    row[0, i] = 1.0
    return row


def tiny_dataset(n=8, classes=5, seed=0, size=(8, 8, 3)):
    rng = np.random.default_rng(seed)
    images = rng.uniform(0, 1, (n,) + size).astype(np.float32)
    labels = (np.arange(n) % classes).astype(np.int64)
    return LabeledDataset(images, labels, [f"mem://{i}" for i in range(n)])


class TestCrossEntropy:
    def test_one_hot_target_gives_zero_loss(self):
        loss, _ = cross_entropy_loss(one_hot(3), [3])
        assert loss == 0.0

    def test_uniform_is_log_29(self):
        probs = np.full((1, 29), 1 / 29, np.float32)
        loss, _ = cross_entropy_loss(probs, [0])
        assert abs(loss - math.log(29)) < 1e-6

    def test_target_out_of_range(self):
        probs = np.full((1, 29), 1 / 29, np.float32)
        with pytest.raises(IndexError):
            cross_entropy_loss(probs, [29])
        with pytest.raises(IndexError):
            cross_entropy_loss(probs, [-1])

    def test_rows_must_sum_to_one(self):
        probs = np.full((1, 29), 1 / 29, np.float32) * 1.5
        with pytest.raises(ContractError):
            cross_entropy_loss(probs, [0])

    def test_fused_gradient_is_probs_minus_onehot_over_m(self):
        rng = np.random.default_rng(1)
        logits = rng.normal(size=(4, 7))
        probs = softmax(logits)
        targets = [2, 0, 6, 3]
        _, d = cross_entropy_loss(probs, targets)
        want = probs.copy()
        for i, t in enumerate(targets):
            want[i, t] -= 1.0
        assert np.allclose(d, want / 4, atol=1e-7)

    def test_fused_gradient_matches_finite_differences(self):
        rng = np.random.default_rng(2)
        logits = rng.normal(size=(3, 6))
        targets = [1, 5, 0]
        _, d = cross_entropy_loss(softmax(logits), targets)
        num = fd_gradient(
            lambda: cross_entropy_loss(softmax(logits), targets)[0], logits, 1e-6)
        assert max_rel_err(d, num) < 1e-4


class TestAdam:
    def make(self, value=1.0):
        params = {"p": np.array([value], np.float32)}
        return params, AdamState.for_params(params)

    def test_zero_gradient_is_identity(self):
        params, state = self.make()
        for _ in range(5):
            adam_step(params, {"p": np.zeros(1, np.float32)}, state, TrainConfig())
        assert params["p"][0] == 1.0

    def test_first_step_closed_form(self):
        params, state = self.make()
        cfg = TrainConfig(learning_rate=1e-4)
        adam_step(params, {"p": np.ones(1, np.float32)}, state, cfg)
        # t=1: m_hat = v_hat = 1, so the update is lr / (1 + eps)
        want = 1.0 - 1e-4 / (1.0 + cfg.epsilon)
        assert abs(params["p"][0] - want) < 1e-9
        assert state.t == 1

    def test_constant_gradient_keeps_step_near_lr(self):
        params, state = self.make()
        cfg = TrainConfig(learning_rate=1e-4)
        prev = params["p"][0]
        for _ in range(3):
            adam_step(params, {"p": np.ones(1, np.float32)}, state, cfg)
            step = prev - params["p"][0]
            # bias corrections cancel for a constant gradient
            assert abs(step - cfg.learning_rate) < 1e-8
            prev = params["p"][0]

    def test_shape_mismatch(self):
        params, state = self.make()
        with pytest.raises(ShapeError):
            adam_step(params, {"p": np.zeros(2, np.float32)}, state, TrainConfig())
        with pytest.raises(ShapeError):
            adam_step(params, {}, state, TrainConfig())

    def test_moment_shapes_match_parameters(self):
        params = {"a": np.zeros((2, 3), np.float32), "b": np.zeros(4, np.float32)}
        state = AdamState.for_params(params)
        assert state.m["a"].shape == (2, 3) and state.v["b"].shape == (4,)
        assert state.t == 0


class TestTrainConfig:
    def test_defaults_are_the_reference_configuration(self):
        cfg = TrainConfig()
        assert cfg.batch_size == 128
        assert cfg.learning_rate == 1e-4
        assert cfg.epochs == 20
        assert (cfg.beta1, cfg.beta2, cfg.epsilon) == (0.9, 0.999, 1e-8)

    def test_validation(self):
        with pytest.raises(ConfigError):
            TrainConfig(batch_size=0)
        with pytest.raises(ConfigError):
            TrainConfig(learning_rate=1.5)
        with pytest.raises(ConfigError):
            TrainConfig(epochs=0)


class TestTrainLoop:
    def test_overfits_a_single_sample(self):
        rng = np.random.default_rng(0)
        img = rng.uniform(0, 1, (1, 64, 64, 3)).astype(np.float32)
        ds = LabeledDataset(img, np.array([7], np.int64), ["mem://0"])
        model = build_asl_cnn(seed=0)
        cfg = TrainConfig(batch_size=1, learning_rate=1e-4, epochs=200, seed=0)
        history = train(model, ds, ds, cfg, quiet=True)
        assert history[-1].train_loss < 0.01

    def test_same_seed_is_bitwise_identical(self):
        results = []
        for _ in range(2):
            model = build_toy(toy_cnn_layers(), seed=5)
            ds = tiny_dataset(n=12, classes=5)
            cfg = TrainConfig(batch_size=4, epochs=2, seed=9)
            history = train(model, ds, ds, cfg, quiet=True)
            results.append((history, {k: v.copy() for k, v in model.params.items()}))
        (h1, p1), (h2, p2) = results
        assert [m.__dict__ for m in h1] == [m.__dict__ for m in h2]
        for name in p1:
            assert np.array_equal(p1[name], p2[name])

    def test_short_final_batch_included(self):
        # 10 items, batch 4 -> batches of 4, 4, 2; all items get gradient
        model = build_toy(toy_cnn_layers(), seed=1)
        before = {k: v.copy() for k, v in model.params.items()}
        ds = tiny_dataset(n=10, classes=5, seed=3)
        train(model, ds, ds, TrainConfig(batch_size=4, epochs=1, seed=1), quiet=True)
        assert any(not np.array_equal(before[k], model.params[k]) for k in before)

    def test_empty_dataset_rejected(self):
        model = build_toy(toy_cnn_layers())
        empty = LabeledDataset(np.zeros((0, 8, 8, 3), np.float32),
                               np.zeros(0, np.int64), [])
        with pytest.raises(ConfigError):
            train(model, empty, empty, TrainConfig(epochs=1), quiet=True)

    def test_out_of_range_images_rejected(self):
        model = build_toy(toy_cnn_layers())
        ds = tiny_dataset()
        ds.images[0, 0, 0, 0] = 1.5
        with pytest.raises(ContractError):
            train(model, ds, ds, TrainConfig(epochs=1), quiet=True)

    def test_frozen_parameters_do_not_move(self):
        layers = toy_cnn_layers()
        import signforge.models as M
        params = M._init_params(layers, (8, 8, 3), seed=2)
        model = M.Model("toy", layers, params, input_shape=(8, 8, 3),
                        backbone=frozenset({"c1.w", "c1.b"}))
        frozen_before = {k: model.params[k].copy() for k in ("c1.w", "c1.b")}
        ds = tiny_dataset(n=8, classes=5)
        cfg = TrainConfig(batch_size=4, epochs=1, seed=0, freeze_backbone=True)
        train(model, ds, ds, cfg, quiet=True)
        for k, v in frozen_before.items():
            assert np.array_equal(v, model.params[k])
        assert not np.array_equal(params["d2.w"], M._init_params(
            layers, (8, 8, 3), seed=2)["d2.w"])

    def test_metrics_stream_and_file(self, tmp_path, capsys):
        model = build_toy(toy_cnn_layers(), seed=4)
        ds = tiny_dataset(n=6, classes=3)
        path = tmp_path / "metrics.jsonl"
        history = train(model, ds, ds, TrainConfig(batch_size=3, epochs=2, seed=0),
                        metrics_path=str(path))
        out_lines = [json.loads(line) for line in
                     capsys.readouterr().out.strip().splitlines()]
        file_lines = [json.loads(line) for line in
                      path.read_text().strip().splitlines()]
        assert out_lines == file_lines
        assert len(file_lines) == 2
        assert list(file_lines[0]) == ["epoch", "train_loss", "train_acc",
                                       "val_loss", "val_acc"]
        assert file_lines[0]["epoch"] == 1 and file_lines[1]["epoch"] == 2
        assert [m.epoch for m in history] == [1, 2]
        assert all(0.0 <= m.val_acc <= 1.0 and m.val_loss >= 0.0 for m in history)


class TestEvaluate:
    def test_uniform_model_ties_to_lowest_index(self):
        model = zeroed_cnn()
        img = np.random.default_rng(0).uniform(0, 1, (1, 64, 64, 3)).astype(np.float32)
        ds = LabeledDataset(img, np.array([0], np.int64), ["mem://0"])
        loss, acc, confusion = evaluate(model, ds)
        assert acc == 1.0  # argmax of the uniform row is index 0
        assert confusion[0, 0] == 1
        ds2 = LabeledDataset(img, np.array([3], np.int64), ["mem://0"])
        _, acc2, conf2 = evaluate(model, ds2)
        assert acc2 == 0.0 and conf2[3, 0] == 1

    def test_perfect_predictor(self):
        model = build_toy(toy_cnn_layers(), seed=5)
        ds = tiny_dataset(n=10, classes=5, seed=7)
        cfg = TrainConfig(batch_size=5, learning_rate=2e-4, epochs=60, seed=1)
        train(model, ds, ds, cfg, quiet=True)
        loss, acc, confusion = evaluate(model, ds)
        assert acc == 1.0
        assert np.array_equal(np.diag(np.diag(confusion)), confusion)

    def test_recount_oracle(self):
        model = build_toy(toy_cnn_layers(), seed=6)
        ds = tiny_dataset(n=23, classes=5, seed=8)
        loss, acc, confusion = evaluate(model, ds, batch_size=7)
        probs = model.forward(ds.images)
        preds = probs.argmax(axis=1)
        assert acc == float((preds == ds.labels).mean())
        want_conf = np.zeros_like(confusion)
        for t, p in zip(ds.labels, preds):
            want_conf[t, p] += 1
        assert np.array_equal(confusion, want_conf)
        recount = -np.log(np.maximum(probs[np.arange(23), ds.labels], 1e-12))
        assert abs(loss - recount.mean()) < 1e-6

    def test_confusion_totals(self):
        model = build_toy(toy_cnn_layers(), seed=7)
        ds = tiny_dataset(n=17, classes=5, seed=9)
        _, acc, confusion = evaluate(model, ds)
        assert confusion.sum() == 17
        assert abs(np.trace(confusion) / 17 - acc) < 1e-12

    def test_empty_dataset(self):
        model = build_toy(toy_cnn_layers())
        empty = LabeledDataset(np.zeros((0, 8, 8, 3), np.float32),
                               np.zeros(0, np.int64), [])
        with pytest.raises(ConfigError):
            evaluate(model, empty)


class TestNumericGuards:
    def test_nonfinite_loss_names_the_batch(self):
        model = build_toy(toy_cnn_layers(), seed=8)
        model.params["d2.w"][:] = np.inf
        ds = tiny_dataset(n=4, classes=5)
        with pytest.raises((NumericError, ContractError)):
            train(model, ds, ds, TrainConfig(batch_size=4, epochs=1), quiet=True)

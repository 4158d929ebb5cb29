"""Loss against a scalar-loop oracle, optimizer arithmetic, loop invariants
(determinism, NaN abort, moving-average descent), and window fusion."""

import csv
import math

import numpy as np
import pytest

from conftest import rel_err
from emnet import network, phantom, volio
from emnet.errors import DataError, ShapeError, TrainError
from emnet.tensor import Module, Tensor, backward, no_grad, param, tsum
from emnet.train import (TrainConfig, dice_ce_loss, evaluate, normalize_volume,
                         sgd_step, sliding_window_infer, softmax_probs,
                         train_loop, window_origins)


def scalar_loop_loss(logits, labels, eps=1e-5):
    """Dice + CE computed with explicit Python loops and scalars only."""
    k = logits.shape[0]
    dims = logits.shape[1:]
    # softmax per voxel
    probs = np.zeros_like(logits)
    for x in range(dims[0]):
        for y in range(dims[1]):
            for z in range(dims[2]):
                m = max(logits[c, x, y, z] for c in range(k))
                exps = [math.exp(logits[c, x, y, z] - m) for c in range(k)]
                s = sum(exps)
                for c in range(k):
                    probs[c, x, y, z] = exps[c] / s
    dice_sum = 0.0
    for c in range(k):
        inter = 0.0
        card = 0.0
        for x in range(dims[0]):
            for y in range(dims[1]):
                for z in range(dims[2]):
                    t = 1.0 if labels[x, y, z] == c else 0.0
                    inter += probs[c, x, y, z] * t
                    card += probs[c, x, y, z] + t
        dice_sum += (2.0 * inter + eps) / (card + eps)
    ce = 0.0
    for x in range(dims[0]):
        for y in range(dims[1]):
            for z in range(dims[2]):
                c = int(labels[x, y, z])
                ce -= math.log(probs[c, x, y, z])
    n_vox = dims[0] * dims[1] * dims[2]
    return (1.0 - dice_sum / k) + ce / n_vox


class FakeNet(Module):
    """One trainable logit map per class; enough interface for train_loop."""

    def __init__(self, cfg, scale=0.1):
        self.cfg = cfg
        self.w = param(np.linspace(-scale, scale, cfg.classes)
                       .reshape(cfg.classes, 1, 1, 1).copy())

    def __call__(self, x, skeleton=False):
        ones = Tensor(np.ones((1,) + tuple(self.cfg.extents)))
        return self.w * ones


class TestLoss:
    def test_uniform_logits_balanced_two_class_ce_is_ln2(self):
        logits = Tensor(np.zeros((2, 4, 4, 4)))
        labels = np.zeros((4, 4, 4), dtype=np.int64)
        labels[:2] = 1  # half the voxels each class
        loss = float(dice_ce_loss(logits, labels).data)
        # soft dice with p=0.5 everywhere: per-class dice = 2*0.5V/(0.5V+V)...
        # compute the expected value from the scalar oracle instead of by hand
        want = scalar_loop_loss(np.zeros((2, 4, 4, 4)), labels)
        assert abs(loss - want) < 1e-12
        # and the CE component alone is exactly ln 2
        probs, logp = softmax_probs(Tensor(np.zeros((2, 4, 4, 4))))
        onehot = np.eye(2)[labels].transpose(3, 0, 1, 2)
        ce = -(onehot * logp.data).sum() / labels.size
        assert abs(ce - math.log(2)) < 1e-14

    def test_random_case_matches_scalar_loop_oracle(self, rng):
        logits = rng.standard_normal((3, 4, 4, 4))
        labels = rng.integers(0, 3, (4, 4, 4))
        got = float(dice_ce_loss(Tensor(logits), labels).data)
        want = scalar_loop_loss(logits, labels)
        assert abs(got - want) / max(abs(want), 1.0) < 1e-10

    def test_perfect_prediction_drives_loss_to_floor(self, rng):
        labels = rng.integers(0, 2, (4, 4, 4))
        logits = np.where(np.arange(2)[:, None, None, None] == labels, 50.0, -50.0)
        loss = float(dice_ce_loss(Tensor(logits), labels).data)
        assert loss < 1e-6

    def test_label_validation(self, rng):
        logits = Tensor(rng.standard_normal((2, 4, 4, 4)))
        with pytest.raises(ShapeError):
            dice_ce_loss(logits, np.zeros((4, 4), dtype=int))
        with pytest.raises(DataError):
            dice_ce_loss(logits, np.full((4, 4, 4), 7))

    def test_softmax_stable_for_huge_logits(self):
        probs, logp = softmax_probs(Tensor(np.array([1e4, -1e4])
                                           .reshape(2, 1, 1, 1)))
        assert np.all(np.isfinite(probs.data)) and np.all(np.isfinite(logp.data))
        assert probs.data[0, 0, 0, 0] == pytest.approx(1.0)


class TestSgd:
    def test_worked_example(self):
        p = param(np.array(1.0))
        p.grad = np.array(1.0)
        sgd_step([p], lr=0.01, weight_decay=1e-5)
        # exact coupled-decay update; 0.98999 to five decimal places
        assert float(p.data) == 1.0 - 0.01 * (1.0 + 1e-5 * 1.0)
        assert float(p.data) == pytest.approx(0.98999, abs=1e-5)
        assert p.grad is None  # grads cleared

    def test_quadratic_bowl_converges(self):
        p = param(np.array(0.9))
        for _ in range(500):
            loss = p * p
            backward(loss)
            sgd_step([p], lr=0.01)
        assert abs(float(p.data)) < 1e-3

    def test_missing_grad_raises(self):
        p = param(np.array(1.0))
        with pytest.raises(TrainError):
            sgd_step([p], lr=0.1)

    def test_one_step_strictly_decreases_frozen_batch_loss(self):
        spec = phantom.PhantomSpec(extents=(32, 32, 32), classes=2, seed=4)
        image, labels = phantom.gen_phantom(spec)
        img = normalize_volume(image)
        net = network.build(network.desk_config("emnet", classes=2), seed=0)
        loss0 = dice_ce_loss(net(Tensor(img)), labels)
        backward(loss0)
        sgd_step(net.params(), lr=1e-4)
        with no_grad():
            loss1 = dice_ce_loss(net(Tensor(img)), labels)
        assert float(loss1.data) < float(loss0.data)


class TestTrainLoop:
    def _tiny_setup(self, classes=2, n=2):
        cfg = network.desk_config("emnet", classes=classes)
        spec = phantom.PhantomSpec(extents=(32, 32, 32), classes=classes, seed=0)
        pairs = phantom.gen_dataset(n, spec, seed=3)
        return cfg, pairs

    def test_identical_seeds_are_bitwise_identical(self, tmp_path):
        cfg, pairs = self._tiny_setup()
        runs = []
        for tag in ("a", "b"):
            net = network.build(cfg, seed=1)
            hist = train_loop(net, pairs[:1], pairs[1:],
                              TrainConfig(epochs=2, seed=9),
                              csv_path=tmp_path / f"{tag}.csv",
                              checkpoint_path=tmp_path / f"{tag}.ckpt")
            runs.append(hist)
        assert [h["loss"] for h in runs[0]] == [h["loss"] for h in runs[1]]
        assert (tmp_path / "a.csv").read_bytes() == (tmp_path / "b.csv").read_bytes()
        assert (tmp_path / "a.ckpt").read_bytes() == (tmp_path / "b.ckpt").read_bytes()

    def test_csv_schema_has_per_class_columns(self, tmp_path):
        cfg, pairs = self._tiny_setup(classes=3)
        net = network.build(cfg, seed=0)
        train_loop(net, pairs[:1], pairs[1:], TrainConfig(epochs=1),
                   csv_path=tmp_path / "h.csv")
        rows = list(csv.reader(open(tmp_path / "h.csv")))
        assert rows[0] == ["epoch", "loss", "mean_dsc", "dsc_1", "dsc_2"]
        assert len(rows) == 2

    def test_nan_loss_aborts_naming_epoch(self):
        cfg, pairs = self._tiny_setup()
        net = FakeNet(cfg)
        net.w.data[0, 0, 0, 0] = np.nan
        with pytest.raises(TrainError, match="epoch 1"):
            train_loop(net, pairs[:1], [], TrainConfig(epochs=3))

    def test_loss_non_increasing_on_moving_average(self):
        cfg, pairs = self._tiny_setup(classes=2, n=2)
        net = network.build(cfg, seed=2)
        hist = train_loop(net, pairs, [], TrainConfig(epochs=12, lr=0.01))
        losses = [h["loss"] for h in hist]
        ma = [float(np.mean(losses[i:i + 5])) for i in range(len(losses) - 4)]
        for earlier, later in zip(ma, ma[1:]):
            assert later <= earlier + 1e-9

    def test_lr_decay_schedule_applied_per_step(self):
        cfg, pairs = self._tiny_setup(n=1)
        net = FakeNet(cfg, scale=0.5)
        start = net.w.data.copy()
        tcfg = TrainConfig(epochs=2, lr=0.1, weight_decay=0.0, lr_decay=1.0)
        train_loop(net, pairs, [], tcfg)

        net2 = FakeNet(cfg, scale=0.5)
        assert np.array_equal(net2.w.data, start)
        img = normalize_volume(pairs[0][0])
        for step in range(2):
            loss = dice_ce_loss(net2(Tensor(img)), pairs[0][1])
            backward(loss)
            sgd_step([net2.w], 0.1 / (1.0 + 1.0 * step), 0.0)
        assert np.array_equal(net.w.data, net2.w.data)

    def test_early_stop_on_target(self):
        cfg, pairs = self._tiny_setup()
        net = network.build(cfg, seed=0)
        hist = train_loop(net, pairs[:1], pairs[1:],
                          TrainConfig(epochs=50, target_dsc=0.0))
        assert len(hist) == 1  # any score passes a 0.0 target

    def test_evaluate_returns_mean_and_per_class(self):
        cfg, pairs = self._tiny_setup(classes=3)
        net = FakeNet(cfg)  # constant prediction: argmax is the last class
        mean, per = evaluate(net, pairs)
        assert per.shape == (2,)
        assert 0.0 <= mean <= 1.0


class TestNormalize:
    def test_zscore_and_idempotence(self, rng):
        x = rng.standard_normal((1, 8, 8, 8)) * 7 + 3
        n1 = normalize_volume(x)
        assert abs(float(n1.mean())) < 1e-12
        assert abs(float(n1.std()) - 1.0) < 1e-12
        n2 = normalize_volume(n1)
        assert np.allclose(n1, n2)

    def test_flat_volume_does_not_blow_up(self):
        n = normalize_volume(np.full((1, 4, 4, 4), 9.0))
        assert np.all(n == 0.0)


class TestSlidingWindow:
    def test_documented_origin_set(self):
        axes = window_origins((32, 32, 32), (64, 64, 64), 0.5)
        assert axes == [[0, 16, 32]] * 3
        assert len(axes[0]) * len(axes[1]) * len(axes[2]) == 27

    def test_final_origin_clamped(self):
        axes = window_origins((32,), (70,), 0.5)
        assert axes == [[0, 16, 32, 38]]

    def test_window_equal_to_volume_is_bitwise_direct(self, rng):
        net = network.build(network.desk_config("emnet", classes=2), seed=0)
        img = rng.standard_normal((1, 32, 32, 32))
        with no_grad():
            direct = net(Tensor(np.asarray(img, dtype=np.float64))).data
        fused = sliding_window_infer(net, img)
        assert np.array_equal(direct, fused)

    @pytest.mark.parametrize("fusion", ["uniform", "gaussian"])
    def test_constant_network_fuses_to_single_window(self, fusion, rng):
        """With logits independent of position, any weighting that sums to one
        must reproduce the single-window output everywhere."""
        net = network.build(network.desk_config("emnet", classes=3), seed=0)
        net.head.w.data[:] = 0.0
        net.head.b.data[:] = np.array([0.25, -1.5, 3.0])
        img = rng.standard_normal((1, 64, 64, 64))
        fused = sliding_window_infer(net, img, window=(32, 32, 32),
                                     overlap=0.5, fusion=fusion)
        assert fused.shape == (3, 64, 64, 64)
        want = np.array([0.25, -1.5, 3.0])[:, None, None, None]
        assert np.max(np.abs(fused - want)) < 1e-12

    def test_validation_errors(self, rng):
        net = network.build(network.desk_config("emnet"), seed=0)
        img = rng.standard_normal((1, 64, 64, 64))
        with pytest.raises(ShapeError):
            sliding_window_infer(net, rng.standard_normal((64, 64, 64)))
        with pytest.raises(ShapeError):
            sliding_window_infer(net, rng.standard_normal((1, 16, 16, 16)))
        with pytest.raises(ShapeError):
            sliding_window_infer(net, img, window=(16, 16, 16))
        with pytest.raises(DataError):
            sliding_window_infer(net, img, overlap=1.0)
        with pytest.raises(DataError):
            sliding_window_infer(net, img, fusion="pyramid")

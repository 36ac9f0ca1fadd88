import csv

import numpy as np
import pytest

from diracnet import nn
from diracnet.autograd import Variable
from diracnet.data import Dataset, make_synthetic_split
from diracnet.nn import NetworkSpec
from diracnet.tensor import NumericError
from diracnet.train import SGD, OptimConfig, evaluate, fit, record_scaling, train_epoch


def var(values):
    return Variable(np.asarray(values, np.float64), requires_grad=True)


class TestSGD:
    def test_plain_step(self):
        p = var([0.0])
        p.grad = np.array([1.0])
        SGD(momentum=0.0, weight_decay=0.0).step([("p", p, "decayed")], lr=0.1)
        assert p.value[0] == pytest.approx(-0.1)

    def test_undecayed_zero_grad_unchanged(self):
        p = var([2.0, -3.0])
        p.grad = np.zeros(2)
        SGD(momentum=0.9, weight_decay=0.5).step([("a", p, "undecayed")], lr=0.1)
        np.testing.assert_array_equal(p.value, [2.0, -3.0])

    def test_third_velocity(self):
        p = var([0.0])
        opt = SGD(momentum=0.9, weight_decay=0.0)
        for _ in range(2):
            p.grad = np.array([1.0])
            opt.step([("p", p, "decayed")], lr=0.1)
        before = p.value.copy()
        p.grad = np.array([1.0])
        opt.step([("p", p, "decayed")], lr=0.1)
        assert before[0] - p.value[0] == pytest.approx(0.271)

    def test_decay_only_on_decayed_group(self, rng):
        w, a = var(rng.standard_normal(4)), var(rng.standard_normal(4))
        w0, a0 = w.value.copy(), a.value.copy()
        w.grad, a.grad = np.zeros(4), np.zeros(4)
        SGD(momentum=0.0, weight_decay=0.1).step([("w", w, "decayed"), ("a", a, "undecayed")], 1.0)
        np.testing.assert_allclose(w.value, w0 * 0.9)
        np.testing.assert_array_equal(a.value, a0)

    def test_non_finite_gradient_names_parameter(self):
        p = var([1.0])
        p.grad = np.array([np.nan])
        with pytest.raises(NumericError, match="layers.3.W"):
            SGD().step([("layers.3.W", p, "decayed")], 0.1)

    def test_network_scaling_vectors_not_decayed(self):
        net = nn.build_diracnet(NetworkSpec(1, 1))
        for _, v, _ in net.named_parameters():
            v.grad = np.zeros_like(v.value)
        before = {n: v.value.copy() for n, v, g in net.named_parameters() if g == "undecayed"}
        SGD(weight_decay=0.1).step(net.named_parameters(), lr=0.5)
        after = {n: v.value for n, v, g in net.named_parameters() if g == "undecayed"}
        for n in before:
            np.testing.assert_array_equal(before[n], after[n])


class TestSchedule:
    def test_default_boundaries(self):
        cfg = OptimConfig()
        assert cfg.lr_at(0) == pytest.approx(0.1)
        assert cfg.lr_at(59) == pytest.approx(0.1)
        assert cfg.lr_at(60) == pytest.approx(0.02)
        assert cfg.lr_at(120) == pytest.approx(0.004)
        assert cfg.lr_at(199) == pytest.approx(0.0008)

    def test_validation(self):
        with pytest.raises(ValueError):
            OptimConfig(lr=0)
        with pytest.raises(ValueError):
            OptimConfig(momentum=1.0)
        with pytest.raises(ValueError, match="increasing"):
            OptimConfig(schedule=((10, 0.1), (5, 0.1)))


def tiny_data(n=10, classes=2, seed=0):
    rng = np.random.default_rng(seed)
    images = rng.uniform(0, 1, (n, 3, 8, 8)).astype(np.float32)
    labels = np.arange(n) % classes
    return Dataset(images, labels.astype(np.int64), classes)


class TestTraining:
    def test_overfits_single_batch(self):
        data = tiny_data()
        net = nn.build_diracnet(NetworkSpec(1, 1, num_classes=2), seed=0)
        cfg = OptimConfig(lr=0.05, weight_decay=0.0, schedule=(), epochs=200, batch_size=10,
                          augment=False)
        opt = SGD(cfg.momentum, 0.0)
        for epoch in range(200):
            train_epoch(net, data, cfg, opt, epoch)
        _, acc = evaluate(net, data)
        assert acc == 1.0

    def test_evaluate_idempotent(self):
        data = tiny_data()
        net = nn.build_diracnet(NetworkSpec(1, 1, num_classes=2))
        assert evaluate(net, data) == evaluate(net, data)
        assert net.mode == "train"

    def test_empty_sets(self):
        net = nn.build_diracnet(NetworkSpec(1, 1, num_classes=2))
        empty = tiny_data().subset(np.array([], dtype=int))
        with pytest.raises(ValueError, match="empty"):
            evaluate(net, empty)
        with pytest.raises(ValueError, match="empty"):
            train_epoch(net, empty, OptimConfig(epochs=1), SGD(), 0)

    def test_loss_decreases_and_deterministic(self, tmp_path):
        train, val = make_synthetic_split(4, 25, 10, seed=3)
        cfg = OptimConfig(lr=0.05, epochs=3, batch_size=25, schedule=())

        def run(d):
            net = nn.build_diracnet(NetworkSpec(1, 1, num_classes=4), seed=1)
            return fit(net, train, val, cfg, run_dir=d)

        (tmp_path / "a").mkdir()
        (tmp_path / "b").mkdir()
        h1, h2 = run(tmp_path / "a"), run(tmp_path / "b")
        assert h1[-1]["train_loss"] < h1[0]["train_loss"]
        assert (tmp_path / "a" / "metrics.csv").read_bytes() == (tmp_path / "b" / "metrics.csv").read_bytes()
        assert h1 == h2


class TestTelemetry:
    def test_initial_rows(self):
        net = nn.build_diracnet(NetworkSpec(2, 1))
        rows = record_scaling(net, 0)
        assert len(rows) == 9
        assert all(r.a_mean == 1.0 and r.b_mean == np.float32(0.1) for r in rows)
        assert all(r.min_abs_ratio == pytest.approx(10.0) for r in rows)
        assert [r.group for r in rows] == [1] * 3 + [2] * 3 + [3] * 3

    def test_trace_file(self, tmp_path):
        train, _ = make_synthetic_split(2, 10, 2, seed=0)
        net = nn.build_diracnet(NetworkSpec(1, 1, num_classes=2))
        fit(net, train, None, OptimConfig(epochs=2, batch_size=10, schedule=()), run_dir=tmp_path)
        with open(tmp_path / "scaling_trace.csv") as f:
            rows = list(csv.DictReader(f))
        assert len(rows) == 2 * 3
        first = [r for r in rows if r["epoch"] == "0"]
        assert all(r["a_mean"] == "1" and r["b_mean"] == "0.1" for r in first)

    def test_plain_net_has_no_trace(self, tmp_path):
        train, _ = make_synthetic_split(2, 10, 2, seed=0)
        net = nn.build_plainnet(NetworkSpec(1, 1, num_classes=2, variant="plain"))
        fit(net, train, None, OptimConfig(epochs=1, batch_size=10), run_dir=tmp_path)
        assert (tmp_path / "metrics.csv").exists()
        assert not (tmp_path / "scaling_trace.csv").exists()

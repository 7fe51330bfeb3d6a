import math

import numpy as np
import pytest

from gatedssd.errors import ShapeError
from gatedssd.losses import (
    LossBreakdown,
    LossConfig,
    binary_gate_loss,
    cross_entropy,
    multibox_loss,
    smooth_l1,
    total_loss,
)
from oracles import multibox_oracle


def test_smooth_l1_examples():
    assert smooth_l1(0.0) == 0.0
    assert smooth_l1(0.5) == 0.125
    assert smooth_l1(2.0) == 1.5
    assert smooth_l1(-2.0) == 1.5


def test_cross_entropy_examples():
    assert cross_entropy([1.3, 1.3], 0) == pytest.approx(math.log(2), abs=1e-12)
    assert cross_entropy([1.3, 1.3], 1) == pytest.approx(math.log(2), abs=1e-12)
    assert cross_entropy([0.0, 20.0], 1) < 1e-6
    with pytest.raises(ShapeError):
        cross_entropy([0.0, 1.0], 2)


def test_cross_entropy_formula():
    rng = np.random.default_rng(0)
    for _ in range(20):
        x = rng.standard_normal(5) * 3
        t = int(rng.integers(0, 5))
        ref = -math.log(math.exp(x[t]) / sum(math.exp(v) for v in x))
        assert cross_entropy(x, t) == pytest.approx(ref, abs=1e-6)


def test_multibox_perfect_fit():
    rng = np.random.default_rng(1)
    labels = np.array([0, 1, 0, 1, 0, 0])
    conf = np.zeros((6, 2))
    conf[np.arange(6), labels] = 20
    targets = rng.standard_normal((6, 4))
    assert multibox_loss(conf, targets, labels, targets).l_multibox < 1e-5


def test_multibox_no_positives():
    conf = np.tile([10.0, -10.0], (5, 1))
    bd = multibox_loss(conf, np.ones((5, 4)), np.zeros(5, int), np.zeros((5, 4)))
    assert bd.l_loc == 0.0


def test_multibox_tiny_oracle():
    rng = np.random.default_rng(2)
    for _ in range(100):
        labels = np.array([[1, 0]]) if rng.random() < 0.5 else np.array([[0, 1]])
        conf = rng.standard_normal((1, 2, 2)) * 2
        loc = rng.standard_normal((1, 2, 4))
        tgt = rng.standard_normal((1, 2, 4))
        alpha = float(rng.uniform(0.5, 2))
        bd = multibox_loss(conf, loc, labels, tgt, LossConfig(alpha=alpha))
        ref = multibox_oracle(conf, loc, labels, tgt, 3, alpha)
        assert (bd.l_conf, bd.l_loc, bd.l_multibox) == pytest.approx(ref, abs=1e-6)


def test_multibox_batch_oracle():
    rng = np.random.default_rng(3)
    for _ in range(100):
        n, p, c = int(rng.integers(1, 4)), int(rng.integers(2, 9)), int(rng.integers(2, 4))
        labels = np.where(rng.random((n, p)) < 0.25, rng.integers(1, c, (n, p)), 0)
        conf = rng.standard_normal((n, p, c)) * 2
        loc, tgt = rng.standard_normal((n, p, 4)), rng.standard_normal((n, p, 4))
        ratio = int(rng.integers(1, 4))
        bd = multibox_loss(conf, loc, labels, tgt, LossConfig(neg_pos_ratio=ratio))
        ref = multibox_oracle(conf, loc, labels, tgt, ratio)
        assert (bd.l_conf, bd.l_loc, bd.l_multibox) == pytest.approx(ref, abs=1e-6)


def test_multibox_without_mining_uses_all_negatives():
    rng = np.random.default_rng(4)
    conf = rng.standard_normal((6, 2))
    labels = np.array([1, 0, 0, 0, 0, 0])
    bd = multibox_loss(conf, np.zeros((6, 4)), labels, np.zeros((6, 4)), LossConfig(hard_negative_mining=False))
    assert bd.l_conf == pytest.approx(sum(cross_entropy(conf[i], labels[i]) for i in range(6)))


def test_multibox_shape_error():
    with pytest.raises(ShapeError):
        multibox_loss(np.zeros((4, 2)), np.zeros((3, 4)), np.zeros(4, int), np.zeros((4, 4)))


def test_binary_gate_loss():
    assert binary_gate_loss([0.7, 0.7], True) == pytest.approx(math.log(2))
    assert binary_gate_loss([-10.0, 10.0], True) < 1e-6
    assert binary_gate_loss([10.0, -10.0], False) < 1e-6
    rng = np.random.default_rng(5)
    logits = rng.standard_normal((4, 2))
    labels = [True, False, False, True]
    ref = np.mean([cross_entropy(row, int(y)) for row, y in zip(logits, labels)])
    assert binary_gate_loss(logits, labels) == pytest.approx(ref, abs=1e-12)
    with pytest.raises(ShapeError):
        binary_gate_loss(np.zeros(3), True)


def test_total_loss():
    zero = total_loss(LossBreakdown(), 0.0)
    assert zero.total == 0.0
    mb = LossBreakdown(l_conf=1.0, l_loc=0.25, l_multibox=1.25, total=1.25)
    assert total_loss(mb, 0.4, LossConfig(beta=0)).total == 1.25
    assert total_loss(mb, 0.4, LossConfig(beta=2)).total == pytest.approx(2.05, abs=1e-12)


def test_loss_config_validation():
    with pytest.raises(ValueError):
        LossConfig(beta=-1)
    with pytest.raises(ValueError):
        LossConfig(neg_pos_ratio=0.5)

import numpy as np
import pytest

from gatedssd.errors import DegenerateInputError, ShapeError
from gatedssd.gate import GateDecision, GateHead, gate_decide, gate_forward, gate_logits, gate_metrics
from oracles import naive_conv, swish64


def _head(rng, c=6, g=5, scale=0.5):
    return GateHead((rng.standard_normal((g, c, 1, 1)) * scale).astype(np.float32),
                    (rng.standard_normal(g) * 0.1).astype(np.float32),
                    (rng.standard_normal((2, g)) * scale).astype(np.float32),
                    (rng.standard_normal(2) * 0.1).astype(np.float32))


def test_symmetric_logits_give_half():
    rng = np.random.default_rng(0)
    head = _head(rng)
    head.dense_w[:] = 0
    head.dense_b[:] = 0
    assert gate_forward(rng.standard_normal((1, 6, 3, 3)).astype(np.float32), head) == 0.5


def test_saturated_bias():
    rng = np.random.default_rng(1)
    head = _head(rng)
    head.dense_w[:] = 0
    head.dense_b[:] = [-10, 10]
    p = gate_forward(rng.standard_normal((1, 6, 3, 3)).astype(np.float32), head)
    assert p == pytest.approx(1 / (1 + np.exp(-20)), abs=1e-6)


def test_gate_matches_composition_oracle():
    rng = np.random.default_rng(2)
    head = _head(rng)
    x = rng.standard_normal((3, 6, 3, 3)).astype(np.float32)
    a = swish64(naive_conv(x, head.conv_w, head.conv_b, 1, 0))
    pooled = a.mean(axis=(2, 3))
    logits = pooled @ head.dense_w.astype(np.float64).T + head.dense_b
    e = np.exp(logits - logits.max(axis=1, keepdims=True))
    p = e[:, 1] / e.sum(axis=1)
    np.testing.assert_allclose(gate_logits(x, head), logits, atol=1e-5, rtol=0)
    np.testing.assert_allclose(gate_forward(x, head), p, atol=1e-5, rtol=0)


def test_gate_channel_mismatch():
    rng = np.random.default_rng(3)
    with pytest.raises(ShapeError):
        gate_forward(np.zeros((1, 5, 3, 3), np.float32), _head(rng))
    with pytest.raises(ShapeError):
        GateHead(np.zeros((4, 6, 1, 1)), np.zeros(4), np.zeros((3, 4)), np.zeros(3))


def test_gate_macs():
    head = _head(np.random.default_rng(4), c=64, g=64)
    assert head.macs((3, 3)) == 9 * 64 * 64 + 64 * 2 == 36_992


def test_decide():
    assert gate_decide(0.0, 0.0).passed
    assert gate_decide(0.5, 0.5).passed
    assert not gate_decide(0.4999, 0.5).passed
    assert not gate_decide(0.999, 1.0).passed
    with pytest.raises(ValueError):
        gate_decide(0.5, 1.5)


def test_metrics_examples():
    assert gate_metrics([True, False, True], [True, False, True])["accuracy"] == 1.0
    m = gate_metrics([True] * 4, [True, True, False, False])
    assert m["recall"] == 1.0 and m["precision"] == 0.5 and m["false_negative_rate"] == 0.0
    with pytest.raises(DegenerateInputError):
        gate_metrics([], [])
    with pytest.raises(ShapeError):
        gate_metrics([True], [True, False])


def test_metrics_counting_oracle():
    rng = np.random.default_rng(5)
    for _ in range(50):
        n = int(rng.integers(1, 40))
        dec = [GateDecision(float(p), bool(p >= 0.5)) for p in rng.uniform(0, 1, n)]
        lab = [bool(v) for v in rng.integers(0, 2, n)]
        tp = sum(d.passed and y for d, y in zip(dec, lab))
        fp = sum(d.passed and not y for d, y in zip(dec, lab))
        fn = sum(not d.passed and y for d, y in zip(dec, lab))
        tn = n - tp - fp - fn
        m = gate_metrics(dec, lab)
        assert m["accuracy"] == pytest.approx((tp + tn) / n)
        assert m["precision"] == pytest.approx(tp / (tp + fp) if tp + fp else 0.0)
        assert m["recall"] == pytest.approx(tp / (tp + fn) if tp + fn else 1.0)
        assert m["false_negative_rate"] == pytest.approx(fn / (tp + fn) if tp + fn else 0.0)

"""Binary object-presence head and the pass/skip decision."""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from gatedssd.errors import DegenerateInputError, ShapeError
from gatedssd.tensor import (
    DTYPE,
    ConvSpec,
    conv2d_backward,
    conv2d_forward,
    count_macs,
    dense_backward,
    dense_forward,
    dense_macs,
    global_avg_pool,
    global_avg_pool_backward,
    softmax,
    swish,
    swish_backward,
)


@dataclass
class GateHead:
    """1x1 conv -> swish -> global average pool -> dense(2)."""

    conv_w: np.ndarray
    conv_b: np.ndarray
    dense_w: np.ndarray
    dense_b: np.ndarray

    def __post_init__(self):
        if self.dense_w.ndim != 2 or self.dense_w.shape[0] != 2 or self.dense_b.shape != (2,):
            raise ShapeError("gate dense layer must have exactly 2 outputs")
        if self.conv_w.shape[2:] != (1, 1) or self.dense_w.shape[1] != self.conv_w.shape[0]:
            raise ShapeError("gate conv must be 1x1 and feed the dense layer's input width")

    @property
    def spec(self) -> ConvSpec:
        return ConvSpec(self.conv_w.shape[1], self.conv_w.shape[0], 1, 1, 0)

    @classmethod
    def from_params(cls, params, prefix: str = "gate"):
        return cls(params[f"{prefix}.conv.w"], params[f"{prefix}.conv.b"],
                   params[f"{prefix}.dense.w"], params[f"{prefix}.dense.b"])

    @classmethod
    def init(cls, rng, tap_channels: int, gate_channels: int = 64):
        conv_w = rng.standard_normal((gate_channels, tap_channels, 1, 1)) * math.sqrt(2.0 / tap_channels)
        dense_w = rng.standard_normal((2, gate_channels)) * math.sqrt(1.0 / gate_channels)
        return cls(conv_w.astype(DTYPE), np.zeros(gate_channels, DTYPE),
                   dense_w.astype(DTYPE), np.zeros(2, DTYPE))

    def params(self, prefix: str = "gate"):
        return {f"{prefix}.conv.w": self.conv_w, f"{prefix}.conv.b": self.conv_b,
                f"{prefix}.dense.w": self.dense_w, f"{prefix}.dense.b": self.dense_b}

    def macs(self, tap_hw) -> int:
        return (count_macs(self.spec, (self.spec.in_channels, *tap_hw))
                + dense_macs(self.dense_w.shape[1], 2))


def gate_logits(features, head: GateHead, macs=None, cache=None):
    if features.ndim != 4 or features.shape[1] != head.spec.in_channels:
        raise ShapeError(f"gate expects {head.spec.in_channels} input channels, got shape {features.shape}")
    z = conv2d_forward(features, head.conv_w, head.conv_b, head.spec, macs=macs, name="gate.conv")
    a = swish(z)
    pooled = global_avg_pool(a).reshape(features.shape[0], -1)
    logits = dense_forward(pooled, head.dense_w, head.dense_b, macs=macs, name="gate.dense")
    if cache is not None:
        cache.update(features=features, z=z, a_shape=a.shape, pooled=pooled)
    return logits


def gate_backward(cache, head: GateHead, dlogits, grads, prefix: str = "gate"):
    """Accumulate gate-head gradients; returns the gradient w.r.t. the tap features."""
    dpooled, dw, db = dense_backward(cache["pooled"], head.dense_w, dlogits)
    grads[f"{prefix}.dense.w"] = grads.get(f"{prefix}.dense.w", 0) + dw
    grads[f"{prefix}.dense.b"] = grads.get(f"{prefix}.dense.b", 0) + db
    da = global_avg_pool_backward(cache["a_shape"], dpooled)
    dz = swish_backward(cache["z"], da)
    dx, dw, db = conv2d_backward(cache["features"], head.conv_w, head.spec, dz)
    grads[f"{prefix}.conv.w"] = grads.get(f"{prefix}.conv.w", 0) + dw
    grads[f"{prefix}.conv.b"] = grads.get(f"{prefix}.conv.b", 0) + db
    return dx


def gate_forward(features, head: GateHead, macs=None):
    """Object-presence probability per frame: softmax(logits)[:, 1]."""
    p = softmax(gate_logits(features, head, macs=macs))[:, 1]
    return float(p[0]) if p.shape == (1,) else p


@dataclass(frozen=True)
class GateDecision:
    p_object: float
    passed: bool


def gate_decide(p_object: float, tau: float = 0.5) -> GateDecision:
    if not 0.0 <= tau <= 1.0:
        raise ValueError(f"gate threshold {tau} outside [0, 1]")
    return GateDecision(float(p_object), bool(p_object >= tau))


def gate_metrics(decisions, labels) -> dict[str, float]:
    """Confusion-matrix rates; recall is the share of object frames let through."""
    if len(decisions) != len(labels):
        raise ShapeError("decisions and labels differ in length")
    if not decisions:
        raise DegenerateInputError("no decisions to score")
    tp = fp = tn = fn = 0
    for d, y in zip(decisions, labels):
        passed = d.passed if isinstance(d, GateDecision) else bool(d)
        if passed and y:
            tp += 1
        elif passed:
            fp += 1
        elif y:
            fn += 1
        else:
            tn += 1
    total = tp + fp + tn + fn
    return {
        "accuracy": (tp + tn) / total,
        "precision": tp / (tp + fp) if tp + fp else 0.0,
        "recall": tp / (tp + fn) if tp + fn else 1.0,
        "false_negative_rate": fn / (tp + fn) if tp + fn else 0.0,
    }

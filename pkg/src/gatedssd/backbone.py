"""Inverted-residual feature extractor with a stride-32 gate tap."""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from gatedssd.errors import DegenerateInputError, DegenerateSpecError, ShapeError
from gatedssd.tensor import (
    DTYPE,
    ConvSpec,
    MacCounter,
    activation,
    conv2d_backward,
    conv2d_forward,
    count_macs,
)

TOTAL_STRIDE = 32


def compute_tap_size(input_size: int) -> int:
    """Spatial extent of the stride-32 tap: 224 -> 7, 300 -> 10."""
    if input_size < TOTAL_STRIDE:
        raise DegenerateInputError(f"input size {input_size} is below the total stride {TOTAL_STRIDE}")
    return math.ceil(input_size / TOTAL_STRIDE)


@dataclass(frozen=True)
class StageSpec:
    kind: str  # "conv" or "inverted_residual"
    out_channels: int
    stride: int = 1
    expansion: int = 1

    def __post_init__(self):
        if self.kind not in ("conv", "inverted_residual"):
            raise ValueError(f"unknown stage kind {self.kind!r}")
        if self.out_channels < 1 or self.stride < 1 or self.expansion < 1:
            raise DegenerateSpecError(f"invalid stage {self}")


def _default_stages():
    return [
        StageSpec("conv", 8, 2),
        StageSpec("inverted_residual", 16, 2, 3),
        StageSpec("inverted_residual", 24, 2, 3),
        StageSpec("inverted_residual", 32, 2, 3),
        StageSpec("inverted_residual", 64, 2, 3),
    ]


@dataclass
class BackboneConfig:
    input_size: int = 96
    in_channels: int = 3
    stages: list[StageSpec] = field(default_factory=_default_stages)
    gate_tap_stage: int = -1
    detection_tap_stages: list[int] = field(default_factory=lambda: [2, 3])
    activation: str = "swish"

    def __post_init__(self):
        self.stages = [s if isinstance(s, StageSpec) else StageSpec(**s) for s in self.stages]
        if not self.stages:
            raise DegenerateSpecError("backbone needs at least one stage")
        last = len(self.stages) - 1
        if self.gate_tap_stage < 0:
            self.gate_tap_stage += len(self.stages)
        if self.gate_tap_stage != last:
            raise ValueError("the gate tap must be the final backbone stage")
        taps = list(self.detection_tap_stages)
        if any(b <= a for a, b in zip(taps, taps[1:])):
            raise ValueError("detection_tap_stages must be strictly increasing")
        if taps and (taps[0] < 0 or taps[-1] > last):
            raise ValueError(f"detection_tap_stages must lie within 0..{last}")
        activation(self.activation)

    @property
    def total_stride(self) -> int:
        return math.prod(s.stride for s in self.stages)

    @classmethod
    def full_scale(cls, input_size: int = 300) -> "BackboneConfig":
        """Full-size input; 300 gives the 10x10 gate tap, 224 gives 7x7."""
        return cls(input_size=input_size)


@dataclass(frozen=True)
class ConvLayer:
    name: str
    spec: ConvSpec
    in_hw: tuple[int, int]
    act: str

    @property
    def out_hw(self):
        return self.spec.output_hw(*self.in_hw)

    def macs(self) -> int:
        return count_macs(self.spec, (self.spec.in_channels, *self.in_hw))


@dataclass(frozen=True)
class Stage:
    layers: tuple[ConvLayer, ...]
    residual: bool

    @property
    def out_channels(self):
        return self.layers[-1].spec.out_channels

    @property
    def out_hw(self):
        return self.layers[-1].out_hw


def inverted_residual_layers(prefix, in_ch, out_ch, expansion, stride, in_hw, act="swish"):
    """Expand (1x1) -> depthwise 3x3 -> linear project (1x1)."""
    hidden = in_ch * expansion
    expand = ConvLayer(f"{prefix}.expand", ConvSpec(in_ch, hidden, 1, 1, 0), in_hw, act)
    dw = ConvLayer(f"{prefix}.dw", ConvSpec(hidden, hidden, 3, stride, 1, depthwise=True), in_hw, act)
    project = ConvLayer(f"{prefix}.project", ConvSpec(hidden, out_ch, 1, 1, 0), dw.out_hw, "linear")
    residual = stride == 1 and in_ch == out_ch
    return Stage((expand, dw, project), residual)


def build_plan(config: BackboneConfig) -> list[Stage]:
    """Resolve every layer's shape; degenerate layers fail here, not at forward time."""
    plan = []
    ch, hw = config.in_channels, (config.input_size, config.input_size)
    for i, st in enumerate(config.stages):
        prefix = f"backbone.stage{i}"
        if st.kind == "conv":
            layer = ConvLayer(prefix, ConvSpec(ch, st.out_channels, 3, st.stride, 1), hw, config.activation)
            stage = Stage((layer,), False)
        else:
            stage = inverted_residual_layers(prefix, ch, st.out_channels, st.expansion, st.stride, hw,
                                             config.activation)
        plan.append(stage)
        ch, hw = stage.out_channels, stage.out_hw
    return plan


def init_conv(rng, spec: ConvSpec, scale: float = 1.0):
    fan_in = spec.in_per_group * spec.kernel[0] * spec.kernel[1]
    w = rng.standard_normal(spec.weight_shape) * (scale * math.sqrt(2.0 / fan_in))
    return w.astype(DTYPE), np.zeros(spec.out_channels, dtype=DTYPE)


def init_params(plan, rng) -> dict[str, np.ndarray]:
    params = {}
    for stage in plan:
        for layer in stage.layers:
            # project layers start small so residual blocks begin near identity
            scale = 0.5 if layer.name.endswith(".project") else 1.0
            params[f"{layer.name}.w"], params[f"{layer.name}.b"] = init_conv(rng, layer.spec, scale)
    return params


def _layer_forward(layer: ConvLayer, x, params, macs, cache):
    z = conv2d_forward(x, params[f"{layer.name}.w"], params[f"{layer.name}.b"], layer.spec,
                       macs=macs, name=layer.name)
    fwd, _ = activation(layer.act)
    y = fwd(z)
    if cache is not None:
        cache.append((layer, x, z))
    return y


def _layer_backward(entry, params, dy, grads):
    layer, x, z = entry
    _, bwd = activation(layer.act)
    dz = bwd(z, dy)
    dx, dw, db = conv2d_backward(x, params[f"{layer.name}.w"], layer.spec, dz)
    grads[f"{layer.name}.w"] = grads.get(f"{layer.name}.w", 0) + dw
    grads[f"{layer.name}.b"] = grads.get(f"{layer.name}.b", 0) + db
    return dx


def stage_forward(stage: Stage, x, params, macs=None, cache=None):
    local = [] if cache is not None else None
    y = x
    for layer in stage.layers:
        y = _layer_forward(layer, y, params, macs, local)
    if stage.residual:
        y = y + x
    if cache is not None:
        cache.append((stage, local))
    return y


def stage_backward(entry, params, dy, grads):
    stage, local = entry
    d = dy
    for item in reversed(local):
        d = _layer_backward(item, params, d, grads)
    if stage.residual:
        d = d + dy
    return d


def inverted_residual_forward(x, weights, expansion, stride, activation_name="swish",
                              macs: MacCounter | None = None):
    """Single inverted-residual block.

    ``weights`` maps ``expand.w/b``, ``dw.w/b`` and ``project.w/b`` to arrays; the
    output channel count is read from ``project.w``.
    """
    if x.ndim != 4:
        raise ShapeError(f"block input must be 4-D, got {x.shape}")
    in_ch = x.shape[1]
    out_ch = weights["project.w"].shape[0]
    stage = inverted_residual_layers("block", in_ch, out_ch, expansion, stride, x.shape[2:],
                                     activation_name)
    params = {f"block.{k}": v for k, v in weights.items()}
    for layer in stage.layers:
        if params[f"{layer.name}.w"].shape != layer.spec.weight_shape:
            raise ShapeError(f"{layer.name} weight shape {params[f'{layer.name}.w'].shape} "
                             f"!= {layer.spec.weight_shape}")
    return stage_forward(stage, x, params, macs=macs)


@dataclass
class FeatureTaps:
    gate_features: np.ndarray
    detection_features: list[np.ndarray]


class Backbone:
    def __init__(self, config: BackboneConfig):
        self.config = config
        self.plan = build_plan(config)

    def init_params(self, rng):
        return init_params(self.plan, rng)

    @property
    def gate_channels(self):
        return self.plan[self.config.gate_tap_stage].out_channels

    @property
    def gate_hw(self):
        return self.plan[self.config.gate_tap_stage].out_hw

    def tap_shapes(self):
        """(channels, h, w) of each detection tap, then of the gate tap."""
        dets = [(self.plan[i].out_channels, *self.plan[i].out_hw) for i in self.config.detection_tap_stages]
        return dets, (self.gate_channels, *self.gate_hw)

    def macs(self) -> int:
        return sum(layer.macs() for stage in self.plan for layer in stage.layers)

    def forward(self, x, params, macs=None, cache=None) -> FeatureTaps:
        cfg = self.config
        if x.ndim != 4 or x.shape[1] != cfg.in_channels or x.shape[2:] != (cfg.input_size, cfg.input_size):
            raise ShapeError(f"backbone expects (N, {cfg.in_channels}, {cfg.input_size}, "
                             f"{cfg.input_size}) frames, got {x.shape}")
        outs = []
        y = x
        for stage in self.plan:
            y = stage_forward(stage, y, params, macs, cache)
            outs.append(y)
        return FeatureTaps(outs[cfg.gate_tap_stage], [outs[i] for i in cfg.detection_tap_stages])

    def backward(self, cache, params, d_gate, d_detections, grads):
        """Accumulate parameter gradients into ``grads``; returns the input gradient.

        ``d_gate`` / entries of ``d_detections`` may be None for taps with no
        downstream gradient.
        """
        cfg = self.config
        tap_grads = {}
        for idx, g in zip(cfg.detection_tap_stages, d_detections):
            if g is not None:
                tap_grads[idx] = tap_grads.get(idx, 0) + g
        if d_gate is not None:
            tap_grads[cfg.gate_tap_stage] = tap_grads.get(cfg.gate_tap_stage, 0) + d_gate
        d = None
        for idx in range(len(self.plan) - 1, -1, -1):
            if idx in tap_grads:
                d = tap_grads[idx] if d is None else d + tap_grads[idx]
            if d is None:
                continue
            d = stage_backward(cache[idx], params, d, grads)
        return d


def backbone_forward(frame, config: BackboneConfig, params, macs=None) -> FeatureTaps:
    return Backbone(config).forward(frame, params, macs=macs)

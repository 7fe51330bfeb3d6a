"""The gated detector: shared backbone, gate head and SSD head over one parameter dict."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from gatedssd.backbone import Backbone, BackboneConfig
from gatedssd.detector import DetectionHead, DetectionParams, PriorBoxSpec, postprocess
from gatedssd.errors import ShapeError
from gatedssd.gate import GateHead, gate_backward, gate_logits
from gatedssd.losses import LossBreakdown, LossConfig, binary_gate_loss, multibox_loss, total_loss
from gatedssd.tensor import DTYPE


@dataclass
class GateConfig:
    tau: float = 0.5
    gate_channels: int = 64

    def __post_init__(self):
        if not 0.0 <= self.tau <= 1.0:
            raise ValueError("gate tau must lie in [0, 1]")
        if self.gate_channels < 1:
            raise ValueError("gate_channels must be >= 1")


@dataclass
class PreprocessConfig:
    mean: list[float] = field(default_factory=lambda: [0.5, 0.5, 0.5])
    scale: list[float] = field(default_factory=lambda: [0.25, 0.25, 0.25])

    def __post_init__(self):
        if len(self.mean) != len(self.scale) or any(s <= 0 for s in self.scale):
            raise ValueError("preprocess mean/scale must have equal length and positive scales")


@dataclass
class ModelConfig:
    backbone: BackboneConfig = field(default_factory=BackboneConfig)
    priors: PriorBoxSpec = field(default_factory=PriorBoxSpec)
    detection: DetectionParams = field(default_factory=DetectionParams)
    gate: GateConfig = field(default_factory=GateConfig)
    preprocess: PreprocessConfig = field(default_factory=PreprocessConfig)
    num_classes: int = 2
    extra_channels: int = 64


class GatedSSD:
    def __init__(self, config: ModelConfig | None = None, params: dict | None = None, seed: int = 0):
        self.config = config or ModelConfig()
        cfg = self.config
        if len(cfg.preprocess.mean) != cfg.backbone.in_channels:
            raise ValueError("preprocess constants must match the backbone input channels")
        self.backbone = Backbone(cfg.backbone)
        det_shapes, gate_shape = self.backbone.tap_shapes()
        self.head = DetectionHead(det_shapes, gate_shape, cfg.priors, cfg.num_classes,
                                  cfg.extra_channels, cfg.backbone.activation)
        self.priors = self.head.priors
        self.params = params if params is not None else self.init_params(np.random.default_rng(seed))
        self._check_params()

    def init_params(self, rng) -> dict[str, np.ndarray]:
        params = self.backbone.init_params(rng)
        params.update(GateHead.init(rng, self.backbone.gate_channels, self.config.gate.gate_channels).params())
        params.update(self.head.init_params(rng))
        return params

    def param_shapes(self) -> dict[str, tuple]:
        return {k: v.shape for k, v in self.init_params(np.random.default_rng(0)).items()}

    def _check_params(self):
        expected = self.param_shapes()
        if set(expected) != set(self.params):
            missing = sorted(set(expected) - set(self.params))
            extra = sorted(set(self.params) - set(expected))
            raise ShapeError(f"parameter names disagree with config (missing {missing}, unexpected {extra})")
        for k, shape in expected.items():
            if self.params[k].shape != shape:
                raise ShapeError(f"parameter {k} has shape {self.params[k].shape}, expected {shape}")
            self.params[k] = np.ascontiguousarray(self.params[k], dtype=DTYPE)

    @property
    def gate_head(self) -> GateHead:
        return GateHead.from_params(self.params)

    @property
    def input_size(self) -> int:
        return self.config.backbone.input_size

    def preprocess(self, frames) -> np.ndarray:
        """Per-channel (x - mean) / scale; accepts (3, H, W) or (N, 3, H, W)."""
        x = np.asarray(frames, dtype=DTYPE)
        if x.ndim == 3:
            x = x[None]
        s = self.input_size
        if x.ndim != 4 or x.shape[1:] != (self.config.backbone.in_channels, s, s):
            raise ShapeError(f"frames must be ({self.config.backbone.in_channels}, {s}, {s}), got {x.shape[-3:]}")
        pp = self.config.preprocess
        mean = np.asarray(pp.mean, dtype=DTYPE)[None, :, None, None]
        scale = np.asarray(pp.scale, dtype=DTYPE)[None, :, None, None]
        return np.ascontiguousarray((x - mean) / scale, dtype=DTYPE)

    # compute accounting -------------------------------------------------
    def backbone_macs(self) -> int:
        return self.backbone.macs()

    def gate_macs(self) -> int:
        return self.gate_head.macs(self.backbone.gate_hw)

    def detection_macs(self) -> int:
        return self.head.macs()

    # forward pieces -----------------------------------------------------
    def features(self, x, macs=None, cache=None):
        return self.backbone.forward(x, self.params, macs=macs, cache=cache)

    def gate_logits(self, taps, macs=None, cache=None):
        return gate_logits(taps.gate_features, self.gate_head, macs=macs, cache=cache)

    def detect_raw(self, taps, macs=None, cache=None):
        return self.head.forward(taps.detection_features, taps.gate_features, self.params,
                                 macs=macs, cache=cache)

    def decode_detections(self, loc, conf):
        """Per-image detection lists from raw batch outputs."""
        return [postprocess(loc[i], conf[i], self.priors, self.config.detection, self.config.priors.variances)
                for i in range(loc.shape[0])]

    # training -----------------------------------------------------------
    def loss_and_grads(self, x, prior_labels, loc_targets, frame_labels, loss_config: LossConfig | None = None):
        """Joint loss over a preprocessed batch and gradients for every parameter."""
        loss_config = loss_config or LossConfig()
        bb_cache, gate_cache, head_cache = [], {}, {}
        taps = self.features(x, cache=bb_cache)
        logits = self.gate_logits(taps, cache=gate_cache)
        loc, conf = self.detect_raw(taps, cache=head_cache)
        mb, dconf, dloc = multibox_loss(conf, loc, prior_labels, loc_targets, loss_config, with_grads=True)
        l_bin, dlogits = binary_gate_loss(logits, frame_labels, with_grads=True)
        breakdown: LossBreakdown = total_loss(mb, l_bin, loss_config)

        grads: dict[str, np.ndarray] = {}
        d_dets, d_gate = self.head.backward(head_cache, self.params, dloc.astype(DTYPE),
                                            dconf.astype(DTYPE), grads)
        d_gate_branch = gate_backward(gate_cache, self.gate_head,
                                      (loss_config.beta * dlogits).astype(DTYPE), grads)
        if not loss_config.detach_gate:
            d_gate = d_gate + d_gate_branch
        self.backbone.backward(bb_cache, self.params, d_gate, d_dets, grads)
        for k, v in self.params.items():
            grads[k] = np.asarray(grads.get(k, np.zeros_like(v)), dtype=DTYPE).reshape(v.shape)
        return breakdown, grads

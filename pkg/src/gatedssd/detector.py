"""SSD-style detection stage: priors, box coding, matching, head convs and NMS."""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace

import numpy as np

from gatedssd.errors import DegenerateInputError, ShapeError
from gatedssd.tensor import (
    DTYPE,
    ConvSpec,
    activation,
    conv2d_backward,
    conv2d_forward,
    count_macs,
    softmax,
)


@dataclass(frozen=True)
class BBox:
    """Corner-form box in normalized image coordinates."""

    xmin: float
    ymin: float
    xmax: float
    ymax: float

    def as_tuple(self):
        return (self.xmin, self.ymin, self.xmax, self.ymax)


@dataclass(frozen=True)
class Detection:
    bbox: BBox
    class_id: int
    score: float


@dataclass
class DetectionParams:
    score_threshold: float = 0.5
    nms_iou_threshold: float = 0.45
    top_k: int = 100

    def __post_init__(self):
        if not (0.0 <= self.score_threshold <= 1.0 and 0.0 <= self.nms_iou_threshold <= 1.0):
            raise ValueError("detection thresholds must lie in [0, 1]")
        if self.top_k < 1:
            raise ValueError("top_k must be >= 1")


@dataclass
class PriorBoxSpec:
    """Default-box layout. ``feature_sizes`` is filled from the network when None."""

    scales: list[float] = field(default_factory=lambda: [0.2, 0.5, 0.8])
    aspect_ratios: list[float] = field(default_factory=lambda: [1.0, 2.0, 0.5])
    extra_scale: bool = True
    max_scale: float = 1.0
    variances: tuple[float, float] = (0.1, 0.2)
    feature_sizes: list[int] | None = None

    def __post_init__(self):
        self.variances = tuple(self.variances)
        if any(not 0 < s <= 1 for s in self.scales):
            raise ValueError("prior scales must lie in (0, 1]")
        if any(b <= a for a, b in zip(self.scales, self.scales[1:])):
            raise ValueError("prior scales must be strictly increasing")
        if any(r <= 0 for r in self.aspect_ratios):
            raise ValueError("aspect ratios must be positive")
        if self.extra_scale and self.scales and self.max_scale < self.scales[-1]:
            raise ValueError("max_scale must be >= the last map scale")
        if self.feature_sizes is not None and len(self.feature_sizes) != len(self.scales):
            raise ValueError("feature_sizes and scales must have equal length")

    @property
    def priors_per_location(self) -> int:
        return len(self.aspect_ratios) + int(self.extra_scale)

    def with_feature_sizes(self, sizes) -> "PriorBoxSpec":
        sizes = [int(s) for s in sizes]
        if self.feature_sizes is not None and list(self.feature_sizes) != sizes:
            raise ShapeError(f"prior feature sizes {self.feature_sizes} do not match network maps {sizes}")
        if len(sizes) != len(self.scales):
            raise ShapeError(f"{len(sizes)} detection maps but {len(self.scales)} prior scales")
        return replace(self, feature_sizes=sizes)

    def count(self) -> int:
        return sum(f * f for f in self.feature_sizes) * self.priors_per_location


def generate_priors(spec: PriorBoxSpec) -> np.ndarray:
    """Center-form priors (cx, cy, w, h), map by map, locations row-major, ratios innermost.

    The extra ratio-1 box of scale sqrt(s_k * s_{k+1}) follows the ratio boxes.
    """
    if spec.feature_sizes is None:
        raise ValueError("prior spec has no feature sizes")
    scales = list(spec.scales) + [spec.max_scale]
    boxes = []
    for k, f in enumerate(spec.feature_sizes):
        s = scales[k]
        shapes = [(s * math.sqrt(a), s / math.sqrt(a)) for a in spec.aspect_ratios]
        if spec.extra_scale:
            s_extra = math.sqrt(s * scales[k + 1])
            shapes.append((s_extra, s_extra))
        for i in range(f):
            cy = (i + 0.5) / f
            for j in range(f):
                cx = (j + 0.5) / f
                boxes.extend((cx, cy, w, h) for w, h in shapes)
    return np.array(boxes, dtype=np.float64).reshape(-1, 4)


def center_to_corner(boxes):
    boxes = np.asarray(boxes, dtype=np.float64)
    half = boxes[..., 2:] / 2
    return np.concatenate([boxes[..., :2] - half, boxes[..., :2] + half], axis=-1)


def corner_to_center(boxes):
    boxes = np.asarray(boxes, dtype=np.float64)
    return np.concatenate([(boxes[..., :2] + boxes[..., 2:]) / 2, boxes[..., 2:] - boxes[..., :2]], axis=-1)


def iou_matrix(a, b) -> np.ndarray:
    """Pairwise IoU between corner-form boxes a (n, 4) and b (m, 4)."""
    a = np.asarray(a, dtype=np.float64).reshape(-1, 4)
    b = np.asarray(b, dtype=np.float64).reshape(-1, 4)
    lt = np.maximum(a[:, None, :2], b[None, :, :2])
    rb = np.minimum(a[:, None, 2:], b[None, :, 2:])
    wh = np.clip(rb - lt, 0, None)
    inter = wh[..., 0] * wh[..., 1]
    area_a = (a[:, 2] - a[:, 0]) * (a[:, 3] - a[:, 1])
    area_b = (b[:, 2] - b[:, 0]) * (b[:, 3] - b[:, 1])
    union = area_a[:, None] + area_b[None, :] - inter
    out = np.zeros_like(union)
    np.divide(inter, union, out=out, where=union > 0)
    return out


def iou(a: BBox, b: BBox) -> float:
    return float(iou_matrix([a.as_tuple()], [b.as_tuple()])[0, 0])


def encode(gt, priors, variances=(0.1, 0.2)) -> np.ndarray:
    """SSD offsets of corner-form ``gt`` boxes relative to center-form ``priors``."""
    gt = np.asarray(gt.as_tuple() if isinstance(gt, BBox) else gt, dtype=np.float64)
    priors = np.asarray(priors, dtype=np.float64)
    g = corner_to_center(gt)
    if np.any(g[..., 2:] <= 0):
        raise DegenerateInputError("ground-truth box has zero width or height")
    if np.any(priors[..., 2:] <= 0):
        raise DegenerateInputError("prior box has zero width or height")
    vc, vs = variances
    center = (g[..., :2] - priors[..., :2]) / (priors[..., 2:] * vc)
    size = np.log(g[..., 2:] / priors[..., 2:]) / vs
    return np.concatenate([center, size], axis=-1)


def decode(offsets, priors, variances=(0.1, 0.2), clamp: bool = True) -> np.ndarray:
    """Inverse of :func:`encode`; returns corner-form boxes, clamped to [0, 1] by default."""
    offsets = np.asarray(offsets, dtype=np.float64)
    priors = np.asarray(priors, dtype=np.float64)
    vc, vs = variances
    center = priors[..., :2] + offsets[..., :2] * vc * priors[..., 2:]
    size = priors[..., 2:] * np.exp(offsets[..., 2:] * vs)
    boxes = center_to_corner(np.concatenate([center, size], axis=-1))
    if clamp:
        boxes = np.clip(boxes, 0.0, 1.0)
    return boxes


def match_priors(gt_boxes, priors, iou_threshold: float = 0.5) -> np.ndarray:
    """Assign each prior a ground-truth index, or -1 for background.

    Every ground truth claims its best prior; other priors take their best
    ground truth when the overlap reaches ``iou_threshold``. Ties favour the
    lower ground-truth index.
    """
    priors = np.asarray(priors, dtype=np.float64).reshape(-1, 4)
    if len(priors) == 0:
        raise ShapeError("prior set is empty")
    gt_boxes = np.asarray(gt_boxes, dtype=np.float64).reshape(-1, 4)
    matches = np.full(len(priors), -1, dtype=np.int64)
    if len(gt_boxes) == 0:
        return matches
    overlaps = iou_matrix(gt_boxes, center_to_corner(priors))
    best_gt = overlaps.argmax(axis=0)
    best_gt_iou = overlaps[best_gt, np.arange(len(priors))]
    matches[best_gt_iou >= iou_threshold] = best_gt[best_gt_iou >= iou_threshold]
    best_prior = overlaps.argmax(axis=1)
    for g in range(len(gt_boxes) - 1, -1, -1):
        matches[best_prior[g]] = g
    return matches


def build_targets(gt_boxes, gt_labels, priors, variances=(0.1, 0.2), iou_threshold: float = 0.5):
    """Per-prior class labels (0 = background) and encoded box targets."""
    gt_boxes = np.asarray(gt_boxes, dtype=np.float64).reshape(-1, 4)
    matches = match_priors(gt_boxes, priors, iou_threshold)
    labels = np.zeros(len(priors), dtype=np.int64)
    targets = np.zeros((len(priors), 4), dtype=DTYPE)
    pos = matches >= 0
    if pos.any():
        labels[pos] = np.asarray(gt_labels, dtype=np.int64)[matches[pos]]
        targets[pos] = encode(gt_boxes[matches[pos]], priors[pos], variances)
    return labels, targets


@dataclass(frozen=True)
class HeadLayer:
    name: str
    spec: ConvSpec
    in_hw: tuple[int, int]

    def macs(self):
        return count_macs(self.spec, (self.spec.in_channels, *self.in_hw))


class DetectionHead:
    """Extra feature layer plus parallel loc/conf 3x3 convs on every detection map.

    ``tap_shapes`` are the (channels, h, w) of the backbone detection taps;
    ``gate_shape`` is the gate tap that feeds the extra layer.
    """

    def __init__(self, tap_shapes, gate_shape, prior_spec: PriorBoxSpec, num_classes: int = 2,
                 extra_channels: int = 64, activation_name: str = "swish"):
        self.num_classes = num_classes
        self.act = activation_name
        gc, gh, gw = gate_shape
        extra_spec = ConvSpec(gc, extra_channels, 3, 2, 1)
        self.extra = HeadLayer("extra", extra_spec, (gh, gw))
        eh, ew = extra_spec.output_hw(gh, gw)
        self.map_shapes = [tuple(s) for s in tap_shapes] + [(extra_channels, eh, ew)]
        for c, h, w in self.map_shapes:
            if h != w:
                raise ShapeError(f"detection maps must be square, got {h}x{w}")
        self.prior_spec = prior_spec.with_feature_sizes([h for _, h, _ in self.map_shapes])
        self.priors = generate_priors(self.prior_spec)
        k = self.prior_spec.priors_per_location
        self.loc_layers, self.conf_layers = [], []
        for m, (c, h, w) in enumerate(self.map_shapes):
            self.loc_layers.append(HeadLayer(f"head{m}.loc", ConvSpec(c, 4 * k, 3, 1, 1), (h, w)))
            self.conf_layers.append(HeadLayer(f"head{m}.conf", ConvSpec(c, num_classes * k, 3, 1, 1), (h, w)))

    @property
    def layers(self):
        return [self.extra, *self.loc_layers, *self.conf_layers]

    def macs(self) -> int:
        return sum(layer.macs() for layer in self.layers)

    def init_params(self, rng):
        params = {}
        for layer in self.layers:
            fan_in = layer.spec.in_channels * 9
            std = math.sqrt(2.0 / fan_in) if layer is self.extra else 0.1 / math.sqrt(fan_in)
            params[f"{layer.name}.w"] = (rng.standard_normal(layer.spec.weight_shape) * std).astype(DTYPE)
            params[f"{layer.name}.b"] = np.zeros(layer.spec.out_channels, dtype=DTYPE)
        return params

    def extra_forward(self, gate_features, params, macs=None):
        z = conv2d_forward(gate_features, params["extra.w"], params["extra.b"], self.extra.spec,
                           macs=macs, name="extra")
        return activation(self.act)[0](z), z

    def heads_forward(self, maps, params, macs=None):
        """Raw per-prior outputs: loc (N, P, 4) and conf (N, P, classes)."""
        if len(maps) != len(self.map_shapes):
            raise ShapeError(f"expected {len(self.map_shapes)} detection maps, got {len(maps)}")
        locs, confs = [], []
        for x, shape, ll, cl in zip(maps, self.map_shapes, self.loc_layers, self.conf_layers):
            if tuple(x.shape[1:]) != shape:
                raise ShapeError(f"detection map shape {x.shape[1:]} != {shape}")
            n = x.shape[0]
            loc = conv2d_forward(x, params[f"{ll.name}.w"], params[f"{ll.name}.b"], ll.spec, macs, ll.name)
            conf = conv2d_forward(x, params[f"{cl.name}.w"], params[f"{cl.name}.b"], cl.spec, macs, cl.name)
            locs.append(loc.transpose(0, 2, 3, 1).reshape(n, -1, 4))
            confs.append(conf.transpose(0, 2, 3, 1).reshape(n, -1, self.num_classes))
        return np.concatenate(locs, axis=1), np.concatenate(confs, axis=1)

    def forward(self, detection_taps, gate_features, params, macs=None, cache=None):
        extra, z = self.extra_forward(gate_features, params, macs)
        maps = list(detection_taps) + [extra]
        loc, conf = self.heads_forward(maps, params, macs)
        if cache is not None:
            cache.update(maps=maps, gate_features=gate_features, extra_pre=z)
        return loc, conf

    def backward(self, cache, params, dloc, dconf, grads):
        """Returns (d_detection_taps, d_gate_features)."""
        maps = cache["maps"]
        d_maps = []
        start = 0
        k = self.prior_spec.priors_per_location
        for x, (c, h, w), ll, cl in zip(maps, self.map_shapes, self.loc_layers, self.conf_layers):
            n = x.shape[0]
            stop = start + h * w * k
            gl = dloc[:, start:stop].reshape(n, h, w, 4 * k).transpose(0, 3, 1, 2)
            gc = dconf[:, start:stop].reshape(n, h, w, self.num_classes * k).transpose(0, 3, 1, 2)
            start = stop
            dx = 0
            for layer, g in ((ll, gl), (cl, gc)):
                dxi, dw, db = conv2d_backward(x, params[f"{layer.name}.w"], layer.spec, g)
                grads[f"{layer.name}.w"] = grads.get(f"{layer.name}.w", 0) + dw
                grads[f"{layer.name}.b"] = grads.get(f"{layer.name}.b", 0) + db
                dx = dx + dxi
            d_maps.append(dx)
        dz = activation(self.act)[1](cache["extra_pre"], d_maps[-1])
        dgate, dw, db = conv2d_backward(cache["gate_features"], params["extra.w"], self.extra.spec, dz)
        grads["extra.w"] = grads.get("extra.w", 0) + dw
        grads["extra.b"] = grads.get("extra.b", 0) + db
        return d_maps[:-1], dgate


def detection_head_forward(taps, head_params, head: DetectionHead):
    """Apply the parallel loc/conf convs to already-computed detection maps."""
    return head.heads_forward(taps, head_params)


def nms_indices(boxes, scores, classes, iou_threshold: float, top_k: int) -> list[int]:
    """Greedy class-aware NMS; returns kept indices in descending score order."""
    boxes = np.asarray(boxes, dtype=np.float64).reshape(-1, 4)
    scores = np.asarray(scores, dtype=np.float64)
    classes = np.asarray(classes)
    n = len(scores)
    if n == 0:
        return []
    order = np.lexsort((np.arange(n), -scores))
    boxes, classes = boxes[order], classes[order]
    alive = np.ones(n, dtype=bool)
    keep = []
    for pos in range(n):
        if not alive[pos]:
            continue
        keep.append(int(order[pos]))
        if len(keep) >= top_k:
            break
        rest = np.flatnonzero(alive[pos + 1:]) + pos + 1
        if len(rest) == 0:
            continue
        rest = rest[classes[rest] == classes[pos]]
        if len(rest):
            overlaps = iou_matrix(boxes[pos], boxes[rest])[0]
            alive[rest[overlaps > iou_threshold]] = False
    return keep


def nms(candidates: list[Detection], iou_threshold: float = 0.45, top_k: int = 100) -> list[Detection]:
    if not candidates:
        return []
    keep = nms_indices([d.bbox.as_tuple() for d in candidates], [d.score for d in candidates],
                       [d.class_id for d in candidates], iou_threshold, top_k)
    return [candidates[i] for i in keep]


def postprocess(loc, conf, priors, params: DetectionParams | None = None,
                variances=(0.1, 0.2)) -> list[Detection]:
    """Softmax, per-class thresholding, decoding and class-aware NMS for one image."""
    params = params or DetectionParams()
    probs = softmax(np.asarray(conf))
    prior_idx, class_idx = np.nonzero(probs[:, 1:] >= params.score_threshold)
    if len(prior_idx) == 0:
        return []
    class_idx = class_idx + 1
    # candidates enumerated class-major so the tie-break index is class, then prior
    order = np.lexsort((prior_idx, class_idx))
    prior_idx, class_idx = prior_idx[order], class_idx[order]
    scores = probs[prior_idx, class_idx]
    boxes = decode(np.asarray(loc)[prior_idx], priors[prior_idx], variances)
    keep = nms_indices(boxes, scores, class_idx, params.nms_iou_threshold, params.top_k)
    return [Detection(BBox(*map(float, boxes[i])), int(class_idx[i]), float(scores[i])) for i in keep]

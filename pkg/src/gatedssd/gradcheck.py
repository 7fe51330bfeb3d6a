"""Central finite-difference checks for every layer and loss.

Each check builds a random small instance, takes the analytic gradient from
the hand-written backward pass and compares it with central differences of a
float32 forward pass. The error metric is norm-wise relative error per
gradient tensor, ``||a - n|| / max(||a||, ||n||)``.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from gatedssd import tensor as T
from gatedssd.backbone import BackboneConfig, StageSpec, inverted_residual_layers, stage_backward, stage_forward
from gatedssd.detector import DetectionHead, PriorBoxSpec, build_targets
from gatedssd.gate import GateHead, gate_backward, gate_logits
from gatedssd.losses import (
    LossConfig,
    binary_gate_loss,
    cross_entropy,
    multibox_loss,
    smooth_l1,
    smooth_l1_grad,
    total_loss,
)
from gatedssd.model import GateConfig, GatedSSD, ModelConfig

EPS = 1e-3
TOLERANCE = 1e-3
NORM_FLOOR = 1e-7


@dataclass
class CheckResult:
    check: str
    seed: int
    tensor: str
    rel_error: float

    @property
    def passed(self) -> bool:
        return self.rel_error <= TOLERANCE


def numeric_grad(f, array, eps=EPS, indices=None):
    """Central differences of scalar ``f()`` w.r.t. ``array`` (perturbed in place)."""
    flat = array.reshape(-1)
    idx = range(flat.size) if indices is None else indices
    out = np.zeros(flat.size)
    for i in idx:
        orig = flat[i]
        flat[i] = orig + array.dtype.type(eps)
        hi, x_hi = f(), float(flat[i])
        flat[i] = orig - array.dtype.type(eps)
        lo, x_lo = f(), float(flat[i])
        flat[i] = orig
        out[i] = (hi - lo) / (x_hi - x_lo)
    return out.reshape(array.shape)


def rel_error(analytic, numeric, mask=None) -> float:
    a = np.asarray(analytic, dtype=np.float64).reshape(-1)
    n = np.asarray(numeric, dtype=np.float64).reshape(-1)
    if mask is not None:
        a, n = a[mask], n[mask]
    scale = max(np.linalg.norm(a), np.linalg.norm(n))
    if scale < NORM_FLOOR:
        return 0.0
    return float(np.linalg.norm(a - n) / scale)


# Instance values are drawn with a positive mean. With zero-mean draws a
# summed gradient (bias, 1x1 weight, pooled input) can cancel to near zero by
# chance, and the ~1e-5 absolute noise of a float32 central difference at
# eps = 1e-3 then dominates the relative error.
MEAN_SHIFT = 0.5


def _rand(rng, *shape, scale=1.0):
    return ((rng.standard_normal(shape) + MEAN_SHIFT) * scale).astype(np.float32)


def _projection(rng, shape):
    return rng.uniform(0.5, 1.5, size=shape)


def _projected(fn, proj):
    return lambda: float(np.sum(fn().astype(np.float64) * proj))


def _sample_entries(rng, grad, count):
    """Half the sample from the gradient's support, the rest uniform."""
    support = np.flatnonzero(grad)
    picked = rng.choice(support, min(count // 2, support.size), replace=False) if support.size else []
    rest = np.setdiff1d(np.arange(grad.size), picked)
    picked = np.concatenate([picked, rng.choice(rest, count - len(picked), replace=False)])
    return np.sort(picked.astype(np.int64))


def _compare(name, rng, f, arrays, analytic, max_entries=None):
    out = []
    for key, arr in arrays.items():
        idx = None
        if max_entries is not None and arr.size > max_entries:
            idx = _sample_entries(rng, np.asarray(analytic[key]).reshape(-1), max_entries)
        num = numeric_grad(f, arr, indices=idx)
        mask = None if idx is None else idx
        out.append((key, rel_error(analytic[key], num, mask)))
    return out


def _conv_case(rng, kind):
    n = int(rng.integers(1, 3))
    c = int(rng.integers(1, 9))
    h, w = (int(v) for v in rng.integers(2, 5, size=2))
    if kind == "depthwise":
        spec = T.ConvSpec(c, c * int(rng.integers(1, 3)), 3, int(rng.integers(1, 3)), 1, depthwise=True)
    elif kind == "pointwise":
        spec = T.ConvSpec(c, int(rng.integers(1, 9)), 1, 1, 0)
    else:
        k = int(rng.integers(1, 4))
        spec = T.ConvSpec(c, int(rng.integers(1, 9)), k, int(rng.integers(1, 3)), int(rng.integers(0, 2)))
        if min(h, w) + 2 * spec.padding[0] < k:
            spec = T.ConvSpec(c, spec.out_channels, 1, spec.stride, spec.padding)
    x = _rand(rng, n, c, h, w)
    wt = _rand(rng, *spec.weight_shape, scale=0.5)
    b = _rand(rng, spec.out_channels, scale=0.1)
    out_shape = (n, *spec.output_shape((c, h, w)))
    proj = _projection(rng, out_shape)
    dx, dw, db = T.conv2d_backward(x, wt, spec, proj.astype(np.float32))
    f = _projected(lambda: T.conv2d_forward(x, wt, b, spec), proj)
    return f, {"x": x, "w": wt, "b": b}, {"x": dx, "w": dw, "b": db}


def check_conv(rng):
    return _compare("conv", rng, *_conv_case(rng, "general"))


def check_conv_depthwise(rng):
    return _compare("conv_depthwise", rng, *_conv_case(rng, "depthwise"))


def check_conv_pointwise(rng):
    return _compare("conv_pointwise", rng, *_conv_case(rng, "pointwise"))


def check_dense(rng):
    n, i, o = (int(v) for v in rng.integers(1, 9, size=3))
    x, w, b = _rand(rng, n, i), _rand(rng, o, i), _rand(rng, o, scale=0.1)
    proj = _projection(rng, (n, o))
    dx, dw, db = T.dense_backward(x, w, proj.astype(np.float32))
    f = _projected(lambda: T.dense_forward(x, w, b), proj)
    return _compare("dense", rng, f, {"x": x, "w": w, "b": b}, {"x": dx, "w": dw, "b": db})


def check_global_avg_pool(rng):
    shape = (int(rng.integers(1, 3)), int(rng.integers(1, 9)), *(int(v) for v in rng.integers(1, 5, size=2)))
    x = _rand(rng, *shape)
    proj = _projection(rng, (shape[0], shape[1], 1, 1))
    dx = T.global_avg_pool_backward(x.shape, proj.astype(np.float32))
    f = _projected(lambda: T.global_avg_pool(x), proj)
    return _compare("global_avg_pool", rng, f, {"x": x}, {"x": dx})


def _activation_check(name, fwd, bwd, away_from_zero=False):
    def check(rng):
        x = _rand(rng, 2, 4, 3, 3, scale=2.0)
        if away_from_zero:
            x = (np.sign(x) * (np.abs(x) + 0.05)).astype(np.float32)
        proj = _projection(rng, x.shape)
        dx = bwd(x, proj.astype(np.float32))
        return _compare(name, rng, _projected(lambda: fwd(x), proj), {"x": x}, {"x": dx})
    return check


def check_softmax(rng):
    x = _rand(rng, 4, int(rng.integers(2, 9)), scale=0.5)
    # softmax gradients see only the spread of the projection, so keep it zero-mean
    proj = rng.standard_normal(x.shape)
    dx = T.softmax_backward(T.softmax(x), proj.astype(np.float32))
    return _compare("softmax", rng, _projected(lambda: T.softmax(x), proj), {"x": x}, {"x": dx})


def check_inverted_residual(rng):
    c = int(rng.integers(4, 9))
    stride = int(rng.integers(1, 3))
    out_c = c if rng.random() < 0.5 else int(rng.integers(4, 9))
    h = int(rng.integers(2, 5))
    stage = inverted_residual_layers("blk", c, out_c, int(rng.integers(1, 4)), stride, (h, h))
    params = {}
    for layer in stage.layers:
        fan_in = layer.spec.in_per_group * layer.spec.kernel[0] * layer.spec.kernel[1]
        params[f"{layer.name}.w"] = _rand(rng, *layer.spec.weight_shape, scale=fan_in ** -0.5)
        params[f"{layer.name}.b"] = _rand(rng, layer.spec.out_channels, scale=0.02)
    # Small inputs keep the gradient large relative to float32 output rounding.
    x = _rand(rng, 1, c, h, h, scale=0.25)
    cache = []
    y = stage_forward(stage, x, params, cache=cache)
    proj = _projection(rng, y.shape)
    grads = {}
    dx = stage_backward(cache[0], params, proj.astype(np.float32), grads)
    f = _projected(lambda: stage_forward(stage, x, params), proj)
    return _compare("inverted_residual", rng, f, {"x": x, **params}, {"x": dx, **grads})


def check_gate_head(rng):
    c, g = (int(v) for v in rng.integers(4, 9, size=2))
    head = GateHead(_rand(rng, g, c, 1, 1, scale=c ** -0.5), _rand(rng, g, scale=0.02),
                    _rand(rng, 2, g, scale=1.0), _rand(rng, 2, scale=0.02))
    x = _rand(rng, 2, c, 2, 2, scale=0.25)
    cache = {}
    logits = gate_logits(x, head, cache=cache)
    proj = _projection(rng, logits.shape)
    grads = {}
    dx = gate_backward(cache, head, proj.astype(np.float32), grads)
    f = _projected(lambda: gate_logits(x, head), proj)
    arrays = {"x": x, "gate.conv.w": head.conv_w, "gate.conv.b": head.conv_b,
              "gate.dense.w": head.dense_w, "gate.dense.b": head.dense_b}
    return _compare("gate_head", rng, f, arrays, {"x": dx, **grads})


def check_detection_head(rng):
    c1, c2, cg = (int(v) for v in rng.integers(4, 9, size=3))
    head = DetectionHead([(c1, 4, 4), (c2, 2, 2)], (cg, 2, 2), PriorBoxSpec(), 2,
                         int(rng.integers(4, 9)))
    params = head.init_params(rng)
    for k in params:
        w = params[k]
        fan_in = w[0].size if w.ndim == 4 else 1
        params[k] = _rand(rng, *w.shape, scale=fan_in ** -0.5 if w.ndim == 4 else 0.1)
    taps = [_rand(rng, 1, c1, 4, 4), _rand(rng, 1, c2, 2, 2)]
    gate_x = _rand(rng, 1, cg, 2, 2, scale=0.2)
    cache = {}
    loc, conf = head.forward(taps, gate_x, params, cache=cache)
    pl, pc = _projection(rng, loc.shape), _projection(rng, conf.shape)
    grads = {}
    d_taps, d_gate = head.backward(cache, params, pl.astype(np.float32), pc.astype(np.float32), grads)

    def f():
        lo, co = head.forward(taps, gate_x, params)
        return float(np.sum(lo * pl) + np.sum(co * pc))

    arrays = {"tap0": taps[0], "tap1": taps[1], "gate_x": gate_x, **params}
    analytic = {"tap0": d_taps[0], "tap1": d_taps[1], "gate_x": d_gate, **grads}
    return _compare("detection_head", rng, f, arrays, analytic, max_entries=48)


def check_smooth_l1(rng):
    x = rng.standard_normal(16).astype(np.float32) * 2
    x = np.where(np.abs(np.abs(x) - 1) < 0.01, x * 1.05, x).astype(np.float32)
    f = lambda: float(np.sum(smooth_l1(x)))
    return _compare("smooth_l1", rng, f, {"x": x}, {"x": smooth_l1_grad(x)})


def check_cross_entropy(rng):
    c = int(rng.integers(2, 9))
    x = _rand(rng, c, scale=2.0)
    t = int(rng.integers(0, c))
    g = T.softmax(x.astype(np.float64))
    g[t] -= 1
    return _compare("cross_entropy", rng, lambda: cross_entropy(x, t), {"x": x}, {"x": g})


def _multibox_instance(rng, n_priors=8, n_classes=3, batch=2):
    cfg = LossConfig(alpha=float(rng.uniform(0.5, 2.0)), neg_pos_ratio=2)
    while True:
        conf = _rand(rng, batch, n_priors, n_classes, scale=1.5)
        labels = rng.integers(0, n_classes, size=(batch, n_priors))
        labels[:, rng.integers(0, n_priors)] = 0
        ce = -T.log_softmax(conf.astype(np.float64))[..., 0]
        gaps_ok = True
        for i in range(batch):
            neg = np.sort(ce[i][labels[i] == 0])
            if len(neg) > 1 and np.min(np.diff(neg)) < 5e-3:
                gaps_ok = False
        if gaps_ok:
            break
    targets = _rand(rng, batch, n_priors, 4)
    loc = _rand(rng, batch, n_priors, 4)
    d = loc - targets
    loc = np.where(np.abs(np.abs(d) - 1) < 0.01, loc + 0.05, loc).astype(np.float32)
    return conf, loc, labels, targets, cfg


def check_multibox_loss(rng):
    conf, loc, labels, targets, cfg = _multibox_instance(rng)
    _, dconf, dloc = multibox_loss(conf, loc, labels, targets, cfg, with_grads=True)
    f = lambda: multibox_loss(conf, loc, labels, targets, cfg).l_multibox
    return _compare("multibox_loss", rng, f, {"conf": conf, "loc": loc}, {"conf": dconf, "loc": dloc})


def check_binary_gate_loss(rng):
    logits = _rand(rng, int(rng.integers(1, 5)), 2, scale=2.0)
    labels = rng.integers(0, 2, size=len(logits))
    _, g = binary_gate_loss(logits, labels, with_grads=True)
    f = lambda: binary_gate_loss(logits, labels)
    return _compare("binary_gate_loss", rng, f, {"logits": logits}, {"logits": g})


def check_total_loss(rng):
    conf, loc, labels, targets, cfg = _multibox_instance(rng)
    cfg.beta = float(rng.uniform(0.1, 3.0))
    logits = _rand(rng, conf.shape[0], 2, scale=2.0)
    frame = rng.integers(0, 2, size=conf.shape[0])
    _, dconf, dloc = multibox_loss(conf, loc, labels, targets, cfg, with_grads=True)
    _, dlog = binary_gate_loss(logits, frame, with_grads=True)

    def f():
        mb = multibox_loss(conf, loc, labels, targets, cfg)
        return total_loss(mb, binary_gate_loss(logits, frame), cfg).total

    arrays = {"conf": conf, "loc": loc, "gate_logits": logits}
    return _compare("total_loss", rng, f, arrays, {"conf": dconf, "loc": dloc, "gate_logits": cfg.beta * dlog})


CHECKS = {
    "conv": check_conv,
    "conv_depthwise": check_conv_depthwise,
    "conv_pointwise": check_conv_pointwise,
    "dense": check_dense,
    "global_avg_pool": check_global_avg_pool,
    "relu": _activation_check("relu", T.relu, T.relu_backward, away_from_zero=True),
    "sigmoid": _activation_check("sigmoid", T.sigmoid, T.sigmoid_backward),
    "swish": _activation_check("swish", T.swish, T.swish_backward),
    "softmax": check_softmax,
    "inverted_residual": check_inverted_residual,
    "gate_head": check_gate_head,
    "detection_head": check_detection_head,
    "smooth_l1": check_smooth_l1,
    "cross_entropy": check_cross_entropy,
    "multibox_loss": check_multibox_loss,
    "binary_gate_loss": check_binary_gate_loss,
    "total_loss": check_total_loss,
}


def tiny_model_config() -> ModelConfig:
    """32x32 input with the same stride-32 layout; small enough for exhaustive checks."""
    stages = [StageSpec("conv", 4, 2), StageSpec("inverted_residual", 6, 2, 2),
              StageSpec("inverted_residual", 8, 2, 2), StageSpec("inverted_residual", 8, 2, 2),
              StageSpec("inverted_residual", 12, 2, 2)]
    return ModelConfig(backbone=BackboneConfig(input_size=32, stages=stages),
                       gate=GateConfig(gate_channels=8), extra_channels=8)


def run_gradcheck(seed: int = 0, n_seeds: int = 100, checks=None, progress=None) -> list[CheckResult]:
    results = []
    for name in checks or CHECKS:
        fn = CHECKS[name]
        for i in range(n_seeds):
            rng = np.random.default_rng([seed, i, len(name)])
            for tensor_name, err in fn(rng):
                results.append(CheckResult(name, i, tensor_name, err))
        if progress is not None:
            progress(name, [r for r in results if r.check == name])
    return results

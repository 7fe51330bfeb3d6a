"""Multibox loss, binary gate loss and their weighted combination, with gradients."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from gatedssd.errors import ShapeError
from gatedssd.tensor import log_softmax, softmax


@dataclass
class LossConfig:
    alpha: float = 1.0
    beta: float = 1.0
    neg_pos_ratio: float = 3.0
    hard_negative_mining: bool = True
    match_iou: float = 0.5
    detach_gate: bool = False

    def __post_init__(self):
        if self.alpha < 0 or self.beta < 0:
            raise ValueError("alpha and beta must be >= 0")
        if self.neg_pos_ratio < 1:
            raise ValueError("neg_pos_ratio must be >= 1")


@dataclass
class LossBreakdown:
    l_conf: float = 0.0
    l_loc: float = 0.0
    l_multibox: float = 0.0
    l_binary: float = 0.0
    total: float = 0.0


def smooth_l1(x):
    x = np.asarray(x, dtype=np.float64)
    ax = np.abs(x)
    out = np.where(ax < 1.0, 0.5 * x * x, ax - 0.5)
    return float(out) if out.ndim == 0 else out


def smooth_l1_grad(x):
    x = np.asarray(x, dtype=np.float64)
    return np.where(np.abs(x) < 1.0, x, np.sign(x))


def cross_entropy(logits, target: int) -> float:
    """-log softmax(logits)[target], stabilised by max subtraction."""
    logits = np.asarray(logits, dtype=np.float64)
    if not 0 <= target < logits.shape[-1]:
        raise ShapeError(f"target {target} outside 0..{logits.shape[-1] - 1}")
    return float(-log_softmax(logits)[target])


def _row_ce(logits, targets):
    return -np.take_along_axis(log_softmax(logits), targets[:, None], axis=1)[:, 0]


def _select_negatives(ce, labels, ratio, mining):
    neg = labels == 0
    if not mining:
        return neg
    npos = int((labels > 0).sum())
    quota = int(ratio * npos) if npos else 1
    quota = min(quota, int(neg.sum()))
    chosen = np.zeros_like(neg)
    if quota:
        idx = np.arange(len(ce))
        score = np.where(neg, ce, -np.inf)
        order = np.lexsort((idx, -score))  # hardest first, ties by lower prior index
        chosen[order[:quota]] = True
    return chosen


def multibox_loss(conf, loc, labels, loc_targets, config: LossConfig | None = None,
                  with_grads: bool = False):
    """Confidence + alpha * localization loss over one image or a batch.

    ``conf`` is (P, C) or (N, P, C) logits, ``loc`` (.., P, 4) offsets,
    ``labels`` per-prior classes with 0 for background and ``loc_targets`` the
    encoded ground truth. Both terms are normalised by the batch positive
    count (1 when there are none); negatives are mined per image.
    """
    config = config or LossConfig()
    conf = np.asarray(conf, dtype=np.float64)
    loc = np.asarray(loc, dtype=np.float64)
    labels = np.asarray(labels)
    loc_targets = np.asarray(loc_targets, dtype=np.float64)
    single = conf.ndim == 2
    if single:
        conf, loc, labels, loc_targets = conf[None], loc[None], labels[None], loc_targets[None]
    n, p, _ = conf.shape
    if loc.shape != (n, p, 4) or labels.shape != (n, p) or loc_targets.shape != (n, p, 4):
        raise ShapeError(f"multibox inputs disagree: conf {conf.shape}, loc {loc.shape}, "
                         f"labels {labels.shape}, targets {loc_targets.shape}")
    labels = labels.astype(np.int64)
    norm = max(int((labels > 0).sum()), 1)
    conf_sum = loc_sum = 0.0
    dconf = np.zeros_like(conf) if with_grads else None
    dloc = np.zeros_like(loc) if with_grads else None
    for i in range(n):
        ce = _row_ce(conf[i], labels[i])
        pos = labels[i] > 0
        selected = pos | _select_negatives(ce, labels[i], config.neg_pos_ratio, config.hard_negative_mining)
        conf_sum += ce[selected].sum()
        diff = loc[i][pos] - loc_targets[i][pos]
        loc_sum += smooth_l1(diff).sum() if diff.size else 0.0
        if with_grads:
            g = softmax(conf[i][selected])
            g[np.arange(len(g)), labels[i][selected]] -= 1.0
            dconf[i][selected] = g / norm
            dloc[i][pos] = config.alpha * smooth_l1_grad(diff) / norm
    l_conf, l_loc = float(conf_sum) / norm, float(loc_sum) / norm
    l_mb = l_conf + config.alpha * l_loc
    result = LossBreakdown(l_conf=l_conf, l_loc=l_loc, l_multibox=l_mb, total=l_mb)
    if not with_grads:
        return result
    if single:
        dconf, dloc = dconf[0], dloc[0]
    return result, dconf, dloc


def binary_gate_loss(logits, frame_label, with_grads: bool = False):
    """Mean two-class cross-entropy of the gate logits against object presence."""
    logits = np.asarray(logits, dtype=np.float64)
    single = logits.ndim == 1
    logits2 = logits.reshape(-1, 2) if logits.shape[-1] == 2 else None
    if logits2 is None:
        raise ShapeError(f"gate loss needs 2 logits per frame, got shape {logits.shape}")
    targets = np.atleast_1d(np.asarray(frame_label)).astype(np.int64)
    if len(targets) != len(logits2):
        raise ShapeError("one frame label is needed per logit pair")
    ce = _row_ce(logits2, targets)
    loss = float(ce.mean())
    if not with_grads:
        return loss
    g = softmax(logits2)
    g[np.arange(len(g)), targets] -= 1.0
    g /= len(g)
    return loss, (g[0] if single else g)


def total_loss(multibox: LossBreakdown, l_binary: float, config: LossConfig | None = None) -> LossBreakdown:
    config = config or LossConfig()
    if multibox.l_multibox < 0 or l_binary < 0:
        raise ValueError("loss components must be non-negative")
    return LossBreakdown(
        l_conf=multibox.l_conf,
        l_loc=multibox.l_loc,
        l_multibox=multibox.l_multibox,
        l_binary=float(l_binary),
        total=multibox.l_multibox + config.beta * float(l_binary),
    )

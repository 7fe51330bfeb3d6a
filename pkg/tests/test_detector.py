import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from gatedssd.detector import (
    BBox,
    Detection,
    DetectionHead,
    DetectionParams,
    PriorBoxSpec,
    build_targets,
    center_to_corner,
    decode,
    detection_head_forward,
    encode,
    generate_priors,
    iou,
    iou_matrix,
    match_priors,
    nms,
    nms_indices,
    postprocess,
)
from gatedssd.errors import DegenerateInputError, ShapeError
from gatedssd.tensor import softmax
from oracles import (
    enumerate_priors,
    match_oracle,
    naive_conv,
    nms_oracle,
    postprocess_oracle,
    coverage_iou,
    raster_iou,
)

# ---- priors ----


def test_single_prior_centre():
    spec = PriorBoxSpec(scales=[0.5], aspect_ratios=[1.0], extra_scale=False, feature_sizes=[1])
    np.testing.assert_array_equal(generate_priors(spec), [[0.5, 0.5, 0.5, 0.5]])


def test_prior_count():
    spec = PriorBoxSpec(scales=[0.3], feature_sizes=[2])
    assert len(generate_priors(spec)) == 16 == spec.count()


def test_priors_match_enumeration():
    spec = PriorBoxSpec(scales=[0.2, 0.5], feature_sizes=[3, 1])
    ref = enumerate_priors([3, 1], [0.2, 0.5], [1.0, 2.0, 0.5], 1.0)
    np.testing.assert_allclose(generate_priors(spec), ref, atol=1e-12, rtol=0)


def test_prior_frozen_values():
    spec = PriorBoxSpec(scales=[0.2, 0.5], feature_sizes=[3, 1])
    p = generate_priors(spec)
    assert len(p) == 40
    np.testing.assert_allclose(p[0], [1 / 6, 1 / 6, 0.2, 0.2])
    np.testing.assert_allclose(p[3], [1 / 6, 1 / 6, 0.31622776601683794, 0.31622776601683794])
    np.testing.assert_allclose(p[37], [0.5, 0.5, 0.7071067811865476, 0.35355339059327373])
    np.testing.assert_allclose(p[39], [0.5, 0.5, 0.7071067811865476, 0.7071067811865476])


def test_prior_spec_validation():
    with pytest.raises(ValueError):
        PriorBoxSpec(scales=[0.5, 0.2])
    with pytest.raises(ValueError):
        PriorBoxSpec(aspect_ratios=[0.0])
    with pytest.raises(ShapeError):
        PriorBoxSpec().with_feature_sizes([3, 1])


# ---- IoU ----


def test_iou_examples():
    a = BBox(0.1, 0.2, 0.4, 0.6)
    assert iou(a, a) == 1.0
    assert iou(a, BBox(0.5, 0.5, 0.9, 0.9)) == 0.0
    assert iou(BBox(0, 0, 0.2, 0.2), BBox(0.1, 0.1, 0.3, 0.3)) == pytest.approx(1 / 7, abs=1e-12)
    assert raster_iou((0, 0, 0.2, 0.2), (0.1, 0.1, 0.3, 0.3)) == pytest.approx(1 / 7, abs=2e-3)


def test_iou_matches_raster():
    rng = np.random.default_rng(0)
    for _ in range(20):
        a = np.sort(rng.uniform(0, 1, (2, 2)), axis=0).T.ravel()[[0, 2, 1, 3]]
        b = np.sort(rng.uniform(0, 1, (2, 2)), axis=0).T.ravel()[[0, 2, 1, 3]]
        assert iou(BBox(*a), BBox(*b)) == pytest.approx(coverage_iou(a, b), abs=2e-3)


box_st = st.tuples(st.floats(0, 0.9), st.floats(0, 0.9), st.floats(0.01, 0.5), st.floats(0.01, 0.5)).map(
    lambda t: (t[0], t[1], t[0] + t[2], t[1] + t[3]))


@settings(max_examples=100, deadline=None)
@given(box_st, box_st)
def test_iou_properties(a, b):
    v = iou(BBox(*a), BBox(*b))
    assert 0.0 <= v <= 1.0
    assert v == pytest.approx(iou(BBox(*b), BBox(*a)))


# ---- encode / decode ----


def test_encode_identity_and_zero_decode():
    prior = np.array([0.4, 0.5, 0.2, 0.3])
    np.testing.assert_allclose(encode(center_to_corner(prior), prior), 0, atol=1e-12)
    np.testing.assert_allclose(decode(np.zeros(4), prior), center_to_corner(prior))


def test_encode_formula():
    rng = np.random.default_rng(1)
    prior = np.array([0.45, 0.55, 0.3, 0.2])
    x0, y0 = rng.uniform(0.1, 0.4, 2)
    gt = np.array([x0, y0, x0 + 0.25, y0 + 0.35])
    gcx, gcy, gw, gh = (x0 + x0 + 0.25) / 2, (y0 + y0 + 0.35) / 2, 0.25, 0.35
    expect = [(gcx - 0.45) / (0.1 * 0.3), (gcy - 0.55) / (0.1 * 0.2),
              math.log(gw / 0.3) / 0.2, math.log(gh / 0.2) / 0.2]
    np.testing.assert_allclose(encode(gt, prior), expect, atol=1e-6, rtol=0)


def test_encode_degenerate():
    with pytest.raises(DegenerateInputError):
        encode([0.2, 0.2, 0.2, 0.5], [0.5, 0.5, 0.2, 0.2])


def test_decode_clamps():
    box = decode(np.array([5.0, -5.0, 3.0, 3.0]), np.array([0.9, 0.1, 0.3, 0.3]))
    assert box.min() >= 0.0 and box.max() <= 1.0
    assert box[2] == 1.0 and box[1] == 0.0
    raw = decode(np.array([5.0, -5.0, 3.0, 3.0]), np.array([0.9, 0.1, 0.3, 0.3]), clamp=False)
    np.testing.assert_allclose(box, np.clip(raw, 0, 1))


@settings(max_examples=100, deadline=None)
@given(box_st, box_st)
def test_encode_decode_round_trip(gt, prior_corner):
    prior = np.array([(prior_corner[0] + prior_corner[2]) / 2, (prior_corner[1] + prior_corner[3]) / 2,
                      prior_corner[2] - prior_corner[0], prior_corner[3] - prior_corner[1]])
    back = decode(encode(np.array(gt), prior), prior, clamp=False)
    np.testing.assert_allclose(back, gt, atol=1e-9)


# ---- matching ----


def test_match_single_exact():
    priors = np.array([[0.25, 0.25, 0.2, 0.2], [0.75, 0.75, 0.2, 0.2], [0.25, 0.75, 0.2, 0.2]])
    m = match_priors(center_to_corner(priors[1:2]), priors)
    assert list(m) == [-1, 0, -1]
    assert list(match_priors(np.zeros((0, 4)), priors)) == [-1, -1, -1]
    with pytest.raises(ShapeError):
        match_priors(np.zeros((0, 4)), np.zeros((0, 4)))


def test_match_against_exhaustive_oracle():
    rng = np.random.default_rng(2)
    priors = generate_priors(PriorBoxSpec(scales=[0.2, 0.5], feature_sizes=[3, 1]))
    corners = center_to_corner(priors)
    for _ in range(200):
        n = int(rng.integers(0, 5))
        xy = rng.uniform(0, 0.7, (n, 2))
        wh = rng.uniform(0.05, 0.5, (n, 2))
        gts = np.concatenate([xy, np.minimum(xy + wh, 1.0)], axis=1)
        got = match_priors(gts, priors, 0.5)
        assert list(got) == match_oracle(gts.tolist(), corners.tolist(), 0.5)


def test_build_targets():
    priors = np.array([[0.25, 0.25, 0.2, 0.2], [0.75, 0.75, 0.2, 0.2]])
    gt = np.array([[0.64, 0.66, 0.86, 0.84]])
    labels, targets = build_targets(gt, [1], priors)
    assert list(labels) == [0, 1]
    np.testing.assert_allclose(targets[1], encode(gt[0], priors[1]), atol=1e-6)
    assert not targets[0].any()


# ---- head ----


def _small_head():
    return DetectionHead([(4, 4, 4), (5, 2, 2)], (6, 2, 2), PriorBoxSpec(), num_classes=3, extra_channels=3)


def test_head_zero_weights():
    head = _small_head()
    rng = np.random.default_rng(3)
    params = {k: np.zeros_like(v) for k, v in head.init_params(rng).items()}
    taps = [rng.standard_normal((1, 4, 4, 4)).astype(np.float32), rng.standard_normal((1, 5, 2, 2)).astype(np.float32)]
    loc, conf = head.forward(taps, rng.standard_normal((1, 6, 2, 2)).astype(np.float32), params)
    assert loc.shape == (1, (16 + 4 + 1) * 4, 4) and not loc.any()
    np.testing.assert_allclose(softmax(conf), 1 / 3)


def test_head_matches_conv_and_flatten_oracle():
    head = _small_head()
    rng = np.random.default_rng(4)
    params = {k: rng.standard_normal(v.shape).astype(np.float32) for k, v in head.init_params(rng).items()}
    maps = [rng.standard_normal((2, c, h, w)).astype(np.float32) for c, h, w in head.map_shapes]
    loc, conf = detection_head_forward(maps, params, head)
    k = head.prior_spec.priors_per_location
    exp_loc, exp_conf = [], []
    for m, x in enumerate(maps):
        lo = naive_conv(x, params[f"head{m}.loc.w"], params[f"head{m}.loc.b"], 1, 1)
        co = naive_conv(x, params[f"head{m}.conf.w"], params[f"head{m}.conf.b"], 1, 1)
        for i in range(x.shape[2]):
            for j in range(x.shape[3]):
                for a in range(k):
                    exp_loc.append(lo[:, 4 * a:4 * a + 4, i, j])
                    exp_conf.append(co[:, 3 * a:3 * a + 3, i, j])
    np.testing.assert_allclose(loc, np.stack(exp_loc, axis=1), atol=1e-4, rtol=1e-5)
    np.testing.assert_allclose(conf, np.stack(exp_conf, axis=1), atol=1e-4, rtol=1e-5)
    assert loc.shape[1] == len(head.priors)


def test_head_channel_mismatch():
    head = _small_head()
    params = head.init_params(np.random.default_rng(0))
    with pytest.raises(ShapeError):
        head.heads_forward([np.zeros((1, 3, 4, 4), np.float32), np.zeros((1, 5, 2, 2), np.float32),
                            np.zeros((1, 3, 1, 1), np.float32)], params)


def test_default_model_prior_count():
    from gatedssd.model import GatedSSD, ModelConfig
    assert len(GatedSSD(ModelConfig()).priors) == 736


# ---- NMS ----


def _random_candidates(rng, n, n_classes=3):
    xy = rng.uniform(0, 0.8, (n, 2))
    wh = rng.uniform(0.02, 0.4, (n, 2))
    boxes = np.concatenate([xy, np.minimum(xy + wh, 1.0)], axis=1)
    scores = np.round(rng.uniform(0, 1, n), 2)  # coarse scores force ties
    classes = rng.integers(1, n_classes, n)
    return boxes, scores, classes


def test_nms_trivial():
    assert nms([]) == []
    d = Detection(BBox(0.1, 0.1, 0.2, 0.2), 1, 0.9)
    assert nms([d]) == [d]


def test_nms_matches_quadratic_reference():
    rng = np.random.default_rng(5)
    for trial in range(200):
        n = int(rng.integers(1, 201))
        boxes, scores, classes = _random_candidates(rng, n)
        thr = float(rng.uniform(0.2, 0.7))
        top_k = int(rng.integers(1, 60))
        got = nms_indices(boxes, scores, classes, thr, top_k)
        assert got == nms_oracle(boxes.tolist(), scores.tolist(), classes.tolist(), thr, top_k)


def test_nms_class_aware():
    b = [BBox(0.1, 0.1, 0.5, 0.5), BBox(0.1, 0.1, 0.5, 0.5)]
    same = nms([Detection(b[0], 1, 0.9), Detection(b[1], 1, 0.8)])
    diff = nms([Detection(b[0], 1, 0.9), Detection(b[1], 2, 0.8)])
    assert len(same) == 1 and len(diff) == 2


# ---- postprocess ----


def test_postprocess_all_background():
    priors = generate_priors(PriorBoxSpec(scales=[0.3], feature_sizes=[2]))
    conf = np.zeros((len(priors), 2))
    conf[:, 0] = 20
    assert postprocess(np.zeros((len(priors), 4)), conf, priors) == []


def test_postprocess_single_detection():
    priors = generate_priors(PriorBoxSpec(scales=[0.3], feature_sizes=[2]))
    conf = np.zeros((len(priors), 2))
    conf[:, 0] = 20
    conf[5] = [0, 20]
    dets = postprocess(np.zeros((len(priors), 4)), conf, priors)
    assert len(dets) == 1 and dets[0].class_id == 1
    np.testing.assert_allclose(dets[0].bbox.as_tuple(), center_to_corner(priors[5]))


def test_postprocess_matches_staged_oracle():
    rng = np.random.default_rng(6)
    priors = generate_priors(PriorBoxSpec(scales=[0.2, 0.5], feature_sizes=[3, 1]))
    for _ in range(30):
        loc = rng.standard_normal((len(priors), 4)).astype(np.float32)
        conf = (rng.standard_normal((len(priors), 3)) * 2).astype(np.float32)
        params = DetectionParams(0.3, 0.45, 10)
        got = postprocess(loc, conf, priors, params)
        ref = postprocess_oracle(loc, conf, priors, 0.3, 0.45, 10)
        assert [d.class_id for d in got] == [r[0] for r in ref]
        np.testing.assert_allclose([d.score for d in got], [r[1] for r in ref], rtol=1e-6)
        if got:
            np.testing.assert_allclose([d.bbox.as_tuple() for d in got], [r[2] for r in ref], atol=1e-9)


def test_iou_matrix_shapes():
    a = np.array([[0, 0, 0.5, 0.5]])
    b = np.array([[0, 0, 0.5, 0.5], [0.5, 0.5, 1, 1]])
    np.testing.assert_allclose(iou_matrix(a, b), [[1.0, 0.0]])

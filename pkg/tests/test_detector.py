import math

import numpy as np
import pytest

from ssod import autograd as ag
from ssod import boxes as bx
from ssod import checkpoint as ckp
from ssod import detector as det
from ssod.scenes import GroundTruth

from conftest import make_params


def _zero(params, prefix):
    for k, v in params.items():
        if k.startswith(prefix):
            v.data = np.zeros_like(v.data)


# ---------------------------------------------------------------------------
# backbone


def test_backbone_zero_image_zero_bias(small_cfg):
    p = make_params(small_cfg)
    out = det.backbone_forward(np.zeros((3, 16, 16)), p, small_cfg)
    assert out.shape == (4, 4, 4)
    assert np.array_equal(out.data, np.zeros((4, 4, 4)))


def test_backbone_shape_default():
    cfg = det.DetectorConfig()
    p = make_params(cfg)
    out = det.backbone_forward(np.random.default_rng(0).uniform(size=(3, 64, 64)), p, cfg)
    assert out.shape == (32, 16, 16)


def test_backbone_rejects_indivisible_size(small_cfg):
    with pytest.raises(ValueError, match="divisible"):
        det.backbone_forward(np.zeros((3, 18, 16)), make_params(small_cfg), small_cfg)


def test_backbone_gradient(small_cfg, rng):
    p = make_params(small_cfg)
    for v in det.group(p, "backbone").values():
        v.data = v.data + rng.normal(0, 0.05, size=v.shape)
    img = rng.uniform(size=(3, 16, 16))
    w = rng.normal(size=(4, 4, 4))
    params = list(det.group(p, "backbone").values())
    rep = ag.grad_check(lambda: ag.sum(det.backbone_forward(img, p, small_cfg) * w), params)
    assert rep.passed, rep.per_param


# ---------------------------------------------------------------------------
# rpn and proposals


def test_zero_rpn_head_proposes_first_anchors(small_cfg, rng):
    p = make_params(small_cfg)
    _zero(p, "rpn.obj")
    _zero(p, "rpn.delta")
    fmap = det.backbone_forward(rng.uniform(size=(3, 32, 32)), p, small_cfg)
    logits, deltas = det.rpn_forward(fmap, p, small_cfg)
    assert np.all(logits.data == 0)
    anchors = det.anchors_for(small_cfg, 32, 32)
    props = det.propose(logits, deltas, anchors, 5, 32, 32)
    assert np.all(props.objectness == 0.5)
    np.testing.assert_array_equal(props.boxes, bx.clip(anchors[:5], 32, 32, min_size=1.0))


def test_zero_deltas_give_anchors():
    anchors = bx.anchor_grid(4, 4, 4, (8.0,))
    inside = anchors[5:7]
    props = det.propose(np.array([3.0, 2.0]), np.zeros((2, 4)), inside, 2, 16, 16)
    np.testing.assert_array_equal(props.boxes, inside)


def test_proposals_never_empty_and_clipped(rng):
    anchors = bx.anchor_grid(4, 4, 4, (12.0, 20.0))
    z = rng.normal(size=len(anchors)) - 20.0
    props = det.propose(z, rng.normal(size=(len(anchors), 4)), anchors, 7, 16, 16)
    assert len(props) == 7
    b = props.boxes
    assert np.all(b[:, :2] >= 0) and np.all(b[:, 0] + b[:, 2] <= 16 + 1e-12)
    assert np.all(b[:, 2:] > 0) and np.all((props.objectness >= 0) & (props.objectness <= 1))


def _rpn_oracle(logits, deltas, anchors, gts, pos_iou=0.7, neg_iou=0.3):
    """Loop-by-loop reference for the RPN loss with every labeled anchor used."""
    def iou1(a, b):
        ax1, ay1, ax2, ay2 = a[0], a[1], a[0] + a[2], a[1] + a[3]
        bx1, by1, bx2, by2 = b[0], b[1], b[0] + b[2], b[1] + b[3]
        iw = max(0.0, min(ax2, bx2) - max(ax1, bx1))
        ih = max(0.0, min(ay2, by2) - max(ay1, by1))
        inter = iw * ih
        return inter / (a[2] * a[3] + b[2] * b[3] - inter)

    A, G = len(anchors), len(gts)
    ov = [[iou1(anchors[i], gts[g]) for g in range(G)] for i in range(A)]
    label, match = [], []
    for i in range(A):
        best = max(range(G), key=lambda g: (ov[i][g], -g))
        match.append(best)
        label.append(1 if ov[i][best] >= pos_iou else (0 if ov[i][best] <= neg_iou else -1))
    for g in range(G):
        top = max(ov[i][g] for i in range(A))
        if top > 0:
            for i in range(A):
                if ov[i][g] == top:
                    label[i] = 1
                    match[i] = g
    used = [i for i in range(A) if label[i] >= 0]
    total = 0.0
    for i in used:
        z = logits[i]
        y = 1.0 if label[i] == 1 else 0.0
        total += max(z, 0.0) + math.log1p(math.exp(-abs(z))) - y * z
        if label[i] == 1:
            a, g = anchors[i], gts[match[i]]
            t = [((g[0] + g[2] / 2) - (a[0] + a[2] / 2)) / a[2],
                 ((g[1] + g[3] / 2) - (a[1] + a[3] / 2)) / a[3],
                 math.log(g[2] / a[2]), math.log(g[3] / a[3])]
            for d, tt in zip(deltas[i], t):
                r = abs(d - tt)
                total += 0.5 * r * r if r < 1.0 else r - 0.5
    return total / len(used)


def test_rpn_loss_matches_naive_oracle(small_cfg):
    rng = np.random.default_rng(7)
    anchors = bx.anchor_grid(8, 8, 4, small_cfg.anchor_scales)
    for trial in range(5):
        n = int(rng.integers(1, 4))
        xy = rng.uniform(0, 16, size=(n, 2))
        wh = rng.uniform(8, 16, size=(n, 2))
        truth = GroundTruth(np.hstack([xy, wh]), rng.integers(0, 3, size=n))
        z = rng.normal(size=len(anchors)) * 2
        d = rng.normal(size=(len(anchors), 4)) * 0.7
        got = det.rpn_loss(ag.tensor(z), ag.tensor(d), anchors, truth, small_cfg).item()
        want = _rpn_oracle(z, d, anchors, truth.boxes)
        assert abs(got - want) < 1e-9, trial


def _rpn_setup(small_cfg):
    anchors = bx.anchor_grid(8, 8, 4, small_cfg.anchor_scales)
    truth = GroundTruth(np.array([[6.0, 6.0, 12.0, 12.0], [14.0, 3.0, 16.0, 20.0]]), np.array([0, 2]))
    labels, matched = det.anchor_labels(anchors, truth.boxes, 0.7, 0.3)
    targets = bx.encode(truth.boxes[matched], anchors)
    return anchors, truth, labels, targets


def test_rpn_loss_perfect_prediction(small_cfg):
    anchors, truth, labels, targets = _rpn_setup(small_cfg)
    z = np.where(labels == 1, 40.0, -40.0)
    loss = det.rpn_loss(ag.tensor(z), ag.tensor(targets), anchors, truth, small_cfg)
    assert loss.item() < 1e-6


def test_rpn_loss_uniform_objectness(small_cfg):
    anchors, truth, labels, targets = _rpn_setup(small_cfg)
    loss = det.rpn_loss(ag.tensor(np.zeros(len(anchors))), ag.tensor(targets), anchors, truth,
                        small_cfg)
    assert abs(loss.item() - math.log(2)) < 1e-12


def test_rpn_loss_requires_truth(small_cfg):
    anchors = bx.anchor_grid(2, 2, 4, (8.0,))
    with pytest.raises(ValueError):
        det.rpn_loss(ag.tensor(np.zeros(4)), ag.tensor(np.zeros((4, 4))), anchors, None, small_cfg)


def test_anchor_labels_argmax_rule():
    anchors = np.array([[0.0, 0, 10, 10], [20.0, 20, 10, 10], [40.0, 40, 4, 4]])
    gt = np.array([[2.0, 2, 10, 10]])
    labels, matched = det.anchor_labels(anchors, gt, 0.7, 0.3)
    # IoU of anchor 0 is 64/136 < 0.7 but it is the best anchor for the GT
    assert labels.tolist() == [1, 0, 0] and matched[0] == 0


def test_sample_anchors_respects_budget(rng):
    labels = np.array([1] * 100 + [0] * 400 + [-1] * 50)
    idx = det.sample_anchors(labels, rng, 128, 0.5)
    assert len(idx) == 128 and np.sum(labels[idx] == 1) == 64
    assert np.all(labels[idx] >= 0) and len(np.unique(idx)) == 128
    everything = det.sample_anchors(labels, None, 128, 0.5)
    assert len(everything) == 500


def test_rpn_loss_gradient(small_cfg, rng):
    p = make_params(small_cfg)
    img = rng.uniform(size=(3, 16, 16))
    truth = GroundTruth(np.array([[3.0, 2.0, 9.0, 10.0]]), np.array([1]))
    anchors = det.anchors_for(small_cfg, 16, 16)
    for v in det.group(p, "rpn").values():
        v.data = v.data + rng.normal(0, 0.1, size=v.shape)

    def f():
        fmap = det.backbone_forward(img, p, small_cfg)
        z, d = det.rpn_forward(fmap, p, small_cfg)
        return det.rpn_loss(z, d, anchors, truth, small_cfg)

    rep = ag.grad_check(f, list(det.group(p, "rpn").values()) + [p["backbone.conv3.w"]])
    assert rep.passed, rep.per_param


# ---------------------------------------------------------------------------
# roi align


def test_roi_align_constant_map():
    fmap = ag.tensor(np.full((2, 8, 8), 3.25))
    out = det.roi_align(fmap, [[3.0, 5.0, 11.0, 7.0], [0.0, 0.0, 32.0, 32.0]], 4, 4)
    assert out.shape == (2, 2, 4, 4)
    assert np.all(out.data == 3.25)


def test_roi_align_ramp_cell_means():
    yy, xx = np.mgrid[0:8, 0:8].astype(np.float64)
    fmap = ag.tensor(np.stack([xx, 10 * yy]))
    # pixels 6..22 x 10..26 map to feature cells 1..5 x 2..6
    out = det.roi_align(fmap, [[6.0, 10.0, 16.0, 16.0]], 4, 4).data[0]
    np.testing.assert_allclose(out[0], np.tile([1.5, 2.5, 3.5, 4.5], (4, 1)), atol=1e-12)
    np.testing.assert_allclose(out[1], np.tile([[25.0], [35.0], [45.0], [55.0]], (1, 4)), atol=1e-12)


def test_roi_align_flip_mirror(rng):
    f = rng.normal(size=(3, 6, 6))
    box = np.array([[2.5, 1.0, 13.0, 9.5], [0.0, 4.0, 24.0, 20.0]])
    a = det.roi_align(ag.tensor(f), box, 4, 4).data
    b = det.roi_align(ag.tensor(f[:, :, ::-1].copy()), bx.flip(box, 24), 4, 4).data
    np.testing.assert_allclose(b, a[:, :, :, ::-1], atol=1e-12)


def test_roi_align_gradient(rng):
    f = ag.parameter(rng.normal(size=(2, 5, 5)))
    box = [[1.0, 2.0, 9.0, 11.0], [4.0, 0.0, 15.0, 14.0]]
    w = rng.normal(size=(2, 2, 3, 3))
    rep = ag.grad_check(lambda: ag.sum(det.roi_align(f, box, 3, 4) * w), [f])
    assert rep.passed


def test_roi_align_degenerate_box():
    with pytest.raises(ValueError, match="degenerate"):
        det.roi_align(ag.tensor(np.ones((1, 4, 4))), [[1.0, 1.0, 0.5, 0.5]], 2, 4)


# ---------------------------------------------------------------------------
# rcnn head


def test_rcnn_zero_weights_uniform(small_cfg):
    p = make_params(small_cfg)
    for k in ("rcnn", "cls", "reg"):
        _zero(p, k)
    head = det.rcnn_forward(ag.tensor(np.ones((3, 4, 4, 4))), p, small_cfg)
    np.testing.assert_allclose(head.probs.data, 0.25, atol=1e-15)
    assert head.features.shape == (3, 8) and head.deltas.shape == (3, 12)


def test_rcnn_deterministic_and_simplex(small_cfg, rng):
    p = make_params(small_cfg)
    x = ag.tensor(rng.normal(size=(5, 4, 4, 4)))
    a, b = det.rcnn_forward(x, p, small_cfg), det.rcnn_forward(x, p, small_cfg)
    assert np.array_equal(a.probs.data, b.probs.data) and np.array_equal(a.deltas.data, b.deltas.data)
    assert np.all(np.abs(a.probs.data.sum(axis=1) - 1) <= 1e-9)


def test_rcnn_shape_mismatch(small_cfg):
    with pytest.raises(ValueError):
        det.rcnn_forward(ag.tensor(np.ones((2, 4, 3, 3))), make_params(small_cfg), small_cfg)


def test_rcnn_gradient_all_groups(small_cfg, rng):
    p = make_params(small_cfg)
    for k in ("rcnn.fc1.b", "rcnn.fc2.b", "cls.b", "reg.b"):
        p[k].data = rng.normal(0, 0.1, size=p[k].shape)
    x = rng.normal(size=(3, 4, 4, 4))
    wc, wr = rng.normal(size=(3, 4)), rng.normal(size=(3, 12))

    def f():
        h = det.rcnn_forward(ag.tensor(x), p, small_cfg)
        return ag.sum(h.probs * wc) + ag.sum(h.deltas * wr)

    params = [v for k, v in p.items() if k.split(".")[0] in ("rcnn", "cls", "reg")]
    assert ag.grad_check(f, params).passed


def test_rcnn_loss_uniform_is_log4(small_cfg):
    N = 5
    head = det.HeadOutputs(ag.tensor(np.zeros((N, 8))), ag.tensor(np.zeros((N, 4))),
                           ag.tensor(np.full((N, 4), 0.25)), ag.tensor(np.zeros((N, 12))))
    boxes = np.array([[0.0, 0, 10, 10]] * N)
    truth = GroundTruth(np.array([[30.0, 30, 10, 10]]), np.array([1]))
    cls_term, reg_term = det.rcnn_loss(head, boxes, truth, small_cfg)
    assert abs(cls_term.item() - math.log(4)) < 1e-12 and reg_term.item() == 0.0


def test_proposal_targets_labels(small_cfg):
    truth = GroundTruth(np.array([[0.0, 0, 10, 10], [20.0, 20, 10, 10]]), np.array([2, 0]))
    boxes = np.array([[0.0, 0, 10, 10], [21.0, 21, 10, 10], [40.0, 0, 5, 5]])
    labels, matched, best = det.proposal_targets(boxes, truth, small_cfg)
    assert labels.tolist() == [3, 1, 0]
    assert matched[:2].tolist() == [0, 1] and best[0] == 1.0


def test_class_deltas_selects_block(rng):
    d = ag.tensor(rng.normal(size=(2, 12)))
    out = det.class_deltas(d, [2, 0]).data
    np.testing.assert_array_equal(out, np.stack([d.data[0, 8:12], d.data[1, 0:4]]))
    d3 = ag.tensor(rng.normal(size=(2, 3, 12)))
    out3 = det.class_deltas(d3, [1, 2]).data
    np.testing.assert_array_equal(out3[1], d3.data[1, :, 8:12])


# ---------------------------------------------------------------------------
# inference


def test_detect_threshold_above_one_empty(small_cfg, rng):
    p = make_params(small_cfg)
    assert det.detect(rng.uniform(size=(3, 16, 16)), p, small_cfg, score_thresh=1.0 + 1e-9) == []


def test_detect_zero_regression_returns_proposals(small_cfg, rng):
    p = make_params(small_cfg)
    _zero(p, "reg")
    img = rng.uniform(size=(3, 32, 32))
    b, s, c = det.detect_arrays(img, p, small_cfg, 0.0, 1.0)
    fmap = det.backbone_forward(img, det.frozen(p), small_cfg)
    z, d = det.rpn_forward(fmap, det.frozen(p), small_cfg)
    props = det.propose(z, d, det.anchors_for(small_cfg, 32, 32), small_cfg.top_n_test, 32, 32)
    assert len(b) > 0
    for box in b:
        assert np.min(np.abs(props.boxes - box).max(axis=1)) < 1e-9
    assert np.all(np.diff(s) <= 0) and np.all((s >= 0) & (s <= 1))


def test_detect_boxes_in_image_and_nms(small_cfg, rng):
    p = make_params(small_cfg)
    dets = det.detect(rng.uniform(size=(3, 32, 32)), p, small_cfg, 0.0, 0.5)
    for d in dets:
        x, y, w, h = d.box
        assert x >= 0 and y >= 0 and x + w <= 32 + 1e-9 and y + h <= 32 + 1e-9
    for i, a in enumerate(dets):
        for b in dets[i + 1:]:
            if a.class_id == b.class_id:
                assert bx.iou(a.box, b.box) <= 0.5 + 1e-12


# ---------------------------------------------------------------------------
# checkpoints


def test_checkpoint_round_trip(tmp_path, small_cfg):
    p = {k: v.data for k, v in make_params(small_cfg).items()}
    meta = {"rng": np.random.default_rng(3).bit_generator.state, "note": "x"}
    path = tmp_path / "c.bin"
    ckp.save(str(path), p, meta)
    back, meta2 = ckp.load(str(path))
    assert list(back) == list(p) and meta2 == json_round(meta)
    for k in p:
        assert back[k].tobytes() == p[k].tobytes() and back[k].shape == p[k].shape
    assert ckp.to_bytes(back, meta2) == path.read_bytes()
    with pytest.raises(ValueError):
        ckp.from_bytes(b"garbage-bytes-here")


def json_round(obj):
    import json
    return json.loads(json.dumps(obj))


def test_config_round_trip():
    cfg = det.DetectorConfig(top_n_train=10)
    assert det.DetectorConfig.from_dict(cfg.to_dict()) == cfg
    with pytest.raises(ValueError):
        det.DetectorConfig.from_dict({"nope": 1})

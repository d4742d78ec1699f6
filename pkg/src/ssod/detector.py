"""A miniature two-stage detector: conv backbone, anchor RPN, RoIAlign, R-CNN heads."""

from __future__ import annotations

from dataclasses import asdict, dataclass
from typing import Dict, List, Optional, Tuple

import numpy as np

from . import autograd as ag
from . import boxes as bx
from .autograd import Tensor

Params = Dict[str, Tensor]

GROUPS = ("backbone", "rpn", "rcnn", "cls", "reg")


@dataclass(frozen=True)
class DetectorConfig:
    num_classes: int = 3
    channels: Tuple[int, ...] = (16, 32, 32)
    strides: Tuple[int, ...] = (2, 2, 1)
    anchor_scales: Tuple[float, ...] = (12.0, 20.0, 32.0)
    rpn_hidden: int = 32
    roi_size: int = 4
    fc_dim: int = 128
    top_n_train: int = 32
    top_n_test: int = 64
    rpn_batch: int = 128
    rpn_pos_fraction: float = 0.5
    rpn_pos_iou: float = 0.7
    rpn_neg_iou: float = 0.3
    rcnn_pos_iou: float = 0.5
    rcnn_reg_weights: Tuple[float, ...] = (10.0, 10.0, 5.0, 5.0)
    add_gt_proposals: bool = True
    detections_per_image: int = 100

    @property
    def stride(self) -> int:
        return int(np.prod(self.strides))

    @property
    def num_anchors(self) -> int:
        return len(self.anchor_scales)

    def to_dict(self) -> dict:
        d = asdict(self)
        return {k: list(v) if isinstance(v, tuple) else v for k, v in d.items()}

    @classmethod
    def from_dict(cls, d: dict) -> "DetectorConfig":
        extra = set(d) - set(cls.__dataclass_fields__)
        if extra:
            raise ValueError(f"unknown detector keys {sorted(extra)}")
        return cls(**{k: tuple(v) if isinstance(v, list) else v for k, v in d.items()})


@dataclass
class ProposalSet:
    boxes: np.ndarray
    objectness: np.ndarray
    image_id: int = -1

    def __len__(self):
        return len(self.boxes)


@dataclass
class HeadOutputs:
    features: Tensor
    logits: Tensor
    probs: Tensor
    deltas: Tensor


@dataclass
class Detection:
    box: Tuple[float, float, float, float]
    class_id: int
    score: float


# ---------------------------------------------------------------------------
# parameters


def _he(rng, shape, fan_in):
    return rng.normal(0.0, np.sqrt(2.0 / fan_in), size=shape)


def init_detector_params(cfg: DetectorConfig, rng: np.random.Generator) -> Params:
    p: Params = {}
    c_in = 3
    for i, c in enumerate(cfg.channels, start=1):
        p[f"backbone.conv{i}.w"] = ag.parameter(_he(rng, (c, c_in, 3, 3), c_in * 9))
        p[f"backbone.conv{i}.b"] = ag.parameter(np.zeros(c))
        c_in = c
    A, cb = cfg.num_anchors, cfg.channels[-1]
    p["rpn.conv.w"] = ag.parameter(_he(rng, (cfg.rpn_hidden, cb, 3, 3), cb * 9))
    p["rpn.conv.b"] = ag.parameter(np.zeros(cfg.rpn_hidden))
    p["rpn.obj.w"] = ag.parameter(rng.normal(0.0, 0.01, size=(A, cfg.rpn_hidden, 1, 1)))
    p["rpn.obj.b"] = ag.parameter(np.zeros(A))
    p["rpn.delta.w"] = ag.parameter(rng.normal(0.0, 0.01, size=(4 * A, cfg.rpn_hidden, 1, 1)))
    p["rpn.delta.b"] = ag.parameter(np.zeros(4 * A))
    d_in = cb * cfg.roi_size ** 2
    p["rcnn.fc1.w"] = ag.parameter(_he(rng, (d_in, cfg.fc_dim), d_in))
    p["rcnn.fc1.b"] = ag.parameter(np.zeros(cfg.fc_dim))
    p["rcnn.fc2.w"] = ag.parameter(_he(rng, (cfg.fc_dim, cfg.fc_dim), cfg.fc_dim))
    p["rcnn.fc2.b"] = ag.parameter(np.zeros(cfg.fc_dim))
    p["cls.w"] = ag.parameter(rng.normal(0.0, 0.01, size=(cfg.fc_dim, cfg.num_classes + 1)))
    p["cls.b"] = ag.parameter(np.zeros(cfg.num_classes + 1))
    p["reg.w"] = ag.parameter(rng.normal(0.0, 0.001, size=(cfg.fc_dim, 4 * cfg.num_classes)))
    p["reg.b"] = ag.parameter(np.zeros(4 * cfg.num_classes))
    for name, t in p.items():
        t.name = name
    return p


def group(params: Params, name: str) -> Params:
    return {k: v for k, v in params.items() if k.split(".", 1)[0] == name}


def frozen(params: Params) -> Params:
    """Detached copies, for inference without graph bookkeeping."""
    return {k: ag.detach(v) for k, v in params.items()}


# ---------------------------------------------------------------------------
# forward stages


def backbone_forward(image, params: Params, cfg: DetectorConfig) -> Tensor:
    x = image if isinstance(image, Tensor) else ag.tensor(image)
    if x.ndim != 3 or x.shape[0] != 3:
        raise ValueError(f"expected a 3xHxW image, got {x.shape}")
    s = cfg.stride
    if x.shape[1] % s or x.shape[2] % s:
        raise ValueError(f"image size {x.shape[1:]} not divisible by stride {s}")
    for i, stride in enumerate(cfg.strides, start=1):
        x = ag.relu(ag.conv2d(x, params[f"backbone.conv{i}.w"], params[f"backbone.conv{i}.b"],
                              stride=stride, padding=1))
    return x


def rpn_forward(fmap: Tensor, params: Params, cfg: DetectorConfig) -> Tuple[Tensor, Tensor]:
    """Per-anchor objectness logits (A_total,) and deltas (A_total, 4), ordered
    like :func:`boxes.anchor_grid` (row, col, scale)."""
    A = cfg.num_anchors
    _, Hf, Wf = fmap.shape
    h = ag.relu(ag.conv2d(fmap, params["rpn.conv.w"], params["rpn.conv.b"], padding=1))
    obj = ag.conv2d(h, params["rpn.obj.w"], params["rpn.obj.b"])
    delta = ag.conv2d(h, params["rpn.delta.w"], params["rpn.delta.b"])
    logits = obj.transpose(1, 2, 0).reshape(-1)
    deltas = delta.reshape(A, 4, Hf, Wf).transpose(2, 3, 0, 1).reshape(-1, 4)
    return logits, deltas


def anchors_for(cfg: DetectorConfig, height: int, width: int) -> np.ndarray:
    s = cfg.stride
    return bx.anchor_grid(height // s, width // s, s, cfg.anchor_scales)


def propose(logits, deltas, anchors: np.ndarray, top_n: int, width: int, height: int,
            image_id: int = -1) -> ProposalSet:
    """Top ``top_n`` anchors by objectness, decoded and clipped.

    No RPN-stage NMS.  The top anchors are emitted even when every
    objectness is low, so the set is never empty.
    """
    z = logits.data if isinstance(logits, Tensor) else np.asarray(logits)
    d = deltas.data if isinstance(deltas, Tensor) else np.asarray(deltas)
    scores = 0.5 * (1.0 + np.tanh(0.5 * z))
    n = max(1, min(top_n, len(anchors)))
    order = np.argsort(-scores, kind="stable")[:n]
    boxes = bx.clip(bx.decode(d[order], anchors[order]), width, height, min_size=1.0)
    return ProposalSet(boxes=boxes, objectness=scores[order], image_id=image_id)


def anchor_labels(anchors: np.ndarray, gt_boxes: np.ndarray, pos_iou: float,
                  neg_iou: float) -> Tuple[np.ndarray, np.ndarray]:
    """Labels 1 / 0 / -1 (ignore) and the matched GT index per anchor."""
    labels = -np.ones(len(anchors), dtype=np.int64)
    if len(gt_boxes) == 0:
        labels[:] = 0
        return labels, np.zeros(len(anchors), dtype=np.int64)
    ov = bx.iou_matrix(anchors, gt_boxes)
    best = ov.max(axis=1)
    matched = ov.argmax(axis=1)
    labels[best <= neg_iou] = 0
    labels[best >= pos_iou] = 1
    gt_best = ov.max(axis=0)
    for g in range(len(gt_boxes)):
        if gt_best[g] > 0:
            hits = np.flatnonzero(ov[:, g] == gt_best[g])
            labels[hits] = 1
            matched[hits] = g
    return labels, matched


def sample_anchors(labels: np.ndarray, rng: Optional[np.random.Generator], batch: int,
                   pos_fraction: float) -> np.ndarray:
    """Indices of labeled anchors used by the loss; all of them when ``rng`` is None."""
    pos = np.flatnonzero(labels == 1)
    neg = np.flatnonzero(labels == 0)
    if rng is None:
        return np.sort(np.concatenate([pos, neg]))
    n_pos = min(len(pos), int(batch * pos_fraction))
    n_neg = min(len(neg), batch - n_pos)
    pos = rng.choice(pos, n_pos, replace=False) if n_pos < len(pos) else pos
    neg = rng.choice(neg, n_neg, replace=False) if n_neg < len(neg) else neg
    return np.sort(np.concatenate([pos, neg]))


def rpn_loss(logits: Tensor, deltas: Tensor, anchors: np.ndarray, truth, cfg: DetectorConfig,
             rng: Optional[np.random.Generator] = None) -> Tensor:
    """Binary cross-entropy on sampled anchors plus smooth-l1 on positive deltas,
    both divided by the number of sampled anchors."""
    if truth is None:
        raise ValueError("rpn_loss needs ground truth")
    labels, matched = anchor_labels(anchors, truth.boxes, cfg.rpn_pos_iou, cfg.rpn_neg_iou)
    idx = sample_anchors(labels, rng, cfg.rpn_batch, cfg.rpn_pos_fraction)
    if idx.size == 0:
        return ag.sum(logits * 0.0)
    y = (labels[idx] == 1).astype(np.float64)
    z = logits[idx]
    cls_term = ag.sum(ag.softplus(z) - z * y)
    pos = idx[labels[idx] == 1]
    total = cls_term
    if pos.size:
        targets = bx.encode(truth.boxes[matched[pos]], anchors[pos])
        total = total + ag.sum(ag.smooth_l1(deltas[pos] - targets))
    return total * (1.0 / idx.size)


def roi_align(fmap: Tensor, boxes, out_size: int, stride: int) -> Tensor:
    """Pool each pixel box into an ``out_size`` x ``out_size`` grid -> (N, C, r, r).

    Pixel coordinate p maps to feature coordinate p / stride - 0.5, so that
    feature cell j sits at the centre of its stride x stride pixel patch.
    Each output cell averages four bilinear samples at the cell's quarter points.
    """
    b = bx.as_boxes(boxes)
    if np.any(b[:, 2] * b[:, 3] < 1.0) or np.any(b[:, 2:] <= 0):
        raise ValueError("degenerate box (area < 1 px^2)")
    C = fmap.shape[0]
    N, r = len(b), out_size
    frac = np.array([0.25, 0.75])
    cells = (np.arange(r)[:, None] + frac[None]).reshape(-1) / r  # (2r,) fractional offsets
    x0 = b[:, 0] / stride - 0.5
    y0 = b[:, 1] / stride - 0.5
    xs = x0[:, None] + cells[None] * (b[:, 2] / stride)[:, None]  # (N, 2r)
    ys = y0[:, None] + cells[None] * (b[:, 3] / stride)[:, None]
    # sample grid (N, r, 2, r, 2): rows from ys, cols from xs
    X = np.broadcast_to(xs.reshape(N, 1, 1, r, 2), (N, r, 2, r, 2))
    Y = np.broadcast_to(ys.reshape(N, r, 2, 1, 1), (N, r, 2, r, 2))
    samples = ag.bilinear_sample(fmap, X.reshape(-1), Y.reshape(-1))
    pooled = samples.reshape(C, N, r, 2, r, 2).mean(axis=(3, 5))
    return pooled.transpose(1, 0, 2, 3)


def rcnn_forward(rois: Tensor, params: Params, cfg: DetectorConfig) -> HeadOutputs:
    """Shared trunk and heads for (M, C, r, r) pooled maps, original or noisy."""
    expected = (cfg.channels[-1], cfg.roi_size, cfg.roi_size)
    if rois.ndim != 4 or tuple(rois.shape[1:]) != expected:
        raise ValueError(f"rcnn input {rois.shape} does not match (M, {expected})")
    x = rois.reshape(rois.shape[0], -1)
    h = ag.relu(ag.linear(x, params["rcnn.fc1.w"], params["rcnn.fc1.b"]))
    feats = ag.relu(ag.linear(h, params["rcnn.fc2.w"], params["rcnn.fc2.b"]))
    logits = ag.linear(feats, params["cls.w"], params["cls.b"])
    return HeadOutputs(
        features=feats,
        logits=logits,
        probs=ag.softmax(logits, axis=-1),
        deltas=ag.linear(feats, params["reg.w"], params["reg.b"]),
    )


# ---------------------------------------------------------------------------
# R-CNN targets and loss


def proposal_targets(boxes: np.ndarray, truth, cfg: DetectorConfig):
    """Class labels (0 = background, c + 1 = foreground class c), matched GT
    index, and max IoU for each proposal."""
    if truth is None or len(truth) == 0:
        n = len(boxes)
        return np.zeros(n, dtype=np.int64), np.zeros(n, dtype=np.int64), np.zeros(n)
    ov = bx.iou_matrix(boxes, truth.boxes)
    best = ov.max(axis=1)
    matched = ov.argmax(axis=1)
    labels = np.where(best >= cfg.rcnn_pos_iou, truth.classes[matched] + 1, 0)
    return labels.astype(np.int64), matched, best


def class_deltas(deltas: Tensor, classes) -> Tensor:
    """Pick the 4 regression outputs of foreground class ``classes[i]`` per row.

    Works on (N, 4C) or (N, K, 4C) with ``classes`` of shape (N,).
    """
    classes = np.asarray(classes, dtype=np.int64)
    N = deltas.shape[0]
    cols = 4 * classes[:, None] + np.arange(4)[None]  # (N, 4)
    if deltas.ndim == 2:
        return deltas[np.arange(N)[:, None], cols]
    K = deltas.shape[1]
    return deltas[np.arange(N)[:, None, None], np.arange(K)[None, :, None], cols[:, None, :]]


def rcnn_loss(head: HeadOutputs, boxes: np.ndarray, truth, cfg: DetectorConfig
              ) -> Tuple[Tensor, Tensor]:
    """(1/N) sum of cross-entropy and (1/N) sum of smooth-l1 on positives."""
    labels, matched, _ = proposal_targets(boxes, truth, cfg)
    N = len(boxes)
    logp = ag.log_softmax(head.logits, axis=-1)
    cls_term = -ag.sum(logp[np.arange(N), labels]) * (1.0 / N)
    pos = np.flatnonzero(labels > 0)
    if pos.size == 0:
        return cls_term, ag.sum(head.deltas * 0.0)
    targets = bx.encode(truth.boxes[matched[pos]], boxes[pos], cfg.rcnn_reg_weights)
    pred = class_deltas(head.deltas[pos], labels[pos] - 1)
    reg_term = ag.sum(ag.smooth_l1(pred - targets)) * (1.0 / N)
    return cls_term, reg_term


# ---------------------------------------------------------------------------
# inference


def detect_arrays(image: np.ndarray, params: Params, cfg: DetectorConfig, score_thresh: float,
                  nms_iou: float):
    """Detections as arrays (boxes (D, 4), scores (D,), classes (D,)), score-descending."""
    p = frozen(params)
    _, H, W = image.shape
    fmap = backbone_forward(image, p, cfg)
    logits, deltas = rpn_forward(fmap, p, cfg)
    props = propose(logits, deltas, anchors_for(cfg, H, W), cfg.top_n_test, W, H)
    head = rcnn_forward(roi_align(fmap, props.boxes, cfg.roi_size, cfg.stride), p, cfg)
    probs, reg = head.probs.data, head.deltas.data
    all_boxes, all_scores, all_classes = [], [], []
    for c in range(cfg.num_classes):
        s = probs[:, c + 1]
        keep = np.flatnonzero(s >= score_thresh)
        if keep.size == 0:
            continue
        b = bx.clip(bx.decode(reg[keep, 4 * c:4 * c + 4], props.boxes[keep], cfg.rcnn_reg_weights),
                    W, H, min_size=1e-3)
        k = bx.nms(b, s[keep], nms_iou)
        all_boxes.append(b[k])
        all_scores.append(s[keep][k])
        all_classes.append(np.full(k.size, c, dtype=np.int64))
    if not all_boxes:
        return np.zeros((0, 4)), np.zeros(0), np.zeros(0, dtype=np.int64)
    boxes_ = np.concatenate(all_boxes)
    scores = np.concatenate(all_scores)
    classes = np.concatenate(all_classes)
    order = np.argsort(-scores, kind="stable")[:cfg.detections_per_image]
    return boxes_[order], scores[order], classes[order]


def detect(image: np.ndarray, params: Params, cfg: DetectorConfig, score_thresh: float = 0.05,
           nms_iou: float = 0.5) -> List[Detection]:
    boxes_, scores, classes = detect_arrays(image, params, cfg, score_thresh, nms_iou)
    return [Detection(tuple(float(v) for v in b), int(c), float(s))
            for b, s, c in zip(boxes_, scores, classes)]

"""Box geometry on (x, y, w, h) pixel boxes with (x, y) the top-left corner."""

from __future__ import annotations

from typing import Sequence

import numpy as np

# regression targets are clipped before exp() in decode
_MAX_LOG_SCALE = np.log(1000.0 / 16)


def as_boxes(boxes) -> np.ndarray:
    b = np.asarray(boxes, dtype=np.float64)
    return b.reshape(-1, 4)


def iou(a, b) -> float:
    """IoU of two single boxes."""
    return float(iou_matrix(as_boxes(a), as_boxes(b))[0, 0])


def iou_matrix(a, b) -> np.ndarray:
    """Pairwise IoU between (N, 4) and (M, 4) box arrays -> (N, M)."""
    a, b = as_boxes(a), as_boxes(b)
    ax2, ay2 = a[:, 0] + a[:, 2], a[:, 1] + a[:, 3]
    bx2, by2 = b[:, 0] + b[:, 2], b[:, 1] + b[:, 3]
    iw = np.minimum(ax2[:, None], bx2[None]) - np.maximum(a[:, 0][:, None], b[:, 0][None])
    ih = np.minimum(ay2[:, None], by2[None]) - np.maximum(a[:, 1][:, None], b[:, 1][None])
    inter = np.clip(iw, 0, None) * np.clip(ih, 0, None)
    union = (a[:, 2] * a[:, 3])[:, None] + (b[:, 2] * b[:, 3])[None] - inter
    return np.divide(inter, union, out=np.zeros_like(inter), where=union > 0)


def encode(boxes, anchors, weights: Sequence[float] = (1.0, 1.0, 1.0, 1.0)) -> np.ndarray:
    """Standard center/log-size deltas of ``boxes`` relative to ``anchors``."""
    b, a = as_boxes(boxes), as_boxes(anchors)
    wx, wy, ww, wh = weights
    acx, acy = a[:, 0] + 0.5 * a[:, 2], a[:, 1] + 0.5 * a[:, 3]
    bcx, bcy = b[:, 0] + 0.5 * b[:, 2], b[:, 1] + 0.5 * b[:, 3]
    return np.stack([
        wx * (bcx - acx) / a[:, 2],
        wy * (bcy - acy) / a[:, 3],
        ww * np.log(b[:, 2] / a[:, 2]),
        wh * np.log(b[:, 3] / a[:, 3]),
    ], axis=1)


def decode(deltas, anchors, weights: Sequence[float] = (1.0, 1.0, 1.0, 1.0)) -> np.ndarray:
    """Inverse of :func:`encode`."""
    d, a = as_boxes(deltas), as_boxes(anchors)
    wx, wy, ww, wh = weights
    acx, acy = a[:, 0] + 0.5 * a[:, 2], a[:, 1] + 0.5 * a[:, 3]
    cx = acx + d[:, 0] / wx * a[:, 2]
    cy = acy + d[:, 1] / wy * a[:, 3]
    w = a[:, 2] * np.exp(np.minimum(d[:, 2] / ww, _MAX_LOG_SCALE))
    h = a[:, 3] * np.exp(np.minimum(d[:, 3] / wh, _MAX_LOG_SCALE))
    return np.stack([cx - 0.5 * w, cy - 0.5 * h, w, h], axis=1)


def clip(boxes, width: float, height: float, min_size: float = 1e-3) -> np.ndarray:
    """Clip to the image; boxes are kept at least ``min_size`` wide and tall."""
    b = as_boxes(boxes)
    x1 = np.clip(b[:, 0], 0, width - min_size)
    y1 = np.clip(b[:, 1], 0, height - min_size)
    x2 = np.clip(b[:, 0] + b[:, 2], x1 + min_size, width)
    y2 = np.clip(b[:, 1] + b[:, 3], y1 + min_size, height)
    return np.stack([x1, y1, x2 - x1, y2 - y1], axis=1)


def flip(boxes, width: float) -> np.ndarray:
    b = as_boxes(boxes).copy()
    b[:, 0] = width - b[:, 0] - b[:, 2]
    return b


def nms(boxes, scores, iou_thresh: float) -> np.ndarray:
    """Greedy non-maximum suppression; returns kept indices by descending score."""
    b = as_boxes(boxes)
    s = np.asarray(scores, dtype=np.float64)
    order = np.argsort(-s, kind="stable")
    keep = []
    while order.size:
        i = order[0]
        keep.append(i)
        if order.size == 1:
            break
        ov = iou_matrix(b[i], b[order[1:]])[0]
        order = order[1:][ov <= iou_thresh]
    return np.asarray(keep, dtype=np.int64)


def batched_nms(boxes, scores, classes, iou_thresh: float) -> np.ndarray:
    """Per-class NMS; kept indices sorted by descending score."""
    classes = np.asarray(classes)
    scores = np.asarray(scores, dtype=np.float64)
    keep = [np.flatnonzero(classes == c)[nms(as_boxes(boxes)[classes == c], scores[classes == c],
                                              iou_thresh)]
            for c in np.unique(classes)]
    if not keep:
        return np.zeros(0, dtype=np.int64)
    keep = np.concatenate(keep)
    return keep[np.argsort(-scores[keep], kind="stable")]


def anchor_grid(feat_h: int, feat_w: int, stride: int, scales: Sequence[float]) -> np.ndarray:
    """Square anchors centred on each feature cell, ordered (row, col, scale).

    Cell (i, j) is centred at pixel ((j + 0.5) * stride, (i + 0.5) * stride).
    """
    ys, xs = np.meshgrid(np.arange(feat_h), np.arange(feat_w), indexing="ij")
    cx = (xs + 0.5) * stride
    cy = (ys + 0.5) * stride
    s = np.asarray(scales, dtype=np.float64)
    cx = np.repeat(cx.reshape(-1), s.size)
    cy = np.repeat(cy.reshape(-1), s.size)
    size = np.tile(s, feat_h * feat_w)
    return np.stack([cx - size / 2, cy - size / 2, size, size], axis=1)

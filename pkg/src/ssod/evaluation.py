"""COCO-style AP over synthetic test scenes (101-point interpolation)."""

from __future__ import annotations

from dataclasses import asdict, dataclass, field
from typing import TYPE_CHECKING, Callable, Dict, List, Sequence, Tuple

import numpy as np

from . import boxes as bx
from .boxes import iou  # noqa: F401  part of the evaluation interface

if TYPE_CHECKING:
    from .scenes import GroundTruth

IOU_THRESHOLDS = np.linspace(0.5, 0.95, 10)
RECALL_POINTS = np.linspace(0.0, 1.0, 101)


@dataclass
class ImageDetections:
    image_id: int
    boxes: np.ndarray
    scores: np.ndarray
    classes: np.ndarray


@dataclass
class EvalResult:
    AP: float
    AP50: float
    AP75: float
    per_class_AP: Dict[int, float] = field(default_factory=dict)
    per_class_AP50: Dict[int, float] = field(default_factory=dict)
    n_detections: int = 0
    n_gt: int = 0

    def to_dict(self) -> dict:
        d = asdict(self)
        d["per_class_AP"] = {str(k): v for k, v in self.per_class_AP.items()}
        d["per_class_AP50"] = {str(k): v for k, v in self.per_class_AP50.items()}
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "EvalResult":
        d = dict(d)
        d["per_class_AP"] = {int(k): v for k, v in d.get("per_class_AP", {}).items()}
        d["per_class_AP50"] = {int(k): v for k, v in d.get("per_class_AP50", {}).items()}
        return cls(**d)


def _class_ap(dets: List[Tuple[float, int, int, np.ndarray]], gts: Dict[int, np.ndarray],
              thresh: float) -> float:
    n_gt = sum(len(g) for g in gts.values())
    if n_gt == 0:
        return float("nan")
    if not dets:
        return 0.0
    # score-descending; ties broken by (image id, rank within image) so that
    # the result does not depend on the order images were evaluated in
    order = np.lexsort(([d[2] for d in dets], [d[1] for d in dets], [-d[0] for d in dets]))
    used = {k: np.zeros(len(v), dtype=bool) for k, v in gts.items()}
    tp = np.zeros(len(dets))
    for rank, i in enumerate(order):
        _, img, _, box = dets[i]
        g = gts.get(img)
        if g is None or len(g) == 0:
            continue
        ov = bx.iou_matrix(box, g)[0]
        ov[used[img]] = -1.0
        j = int(np.argmax(ov))
        if ov[j] >= thresh:
            used[img][j] = True
            tp[rank] = 1.0
    ctp = np.cumsum(tp)
    cfp = np.cumsum(1.0 - tp)
    recall = ctp / n_gt
    precision = ctp / (ctp + cfp)
    precision = np.maximum.accumulate(precision[::-1])[::-1]
    idx = np.searchsorted(recall, RECALL_POINTS, side="left")
    q = np.where(idx < len(precision), precision[np.minimum(idx, len(precision) - 1)], 0.0)
    return float(q.mean())


def _gather(detections: Sequence[ImageDetections], truths: Dict[int, "GroundTruth"]):
    classes = sorted({int(c) for t in truths.values() for c in t.classes})
    per_class_dets = {c: [] for c in classes}
    for d in detections:
        for j, (b, s, c) in enumerate(zip(d.boxes, d.scores, d.classes)):
            if int(c) in per_class_dets:
                per_class_dets[int(c)].append((float(s), d.image_id, j, np.asarray(b)))
    per_class_gts = {c: {img: t.boxes[t.classes == c] for img, t in truths.items()}
                     for c in classes}
    return classes, per_class_dets, per_class_gts


def ap_at(detections: Sequence[ImageDetections], truths: Dict[int, "GroundTruth"],
          iou_thresh: float, per_class: bool = False):
    """Mean over GT classes of 101-point interpolated AP at one IoU threshold."""
    classes, dets, gts = _gather(detections, truths)
    aps = {c: _class_ap(dets[c], gts[c], iou_thresh) for c in classes}
    mean_ap = float(np.mean(list(aps.values()))) if aps else 0.0
    return (mean_ap, aps) if per_class else mean_ap


def evaluate_detections(detections: Sequence[ImageDetections],
                        truths: Dict[int, "GroundTruth"]) -> EvalResult:
    classes, dets, gts = _gather(detections, truths)
    table = np.array([[_class_ap(dets[c], gts[c], t) for c in classes] for t in IOU_THRESHOLDS])
    if table.size == 0:
        table = np.zeros((len(IOU_THRESHOLDS), 1))
    per_thresh = table.mean(axis=1)
    return EvalResult(
        AP=float(per_thresh.mean()),
        AP50=float(per_thresh[0]),
        AP75=float(per_thresh[5]),
        per_class_AP={c: float(table[:, i].mean()) for i, c in enumerate(classes)},
        per_class_AP50={c: float(table[0, i]) for i, c in enumerate(classes)},
        n_detections=int(sum(len(d.scores) for d in detections)),
        n_gt=int(sum(len(t) for t in truths.values())),
    )


def evaluate(detector_fn: Callable[[np.ndarray], Tuple[np.ndarray, np.ndarray, np.ndarray]],
             pool) -> EvalResult:
    """Run ``detector_fn(image) -> (boxes, scores, classes)`` over a labeled pool."""
    if not pool:
        raise ValueError("empty evaluation pool")
    dets, truths = [], {}
    for e in pool:
        if e.truth is None:
            raise ValueError(f"example {e.id} has no ground truth")
        b, s, c = detector_fn(e.image)
        dets.append(ImageDetections(e.id, np.asarray(b).reshape(-1, 4), np.asarray(s),
                                    np.asarray(c)))
        truths[e.id] = e.truth
    return evaluate_detections(dets, truths)

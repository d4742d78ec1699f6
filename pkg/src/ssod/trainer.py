"""Training objectives (supervised, proposal learning on labeled/unlabeled), SGD, FSWA
and single-model data distillation."""

from __future__ import annotations

import logging
from dataclasses import asdict, dataclass, field, replace
from typing import Callable, Dict, List, Optional, Sequence, Tuple

import numpy as np

from . import autograd as ag
from . import boxes as bx
from . import consistency as cons
from . import detector as det
from . import noise as nz
from . import sspl
from .autograd import NonFiniteError, Tensor
from .scenes import Example, GroundTruth, flip_example

logger = logging.getLogger(__name__)

COMPONENTS = ("self_loc", "self_cont", "cons_cls", "cons_reg")


@dataclass(frozen=True)
class HyperParams:
    w_self_loc: float = 0.25
    w_self_cont: float = 1.0
    w_cons_cls: float = 1.0
    w_cons_reg: float = 0.5
    tau: float = 0.1
    K: int = 4
    noise: Tuple[nz.NoiseSpec, ...] = tuple(nz.default_specs())
    base_lr: float = 0.01
    momentum: float = 0.9
    weight_decay: float = 1e-4
    warmup_iters: int = 100
    milestones: Tuple[int, ...] = (16, 22)
    warm_epochs: int = 6
    score_thresh: float = 0.5
    labeled_pl: bool = False  # proposal learning on labeled images as well
    flip_train: bool = True

    def __post_init__(self):
        if min(self.w_self_loc, self.w_self_cont, self.w_cons_cls, self.w_cons_reg) < 0:
            raise ValueError("loss weights must be >= 0")
        if self.tau <= 0:
            raise ValueError("tau must be positive")
        if self.K < 1:
            raise ValueError("K must be >= 1")
        if not 0.0 < self.score_thresh < 1.0:
            raise ValueError("score_thresh must be in (0, 1)")
        if not isinstance(self.labeled_pl, bool):
            raise ValueError("labeled_pl must be a boolean")
        if not self.noise:
            raise ValueError("need at least one noise spec")

    def weight(self, component: str) -> float:
        return getattr(self, "w_" + component)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["noise"] = [s.to_dict() for s in self.noise]
        d["milestones"] = list(self.milestones)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "HyperParams":
        extra = set(d) - set(cls.__dataclass_fields__)
        if extra:
            raise ValueError(f"unknown hyperparameter keys {sorted(extra)}")
        kw = dict(d)
        if "noise" in kw:
            kw["noise"] = tuple(nz.NoiseSpec.from_dict(s) for s in kw["noise"])
        if "milestones" in kw:
            kw["milestones"] = tuple(kw["milestones"])
        return cls(**kw)


@dataclass(frozen=True)
class LossToggles:
    self_loc: bool = False
    self_cont: bool = False
    cons_cls: bool = False
    cons_reg: bool = False

    @property
    def any(self) -> bool:
        return self.self_loc or self.self_cont or self.cons_cls or self.cons_reg

    @classmethod
    def all_on(cls) -> "LossToggles":
        return cls(True, True, True, True)


@dataclass
class TrainState:
    params: Dict[str, Tensor]
    momentum: Dict[str, np.ndarray]
    rng: np.random.Generator
    rng_unlabeled: np.random.Generator
    seed: int
    iteration: int = 0
    epoch: int = 0
    ring: List[Dict[str, np.ndarray]] = field(default_factory=list)

    def snapshot(self) -> Dict[str, np.ndarray]:
        return {k: v.data.copy() for k, v in self.params.items()}

    def rng_state(self) -> dict:
        return {"labeled": self.rng.bit_generator.state,
                "unlabeled": self.rng_unlabeled.bit_generator.state}


def init_state(cfg: det.DetectorConfig, sspl_cfg: sspl.SsplConfig, seed: int) -> TrainState:
    init_rng = np.random.default_rng([seed, 0])
    params = det.init_detector_params(cfg, init_rng)
    params.update(sspl.init_sspl_params(sspl_cfg, init_rng))
    return TrainState(
        params=params,
        momentum={k: np.zeros_like(v.data) for k, v in params.items()},
        rng=np.random.default_rng([seed, 1]),
        rng_unlabeled=np.random.default_rng([seed, 2]),
        seed=seed,
    )


# ---------------------------------------------------------------------------
# per-image forward passes and losses


@dataclass
class ImageForward:
    boxes: np.ndarray
    rois: Tensor
    head: det.HeadOutputs
    width: int
    height: int


@dataclass
class SupervisedOutput:
    loss: Tensor
    rpn: Tensor
    rcnn_cls: Tensor
    rcnn_reg: Tensor
    forward: ImageForward


def supervised_loss(example: Example, params, cfg: det.DetectorConfig,
                    rng: Optional[np.random.Generator] = None) -> SupervisedOutput:
    """RPN loss plus the per-proposal R-CNN loss averaged over the N proposals.

    Ground-truth boxes are appended to the RPN proposals (``cfg.add_gt_proposals``).
    """
    if example.truth is None:
        raise ValueError("supervised_loss needs a labeled example")
    H, W = example.height, example.width
    fmap = det.backbone_forward(example.image, params, cfg)
    logits, deltas = det.rpn_forward(fmap, params, cfg)
    anchors = det.anchors_for(cfg, H, W)
    rpn = det.rpn_loss(logits, deltas, anchors, example.truth, cfg, rng)
    props = det.propose(logits, deltas, anchors, cfg.top_n_train, W, H, example.id)
    boxes = props.boxes
    if cfg.add_gt_proposals and len(example.truth):
        boxes = np.concatenate([boxes, example.truth.boxes])
    rois = det.roi_align(fmap, boxes, cfg.roi_size, cfg.stride)
    head = det.rcnn_forward(rois, params, cfg)
    cls_term, reg_term = det.rcnn_loss(head, boxes, example.truth, cfg)
    return SupervisedOutput(rpn + cls_term + reg_term, rpn, cls_term, reg_term,
                            ImageForward(boxes, rois, head, W, H))


def unlabeled_forward(example: Example, params, cfg: det.DetectorConfig) -> ImageForward:
    H, W = example.height, example.width
    fmap = det.backbone_forward(example.image, params, cfg)
    logits, deltas = det.rpn_forward(fmap, params, cfg)
    props = det.propose(logits, deltas, det.anchors_for(cfg, H, W), cfg.top_n_train, W, H,
                        example.id)
    rois = det.roi_align(fmap, props.boxes, cfg.roi_size, cfg.stride)
    return ImageForward(props.boxes, rois, det.rcnn_forward(rois, params, cfg), W, H)


def select_proposals(boxes: np.ndarray, probs: np.ndarray, truth: Optional[GroundTruth],
                     threshold: float = 0.5, pos_iou: float = 0.5) -> np.ndarray:
    """Labeled: proposals with IoU >= ``pos_iou`` to some GT box.  Unlabeled:
    proposals whose largest foreground probability exceeds ``threshold``."""
    probs = probs.data if isinstance(probs, Tensor) else np.asarray(probs)
    if truth is not None:
        if len(truth) == 0:
            return np.zeros(0, dtype=np.int64)
        return np.flatnonzero(bx.iou_matrix(boxes, truth.boxes).max(axis=1) >= pos_iou)
    return np.flatnonzero(probs[:, 1:].max(axis=1) > threshold)


def proposal_learning_terms(fwd: ImageForward, sel: np.ndarray, params, cfg: det.DetectorConfig,
                            hp: HyperParams, toggles: LossToggles, noise_seed: int
                            ) -> Dict[str, Tensor]:
    """Enabled proposal-learning losses for the selected proposals of one image,
    each averaged over those proposals."""
    n, K = len(sel), hp.K
    C, r = cfg.channels[-1], cfg.roi_size
    masks = nz.noisy_masks((C, r, r), sel, hp.noise, K, noise_seed)
    rois = fwd.rois[sel].reshape(n, 1, C, r, r)
    noisy_rois = ag.mul(rois, masks).reshape(n * K, C, r, r)
    noisy = det.rcnn_forward(noisy_rois, params, cfg)
    terms: Dict[str, Tensor] = {}
    if toggles.self_loc or toggles.self_cont:
        feats = fwd.head.features[sel]
        noisy_feats = noisy.features.reshape(n, K, -1)
        targets = sspl.normalize_box(fwd.boxes[sel], fwd.width, fwd.height)
        loc, cont = sspl.sspl_components(feats, noisy_feats, targets, params, hp.tau,
                                         toggles.self_loc, toggles.self_cont)
        if loc is not None:
            terms["self_loc"] = loc
        if cont is not None:
            terms["self_cont"] = cont
    if toggles.cons_cls:
        terms["cons_cls"] = cons.cls_consistency(fwd.head.probs[sel],
                                                 noisy.probs.reshape(n, K, -1))
    if toggles.cons_reg:
        # regression outputs of the original prediction's top foreground class
        fg = np.argmax(fwd.head.probs.data[sel, 1:], axis=1)
        terms["cons_reg"] = cons.reg_consistency(
            det.class_deltas(fwd.head.deltas[sel], fg),
            det.class_deltas(noisy.deltas.reshape(n, K, -1), fg))
    return terms


def _noise_seed(seed: int, iteration: int, role: int) -> int:
    return int(np.random.SeedSequence([seed, iteration, role]).generate_state(1)[0])


# ---------------------------------------------------------------------------
# optimisation


def lr_at(iteration: int, epoch: int, hp: HyperParams) -> float:
    """Linear warmup from base/3 to base, then /10 at each milestone epoch reached."""
    lr = hp.base_lr
    if hp.warmup_iters > 0 and iteration < hp.warmup_iters:
        lr = hp.base_lr * (1.0 / 3.0 + (2.0 / 3.0) * iteration / hp.warmup_iters)
    decays = sum(1 for m in hp.milestones if epoch >= m)
    return lr * 0.1 ** decays


def sgd_update(state: TrainState, lr: float, momentum: float, weight_decay: float) -> None:
    """v <- m v + (g + wd p);  p <- p - lr v.  Aborts before touching any
    parameter if a gradient is non-finite."""
    grads = {}
    for name, p in state.params.items():
        g = p.grad if p.grad is not None else np.zeros_like(p.data)
        if not np.isfinite(g).all():
            raise NonFiniteError(f"non-finite gradient for {name}")
        grads[name] = g
    for name, p in state.params.items():
        v = momentum * state.momentum[name] + (grads[name] + weight_decay * p.data)
        state.momentum[name] = v
        p.data = p.data - lr * v
        p.grad = None


def fswa_average(checkpoints: Sequence[Dict[str, np.ndarray]]) -> Dict[str, np.ndarray]:
    """Elementwise mean of parameter snapshots.

    Computed as ref + mean(c - ref) with ref the first snapshot, which is
    exact when all snapshots are identical.
    """
    if not checkpoints:
        raise ValueError("need at least one checkpoint")
    ref = checkpoints[0]
    for c in checkpoints[1:]:
        if c.keys() != ref.keys() or any(c[k].shape != ref[k].shape for k in ref):
            raise ValueError("checkpoints disagree in names or shapes")
    n = len(checkpoints)
    out = {}
    for k, r in ref.items():
        acc = np.zeros_like(r)
        for c in checkpoints:
            acc = acc + (c[k] - r)
        out[k] = r + acc / n
    return out


# ---------------------------------------------------------------------------
# one step


def _maybe_flip(e: Example, rng: np.random.Generator, enabled: bool) -> Example:
    if enabled and rng.random() < 0.5:
        return flip_example(e)
    return e


def training_step(labeled: Example, unlabeled: Optional[Example], state: TrainState,
                  hp: HyperParams, toggles: LossToggles, cfg: det.DetectorConfig) -> dict:
    """One SGD step on one labeled and (optionally) one unlabeled image.

    Returns the loss breakdown.  The total is exactly
    rpn + rcnn_cls + rcnn_reg + sum_i w_i * component_i, where each
    proposal-learning component is averaged over the images that had at
    least one selected proposal (zero if none had).
    """
    if labeled is None or labeled.truth is None:
        raise ValueError("training_step needs a labeled example")
    params = state.params
    pl_on = toggles.any and state.epoch >= hp.warm_epochs
    lab = _maybe_flip(labeled, state.rng, hp.flip_train)
    sup = supervised_loss(lab, params, cfg, state.rng)

    per_image: List[Dict[str, Tensor]] = []
    n_sel_l = n_sel_u = 0
    if pl_on and hp.labeled_pl:
        sel = select_proposals(sup.forward.boxes, sup.forward.head.probs, lab.truth,
                               hp.score_thresh, cfg.rcnn_pos_iou)
        n_sel_l = int(sel.size)
        if sel.size:
            per_image.append(proposal_learning_terms(
                sup.forward, sel, params, cfg, hp, toggles,
                _noise_seed(state.seed, state.iteration, 0)))
    if pl_on and unlabeled is not None:
        unl = _maybe_flip(unlabeled, state.rng_unlabeled, hp.flip_train)
        fwd = unlabeled_forward(unl, params, cfg)
        sel = select_proposals(fwd.boxes, fwd.head.probs, None, hp.score_thresh)
        n_sel_u = int(sel.size)
        if sel.size:
            per_image.append(proposal_learning_terms(
                fwd, sel, params, cfg, hp, toggles,
                _noise_seed(state.seed, state.iteration, 1)))

    comps: Dict[str, Tensor] = {}
    for name in COMPONENTS:
        vals = [t[name] for t in per_image if name in t]
        comps[name] = ag.mean(ag.stack(vals)) if vals else ag.tensor(0.0)
    weights = {name: hp.weight(name) if getattr(toggles, name) else 0.0 for name in COMPONENTS}

    total = sup.rpn + sup.rcnn_cls + sup.rcnn_reg
    for name in COMPONENTS:
        total = total + comps[name] * weights[name]

    lr = lr_at(state.iteration, state.epoch, hp)
    ag.backward(total)
    sgd_update(state, lr, hp.momentum, hp.weight_decay)
    state.iteration += 1
    record = {
        "iter": state.iteration - 1,
        "epoch": state.epoch,
        "lr": lr,
        "total": total.item(),
        "rpn": sup.rpn.item(),
        "rcnn_cls": sup.rcnn_cls.item(),
        "rcnn_reg": sup.rcnn_reg.item(),
        "n_sel_labeled": n_sel_l,
        "n_sel_unlabeled": n_sel_u,
        "weights": weights,
    }
    record.update({name: comps[name].item() for name in COMPONENTS})
    return record


def recombine(record: dict) -> float:
    """The total implied by a log record's components, in training order."""
    total = record["rpn"] + record["rcnn_cls"] + record["rcnn_reg"]
    for name in COMPONENTS:
        total = total + record[name] * record["weights"][name]
    return total


# ---------------------------------------------------------------------------
# training loop


@dataclass(frozen=True)
class Schedule:
    epochs: int = 24
    steps_per_epoch: int = 200
    fswa_epochs: int = 4

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "Schedule":
        extra = set(d) - set(cls.__dataclass_fields__)
        if extra:
            raise ValueError(f"unknown schedule keys {sorted(extra)}")
        return cls(**d)


def fit(state: TrainState, labeled: Sequence[Example], unlabeled: Sequence[Example],
        hp: HyperParams, toggles: LossToggles, cfg: det.DetectorConfig, schedule: Schedule,
        use_fswa: bool = False, log: Optional[Callable[[dict], None]] = None
        ) -> Dict[str, np.ndarray]:
    """Run the whole schedule; returns the final (optionally FSWA-averaged) parameters."""
    if not labeled:
        raise ValueError("empty labeled pool")
    start_epoch = state.epoch
    for epoch in range(start_epoch, schedule.epochs):
        state.epoch = epoch
        for _ in range(schedule.steps_per_epoch):
            lab = labeled[int(state.rng.integers(len(labeled)))]
            unl = None
            if toggles.any and epoch >= hp.warm_epochs and unlabeled:
                unl = unlabeled[int(state.rng_unlabeled.integers(len(unlabeled)))]
            record = training_step(lab, unl, state, hp, toggles, cfg)
            if log is not None:
                log(record)
        if use_fswa and epoch >= schedule.epochs - schedule.fswa_epochs:
            state.ring.append(state.snapshot())
    state.epoch = schedule.epochs
    if use_fswa and state.ring:
        return fswa_average(state.ring)
    return state.snapshot()


def as_params(arrays: Dict[str, np.ndarray]) -> Dict[str, Tensor]:
    return {k: ag.tensor(v) for k, v in arrays.items()}


# ---------------------------------------------------------------------------
# data distillation


def transform_detections(image_example: Example, params, cfg: det.DetectorConfig,
                         score_thresh: float, nms_iou: float):
    """Detections on the image and its mirror (mapped back), merged by per-class NMS."""
    W = image_example.width
    b1, s1, c1 = det.detect_arrays(image_example.image, params, cfg, 0.0, nms_iou)
    b2, s2, c2 = det.detect_arrays(image_example.image[:, :, ::-1].copy(), params, cfg, 0.0,
                                   nms_iou)
    b = np.concatenate([b1, bx.flip(b2, W)])
    s = np.concatenate([s1, s2])
    c = np.concatenate([c1, c2])
    keep = bx.batched_nms(b, s, c, nms_iou)
    keep = keep[s[keep] >= score_thresh]
    return b[keep], s[keep], c[keep]


def distill_label(params, cfg: det.DetectorConfig, pool: Sequence[Example],
                  score_thresh: float = 0.9, nms_iou: float = 0.5) -> List[Example]:
    """Pseudo-label unlabeled examples; those without surviving boxes are dropped."""
    out = []
    for e in pool:
        b, s, c = transform_detections(e, params, cfg, score_thresh, nms_iou)
        if len(b) == 0:
            continue
        b = bx.clip(b, e.width, e.height, min_size=1e-3)
        truth = GroundTruth(b, c)
        out.append(replace(e, truth=truth, meta={**e.meta, "pseudo": True, "scores": s.tolist()}))
    return out

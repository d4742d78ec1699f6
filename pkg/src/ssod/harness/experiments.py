"""Training runs, the component ablation and the three-phase distillation pipeline."""

from __future__ import annotations

import csv
import json
import logging
import os
from dataclasses import asdict, dataclass, field
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np

from .. import boxes as bx
from .. import checkpoint as ckp
from .. import detector as det
from .. import trainer as tr
from ..evaluation import EvalResult, evaluate
from ..scenes import Example, hidden_truth, make_pools
from .config import ConfigError, ExperimentConfig, Toggles

logger = logging.getLogger(__name__)

Pools = Tuple[List[Example], List[Example], List[Example]]

_ALL = dict(self_loc=True, self_cont=True, cons_cls=True, cons_reg=True)

# component ablation rows, baseline first
ABLATION_ROWS: List[Tuple[str, Toggles]] = [
    ("baseline", Toggles()),
    ("self_loc", Toggles(self_loc=True)),
    ("self_cont", Toggles(self_cont=True)),
    ("self_loc+self_cont", Toggles(self_loc=True, self_cont=True)),
    ("cons_cls", Toggles(cons_cls=True)),
    ("cons_reg", Toggles(cons_reg=True)),
    ("cons_cls+cons_reg", Toggles(cons_cls=True, cons_reg=True)),
    ("all", Toggles(**_ALL)),
    ("all+labeled_pl", Toggles(**_ALL, labeled_pl=True)),
    ("baseline+fswa", Toggles(fswa=True)),
    ("all+labeled_pl+fswa", Toggles(**_ALL, labeled_pl=True, fswa=True)),
]

ROW_SETS = {
    "full": ABLATION_ROWS,
    "minimal": [ABLATION_ROWS[0], ABLATION_ROWS[-1]],
    "baseline": [ABLATION_ROWS[0]],
}


def build_pools(cfg: ExperimentConfig) -> Pools:
    labeled, unlabeled = make_pools(cfg.scenes, cfg.n_labeled, cfg.n_unlabeled, cfg.data_seed)
    test, _ = make_pools(cfg.scenes, cfg.n_test, 0, cfg.test_seed,
                         first_id=cfg.n_labeled + cfg.n_unlabeled)
    return labeled, unlabeled, test


def evaluate_params(params: Dict[str, np.ndarray], cfg: ExperimentConfig,
                    pool: Sequence[Example]) -> EvalResult:
    p = tr.as_params(params)
    return evaluate(lambda im: det.detect_arrays(im, p, cfg.detector, cfg.eval_score_thresh,
                                                 cfg.nms_iou), pool)


@dataclass
class TrainResult:
    params: Dict[str, np.ndarray]
    eval: EvalResult
    out_dir: str
    checkpoint: str
    log: str


def _require_seed(cfg: ExperimentConfig) -> int:
    if cfg.seed is None:
        raise ConfigError("a seed is required for training")
    return cfg.seed


def _write_json(path: str, obj) -> None:
    with open(path, "w") as fh:
        json.dump(obj, fh, indent=2, sort_keys=True)
        fh.write("\n")


def run_train(cfg: ExperimentConfig, pools: Optional[Pools] = None,
              labeled_override: Optional[Sequence[Example]] = None,
              out_dir: Optional[str] = None) -> TrainResult:
    """Warm phase, main phase, optional FSWA, then evaluation on the test pool.

    Writes ``config.json``, ``log.jsonl``, ``checkpoint.bin`` and ``eval.json``.
    """
    cfg.validate()
    seed = _require_seed(cfg)
    out = out_dir or cfg.out_dir
    os.makedirs(out, exist_ok=True)
    labeled, unlabeled, test = pools if pools is not None else build_pools(cfg)
    if labeled_override is not None:
        labeled = list(labeled_override)
    _write_json(os.path.join(out, "config.json"), cfg.to_dict())

    state = tr.init_state(cfg.detector, cfg.sspl, seed)
    hp = cfg.hyper_params()
    log_path = os.path.join(out, "log.jsonl")
    with open(log_path, "w") as fh:
        def log(record):
            fh.write(json.dumps(record, sort_keys=True) + "\n")

        params = tr.fit(state, labeled, unlabeled, hp, cfg.toggles.losses(), cfg.detector,
                        cfg.schedule, use_fswa=cfg.toggles.fswa, log=log)

    result = evaluate_params(params, cfg, test)
    ck_path = os.path.join(out, "checkpoint.bin")
    ckp.save(ck_path, params, meta={
        "config": cfg.to_dict(),
        "iteration": state.iteration,
        "epoch": state.epoch,
        "rng": state.rng_state(),
        "fswa_snapshots": len(state.ring),
    })
    _write_json(os.path.join(out, "eval.json"), result.to_dict())
    logger.info("%s: AP %.4f AP50 %.4f", out, result.AP, result.AP50)
    return TrainResult(params, result, out, ck_path, log_path)


# ---------------------------------------------------------------------------
# ablation


METRICS = ("AP", "AP50", "AP75")


@dataclass
class AblationRow:
    name: str
    toggles: Toggles
    eval: EvalResult
    deltas: Dict[str, float] = field(default_factory=dict)


@dataclass
class AblationReport:
    rows: List[AblationRow]

    def to_dict(self) -> dict:
        return {"rows": [{"name": r.name, "toggles": asdict(r.toggles),
                          "eval": r.eval.to_dict(), "deltas": r.deltas} for r in self.rows]}

    def write(self, out_dir: str) -> None:
        _write_json(os.path.join(out_dir, "ablation.json"), self.to_dict())
        toggle_names = list(Toggles.__dataclass_fields__)
        with open(os.path.join(out_dir, "ablation.csv"), "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["row"] + toggle_names + list(METRICS) + [f"d_{m}" for m in METRICS])
            for r in self.rows:
                w.writerow([r.name] + [int(getattr(r.toggles, t)) for t in toggle_names]
                           + [repr(getattr(r.eval, m)) for m in METRICS]
                           + [repr(r.deltas[m]) for m in METRICS])


def run_ablation(cfg: ExperimentConfig, rows: Sequence[Tuple[str, Toggles]] = ABLATION_ROWS,
                 out_dir: Optional[str] = None) -> AblationReport:
    """One run per row with the shared seed; deltas against the baseline row."""
    if not rows:
        raise ConfigError("ablation needs at least one row")
    if not rows[0][1].is_baseline:
        raise ConfigError("the first ablation row must be the all-off baseline")
    if len({name for name, _ in rows}) != len(rows):
        raise ConfigError("ablation row names must be unique")
    out = out_dir or cfg.out_dir
    os.makedirs(out, exist_ok=True)
    pools = build_pools(cfg)
    results = []
    for name, toggles in rows:
        row_cfg = cfg.with_toggles(toggles)
        res = run_train(row_cfg, pools, out_dir=os.path.join(out, name))
        results.append((name, toggles, res.eval))
    base = results[0][2]
    report = AblationReport([
        AblationRow(name, t, e, {m: getattr(e, m) - getattr(base, m) for m in METRICS})
        for name, t, e in results])
    report.write(out)
    return report


# ---------------------------------------------------------------------------
# distillation


def pseudo_label_precision(pseudo: Sequence[Example], cfg: ExperimentConfig,
                           iou_thresh: float = 0.5) -> Tuple[int, int]:
    """(true positives, pseudo boxes): a pseudo box is correct when it matches a
    not-yet-matched hidden box of the same class at IoU >= ``iou_thresh``."""
    tp = total = 0
    for e in pseudo:
        truth = hidden_truth(cfg.scenes, e)
        scores = np.asarray(e.meta.get("scores", np.ones(len(e.truth))))
        used = np.zeros(len(truth), dtype=bool)
        for i in np.argsort(-scores, kind="stable"):
            total += 1
            same = truth.classes == e.truth.classes[i]
            if not same.any():
                continue
            ov = bx.iou_matrix(e.truth.boxes[i], truth.boxes)[0]
            ov[~same | used] = -1.0
            j = int(np.argmax(ov))
            if ov[j] >= iou_thresh:
                used[j] = True
                tp += 1
    return tp, total


@dataclass
class DistillResult:
    phase1: TrainResult
    phase3: TrainResult
    n_pseudo_images: int
    n_pseudo_boxes: int
    precision: Optional[float]
    summary: dict


def run_distill(cfg: ExperimentConfig, out_dir: Optional[str] = None) -> DistillResult:
    """Train, pseudo-label the unlabeled pool, retrain from scratch on the labeled pool plus pseudo-labels."""
    out = out_dir or cfg.out_dir
    os.makedirs(out, exist_ok=True)
    pools = build_pools(cfg)
    labeled, unlabeled, test = pools
    phase1 = run_train(cfg, pools, out_dir=os.path.join(out, "phase1"))

    pseudo = tr.distill_label(tr.as_params(phase1.params), cfg.detector, unlabeled,
                              cfg.distill_score_thresh, cfg.nms_iou)
    tp, n_boxes = pseudo_label_precision(pseudo, cfg)
    precision = tp / n_boxes if n_boxes else None
    phase2 = {
        "n_unlabeled": len(unlabeled),
        "n_pseudo_images": len(pseudo),
        "n_pseudo_boxes": n_boxes,
        "n_correct_boxes": tp,
        "precision_iou50": precision,
        "score_thresh": cfg.distill_score_thresh,
        "pseudo_labels": [{"id": e.id, "boxes": e.truth.boxes.tolist(),
                           "classes": e.truth.classes.tolist()} for e in pseudo],
    }
    os.makedirs(os.path.join(out, "phase2"), exist_ok=True)
    _write_json(os.path.join(out, "phase2", "pseudo_labels.json"), phase2)

    phase3 = run_train(cfg, pools, labeled_override=list(labeled) + pseudo,
                       out_dir=os.path.join(out, "phase3"))
    summary = {
        "phase1": {"eval": phase1.eval.to_dict(), "n_supervised": len(labeled)},
        "phase2": {k: v for k, v in phase2.items() if k != "pseudo_labels"},
        "phase3": {"eval": phase3.eval.to_dict(), "n_supervised": len(labeled) + len(pseudo)},
    }
    _write_json(os.path.join(out, "distill.json"), summary)
    return DistillResult(phase1, phase3, len(pseudo), n_boxes, precision, summary)

"""Experiment configuration: strict JSON, unknown keys rejected."""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field, fields, replace
from typing import Any, Dict, Optional

from ..detector import DetectorConfig
from ..scenes import SceneError, SceneSpec
from ..sspl import SsplConfig
from ..trainer import HyperParams, LossToggles, Schedule


class ConfigError(ValueError):
    """Invalid experiment configuration."""


@dataclass(frozen=True)
class Toggles:
    """Which proposal-learning pieces a run enables."""

    self_loc: bool = False
    self_cont: bool = False
    cons_cls: bool = False
    cons_reg: bool = False
    labeled_pl: bool = False
    fswa: bool = False
    distill: bool = False

    def losses(self) -> LossToggles:
        return LossToggles(self.self_loc, self.self_cont, self.cons_cls, self.cons_reg)

    @property
    def is_baseline(self) -> bool:
        return not any(asdict(self).values())

    def label(self) -> str:
        on = [f.name for f in fields(self) if getattr(self, f.name)]
        return "+".join(on) if on else "baseline"


@dataclass(frozen=True)
class ExperimentConfig:
    scenes: SceneSpec = field(default_factory=SceneSpec)
    n_labeled: int = 50
    n_unlabeled: int = 500
    n_test: int = 200
    data_seed: int = 1000
    test_seed: int = 2000
    hyper: HyperParams = field(default_factory=HyperParams)
    toggles: Toggles = field(default_factory=Toggles)
    schedule: Schedule = field(default_factory=Schedule)
    detector: DetectorConfig = field(default_factory=DetectorConfig)
    sspl: SsplConfig = field(default_factory=SsplConfig)
    seed: Optional[int] = None
    out_dir: str = "runs/default"
    eval_score_thresh: float = 0.05
    nms_iou: float = 0.5
    distill_score_thresh: float = 0.9

    def validate(self) -> "ExperimentConfig":
        if self.n_labeled < 1:
            raise ConfigError("n_labeled must be >= 1")
        if self.n_unlabeled < 0 or self.n_test < 1:
            raise ConfigError("pool sizes must be non-negative and n_test >= 1")
        if self.detector.num_classes != self.scenes.num_classes:
            raise ConfigError("detector.num_classes must match the number of scene shapes")
        if self.detector.fc_dim != self.sspl.feature_dim:
            raise ConfigError("sspl.feature_dim must equal detector.fc_dim")
        if self.schedule.epochs < 1 or self.schedule.steps_per_epoch < 1:
            raise ConfigError("schedule needs at least one epoch and one step")
        if self.toggles.fswa and not 1 <= self.schedule.fswa_epochs <= self.schedule.epochs:
            raise ConfigError("fswa_epochs must be in [1, epochs]")
        if self.seed is not None and (not isinstance(self.seed, int) or self.seed < 0):
            raise ConfigError("seed must be a non-negative integer")
        for name in ("eval_score_thresh", "nms_iou"):
            if not 0.0 <= getattr(self, name) <= 1.0:
                raise ConfigError(f"{name} must be in [0, 1]")
        if not 0.0 <= self.distill_score_thresh <= 1.0:
            raise ConfigError("distill_score_thresh must be in [0, 1]")
        return self

    def hyper_params(self) -> HyperParams:
        """Hyperparameters with labeled-image proposal learning taken from the toggles."""
        return replace(self.hyper, labeled_pl=self.toggles.labeled_pl)

    def with_toggles(self, toggles: Toggles, **changes) -> "ExperimentConfig":
        return replace(self, toggles=toggles, **changes)

    def to_dict(self) -> Dict[str, Any]:
        hyper = self.hyper.to_dict()
        hyper.pop("labeled_pl")
        return {
            "scenes": self.scenes.to_dict(),
            "n_labeled": self.n_labeled,
            "n_unlabeled": self.n_unlabeled,
            "n_test": self.n_test,
            "data_seed": self.data_seed,
            "test_seed": self.test_seed,
            "hyper": hyper,
            "toggles": asdict(self.toggles),
            "schedule": self.schedule.to_dict(),
            "detector": self.detector.to_dict(),
            "sspl": self.sspl.to_dict(),
            "seed": self.seed,
            "out_dir": self.out_dir,
            "eval_score_thresh": self.eval_score_thresh,
            "nms_iou": self.nms_iou,
            "distill_score_thresh": self.distill_score_thresh,
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True)

    @classmethod
    def from_dict(cls, d: Dict[str, Any]) -> "ExperimentConfig":
        if not isinstance(d, dict):
            raise ConfigError("config must be a JSON object")
        extra = set(d) - {f.name for f in fields(cls)}
        if extra:
            raise ConfigError(f"unknown config keys {sorted(extra)}")
        kw = dict(d)
        try:
            if "scenes" in kw:
                kw["scenes"] = SceneSpec.from_dict(kw["scenes"])
            if "hyper" in kw:
                if "labeled_pl" in kw["hyper"]:
                    raise ConfigError("hyper.labeled_pl is derived from toggles.labeled_pl")
                kw["hyper"] = HyperParams.from_dict(kw["hyper"])
            if "toggles" in kw:
                t = kw["toggles"]
                unknown = set(t) - {f.name for f in fields(Toggles)}
                if unknown:
                    raise ConfigError(f"unknown toggle keys {sorted(unknown)}")
                if not all(isinstance(v, bool) for v in t.values()):
                    raise ConfigError("toggles must be booleans")
                kw["toggles"] = Toggles(**t)
            if "schedule" in kw:
                kw["schedule"] = Schedule.from_dict(kw["schedule"])
            if "detector" in kw:
                kw["detector"] = DetectorConfig.from_dict(kw["detector"])
            if "sspl" in kw:
                kw["sspl"] = SsplConfig.from_dict(kw["sspl"])
            cfg = cls(**kw)
        except ConfigError:
            raise
        except (TypeError, ValueError, SceneError) as exc:
            raise ConfigError(str(exc)) from exc
        return cfg.validate()

    @classmethod
    def from_json(cls, text: str) -> "ExperimentConfig":
        try:
            data = json.loads(text)
        except json.JSONDecodeError as exc:
            raise ConfigError(f"malformed JSON: {exc}") from exc
        return cls.from_dict(data)

    @classmethod
    def load(cls, path: str) -> "ExperimentConfig":
        try:
            with open(path) as fh:
                return cls.from_json(fh.read())
        except OSError as exc:
            raise ConfigError(f"cannot read config {path}: {exc}") from exc


def apply_override(cfg: ExperimentConfig, assignment: str) -> ExperimentConfig:
    """Apply ``dotted.key=json_value`` to a config, revalidating the result."""
    if "=" not in assignment:
        raise ConfigError(f"override {assignment!r} is not key=value")
    key, raw = assignment.split("=", 1)
    try:
        value = json.loads(raw)
    except json.JSONDecodeError:
        value = raw
    d = cfg.to_dict()
    node = d
    parts = key.split(".")
    for p in parts[:-1]:
        if not isinstance(node.get(p), dict):
            raise ConfigError(f"unknown config key {key!r}")
        node = node[p]
    if parts[-1] not in node:
        raise ConfigError(f"unknown config key {key!r}")
    node[parts[-1]] = value
    return ExperimentConfig.from_dict(d)

"""Synthetic labeled/unlabeled scene pools of flat-colored shapes on noise."""

from __future__ import annotations

import json
import os
from dataclasses import dataclass, field, replace
from typing import List, Optional, Sequence, Tuple

import numpy as np

from . import boxes as bx

SHAPES = ("rectangle", "disk", "triangle")

DEFAULT_PALETTE = (
    (0.90, 0.20, 0.20),
    (0.20, 0.75, 0.25),
    (0.20, 0.35, 0.90),
    (0.95, 0.85, 0.20),
    (0.85, 0.30, 0.85),
    (0.15, 0.80, 0.85),
)


class SceneError(ValueError):
    pass


@dataclass(frozen=True)
class SceneSpec:
    image_size: int = 64
    count_range: Tuple[int, int] = (1, 4)
    shapes: Tuple[str, ...] = SHAPES
    palette: Tuple[Tuple[float, float, float], ...] = DEFAULT_PALETTE
    noise_level: float = 0.2
    size_range: Tuple[int, int] = (8, 16)
    max_overlap: float = 0.3
    retries: int = 200

    def __post_init__(self):
        lo, hi = self.count_range
        if lo < 0 or hi < lo:
            raise SceneError(f"empty object count range {self.count_range}")
        if len(self.shapes) < 2:
            raise SceneError("need at least two shape classes")
        unknown = set(self.shapes) - set(SHAPES)
        if unknown:
            raise SceneError(f"unknown shapes {sorted(unknown)}")
        if self.image_size < 32:
            raise SceneError("image_size must be >= 32")
        if self.size_range[0] < 8 or self.size_range[1] < self.size_range[0]:
            raise SceneError("objects need >= 8 px extent")
        if self.size_range[1] > self.image_size:
            raise SceneError("objects larger than the image")
        if not self.palette:
            raise SceneError("empty palette")

    @property
    def num_classes(self) -> int:
        return len(self.shapes)

    def to_dict(self) -> dict:
        return {
            "image_size": self.image_size,
            "count_range": list(self.count_range),
            "shapes": list(self.shapes),
            "palette": [list(c) for c in self.palette],
            "noise_level": self.noise_level,
            "size_range": list(self.size_range),
            "max_overlap": self.max_overlap,
            "retries": self.retries,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "SceneSpec":
        known = set(cls.__dataclass_fields__)
        extra = set(d) - known
        if extra:
            raise SceneError(f"unknown scene keys {sorted(extra)}")
        kw = dict(d)
        for key in ("count_range", "size_range", "shapes"):
            if key in kw:
                kw[key] = tuple(kw[key])
        if "palette" in kw:
            kw["palette"] = tuple(tuple(float(v) for v in c) for c in kw["palette"])
        return cls(**kw)


@dataclass
class GroundTruth:
    boxes: np.ndarray
    classes: np.ndarray

    def __post_init__(self):
        self.boxes = bx.as_boxes(self.boxes)
        self.classes = np.asarray(self.classes, dtype=np.int64).reshape(-1)
        if len(self.boxes) != len(self.classes):
            raise ValueError("boxes and classes differ in length")
        if np.any(self.boxes[:, 2:] <= 0):
            raise ValueError("ground-truth boxes need positive size")

    def __len__(self):
        return len(self.classes)


@dataclass
class Example:
    image: np.ndarray
    width: int
    height: int
    truth: Optional[GroundTruth]
    id: int
    seed: int = 0
    meta: dict = field(default_factory=dict)

    @property
    def labeled(self) -> bool:
        return self.truth is not None


def _render(canvas: np.ndarray, shape: str, box, color) -> None:
    x, y, w, h = (int(v) for v in box)
    yy, xx = np.mgrid[y:y + h, x:x + w] + 0.5
    if shape == "rectangle":
        mask = np.ones((h, w), dtype=bool)
    elif shape == "disk":
        cx, cy = x + w / 2, y + h / 2
        mask = ((xx - cx) / (w / 2)) ** 2 + ((yy - cy) / (h / 2)) ** 2 <= 1.0
    else:
        # apex at top-centre, base along the bottom edge
        t = (yy - y) / h
        mask = np.abs(xx - (x + w / 2)) <= t * w / 2
    region = canvas[:, y:y + h, x:x + w]
    region[:, mask] = np.asarray(color, dtype=np.float64)[:, None]


def _background(rng: np.random.Generator, size: int, level: float) -> np.ndarray:
    base = rng.uniform(0.3, 0.6)
    # coarse texture upsampled from an 8x8 grid plus fine pixel noise
    coarse = rng.normal(0.0, level, size=(3, 8, 8))
    rep = size // 8 + 1
    texture = np.kron(coarse, np.ones((1, rep, rep)))[:, :size, :size]
    fine = rng.normal(0.0, level, size=(3, size, size))
    return np.clip(base + texture + fine, 0.0, 1.0)


def _place(rng: np.random.Generator, spec: SceneSpec, count: int) -> List[np.ndarray]:
    S = spec.image_size
    placed: List[np.ndarray] = []
    for _ in range(count):
        for _ in range(spec.retries):
            w = int(rng.integers(spec.size_range[0], spec.size_range[1] + 1))
            h = int(np.clip(round(w * rng.uniform(0.8, 1.25)), spec.size_range[0],
                            spec.size_range[1]))
            x = int(rng.integers(0, S - w + 1))
            y = int(rng.integers(0, S - h + 1))
            cand = np.array([x, y, w, h], dtype=np.float64)
            if not placed or bx.iou_matrix(cand, np.array(placed)).max() <= spec.max_overlap:
                placed.append(cand)
                break
        else:
            raise SceneError(f"could not place {count} objects in a {S}x{S} image")
    return placed


def generate_example(spec: SceneSpec, seed: int, labeled: bool, example_id: int = 0) -> Example:
    """Render one scene; a pure function of ``(spec, seed)`` apart from the
    presence of the truth, which is kept only when ``labeled``."""
    rng = np.random.default_rng(seed)
    S = spec.image_size
    image = _background(rng, S, spec.noise_level)
    count = int(rng.integers(spec.count_range[0], spec.count_range[1] + 1))
    placed = _place(rng, spec, count)
    classes = rng.integers(0, len(spec.shapes), size=count)
    colors = rng.integers(0, len(spec.palette), size=count)
    for box, c, col in zip(placed, classes, colors):
        _render(image, spec.shapes[c], box, spec.palette[col])
    truth = GroundTruth(np.array(placed).reshape(-1, 4), classes) if labeled else None
    return Example(image=image, width=S, height=S, truth=truth, id=example_id, seed=int(seed))


def hidden_truth(spec: SceneSpec, example: Example) -> GroundTruth:
    """The truth of an unlabeled example, regenerated from its seed."""
    return generate_example(spec, example.seed, labeled=True, example_id=example.id).truth


def _example_seed(pool_seed: int, example_id: int) -> int:
    return int(np.random.SeedSequence([pool_seed, example_id]).generate_state(1)[0])


def make_pools(spec: SceneSpec, n_labeled: int, n_unlabeled: int, seed: int,
               first_id: int = 0) -> Tuple[List[Example], List[Example]]:
    """Labeled and unlabeled pools with disjoint, consecutive ids."""
    if n_labeled < 1:
        raise SceneError("n_labeled must be >= 1")
    labeled = [generate_example(spec, _example_seed(seed, i), True, i)
               for i in range(first_id, first_id + n_labeled)]
    start = first_id + n_labeled
    unlabeled = [generate_example(spec, _example_seed(seed, i), False, i)
                 for i in range(start, start + n_unlabeled)]
    return labeled, unlabeled


def flip_example(e: Example) -> Example:
    truth = None
    if e.truth is not None:
        truth = GroundTruth(bx.flip(e.truth.boxes, e.width), e.truth.classes.copy())
    return replace(e, image=e.image[:, :, ::-1].copy(), truth=truth)


def export_pool(examples: Sequence[Example], directory: str) -> None:
    """Write raw little-endian float64 images plus an ``index.json``."""
    os.makedirs(directory, exist_ok=True)
    index = []
    for e in examples:
        fname = f"{e.id:08d}.bin"
        with open(os.path.join(directory, fname), "wb") as fh:
            fh.write(np.ascontiguousarray(e.image, dtype="<f8").tobytes())
        index.append({
            "id": int(e.id),
            "labeled": e.truth is not None,
            "boxes": e.truth.boxes.tolist() if e.truth is not None else [],
            "classes": e.truth.classes.tolist() if e.truth is not None else [],
            "width": int(e.width),
            "height": int(e.height),
            "channels": int(e.image.shape[0]),
            "seed": int(e.seed),
            "file": fname,
        })
    with open(os.path.join(directory, "index.json"), "w") as fh:
        json.dump(index, fh, indent=1)


def import_pool(directory: str) -> List[Example]:
    with open(os.path.join(directory, "index.json")) as fh:
        index = json.load(fh)
    out = []
    for rec in index:
        with open(os.path.join(directory, rec["file"]), "rb") as fh:
            raw = np.frombuffer(fh.read(), dtype="<f8")
        image = raw.reshape(rec.get("channels", 3), rec["height"], rec["width"]).astype(np.float64)
        truth = GroundTruth(np.array(rec["boxes"], dtype=np.float64).reshape(-1, 4),
                            rec["classes"]) if rec["labeled"] else None
        out.append(Example(image=image, width=rec["width"], height=rec["height"], truth=truth,
                           id=rec["id"], seed=rec.get("seed", 0)))
    return out

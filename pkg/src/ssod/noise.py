"""DropBlock and SpatialDropout noise on proposal convolutional feature maps."""

from __future__ import annotations

from dataclasses import asdict, dataclass
from functools import lru_cache
from typing import List, Sequence, Tuple

import numpy as np
from scipy.optimize import brentq

from . import autograd as ag
from .autograd import Tensor

KINDS = ("dropblock", "spatial_dropout")


@dataclass(frozen=True)
class NoiseSpec:
    kind: str
    block_size: int = 2
    drop_prob: float = 0.1
    channel_ratio: float = 1.0 / 16
    rescale: bool = True

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ValueError(f"unknown noise kind {self.kind!r}")
        if not 0.0 <= self.drop_prob < 1.0:
            raise ValueError("drop_prob must be in [0, 1)")
        if not 0.0 <= self.channel_ratio <= 1.0:
            raise ValueError("channel_ratio must be in [0, 1]")
        if self.block_size < 1:
            raise ValueError("block_size must be >= 1")

    def validate_for(self, shape: Tuple[int, int, int]) -> None:
        if self.kind == "dropblock" and self.block_size > min(shape[1], shape[2]):
            raise ValueError(f"block size {self.block_size} exceeds map {shape[1:]}")

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "NoiseSpec":
        extra = set(d) - set(cls.__dataclass_fields__)
        if extra:
            raise ValueError(f"unknown noise keys {sorted(extra)}")
        return cls(**d)


def default_specs() -> List[NoiseSpec]:
    return [NoiseSpec("dropblock", block_size=2), NoiseSpec("spatial_dropout", channel_ratio=1 / 16)]


def _coverage(H: int, W: int, b: int) -> np.ndarray:
    """Number of valid b x b block positions covering each cell."""
    rows = np.array([min(i, H - b) - max(0, i - b + 1) + 1 for i in range(H)])
    cols = np.array([min(j, W - b) - max(0, j - b + 1) + 1 for j in range(W)])
    return rows[:, None] * cols[None]


@lru_cache(maxsize=256)
def block_rate(H: int, W: int, b: int, p: float) -> float:
    """Per-position block rate whose expected dropped-cell fraction is exactly ``p``.

    Overlapping blocks make the usual p*A/(b^2*A_valid) rate undershoot on
    small maps, so the rate is solved from the exact coverage expression
    mean(1 - (1 - rate)^coverage) = p.
    """
    if p <= 0.0:
        return 0.0
    m = _coverage(H, W, b)

    def dropped(rate):
        return float(np.mean(1.0 - (1.0 - rate) ** m)) - p

    return float(brentq(dropped, 0.0, 1.0, xtol=1e-14))


def dropblock_mask(shape: Tuple[int, int, int], spec: NoiseSpec, rng: np.random.Generator
                   ) -> np.ndarray:
    """Spatial keep-mask (H, W) of zeros on a union of b x b blocks."""
    _, H, W = shape
    b = spec.block_size
    rate = block_rate(H, W, b, spec.drop_prob)
    starts = rng.random((H - b + 1, W - b + 1)) < rate
    drop = np.zeros((H, W), dtype=bool)
    for i, j in zip(*np.nonzero(starts)):
        drop[i:i + b, j:j + b] = True
    return ~drop


def noise_mask(shape: Tuple[int, int, int], spec: NoiseSpec, rng: np.random.Generator
               ) -> np.ndarray:
    """Multiplicative (C, H, W) mask, including the rescale factor."""
    spec.validate_for(shape)
    C, H, W = shape
    if spec.kind == "dropblock":
        keep = dropblock_mask(shape, spec, rng)
        kept = keep.mean()
        mask = np.broadcast_to(keep[None].astype(np.float64), shape).copy()
    else:
        keep = rng.random(C) >= spec.channel_ratio
        kept = keep.mean()
        mask = np.broadcast_to(keep[:, None, None].astype(np.float64), shape).copy()
    if spec.rescale and 0.0 < kept < 1.0:
        mask *= 1.0 / kept
    return mask


def perturb(fconv, spec: NoiseSpec, seed) -> Tensor:
    """One noisy copy of a (C, H, W) proposal map; masks are graph constants."""
    x = fconv if isinstance(fconv, Tensor) else ag.tensor(fconv)
    mask = noise_mask(x.shape, spec, np.random.default_rng(seed))
    return ag.mul(x, mask)


def variant_seed(seed: int, proposal_id: int, k: int) -> list:
    return [int(seed), int(proposal_id), int(k)]


def make_noisy_set(fconv, specs: Sequence[NoiseSpec], K: int, seed: int,
                   proposal_id: int = 0) -> List[Tensor]:
    """K noisy variants; variant k uses ``specs[k % len(specs)]``."""
    if K < 1:
        raise ValueError("K must be >= 1")
    if not specs:
        raise ValueError("need at least one noise spec")
    return [perturb(fconv, specs[k % len(specs)], variant_seed(seed, proposal_id, k))
            for k in range(K)]


def noisy_masks(shape: Tuple[int, int, int], proposal_ids: Sequence[int],
                specs: Sequence[NoiseSpec], K: int, seed: int) -> np.ndarray:
    """Masks (N, K, C, H, W) matching :func:`make_noisy_set` for each proposal id."""
    if K < 1:
        raise ValueError("K must be >= 1")
    out = np.empty((len(proposal_ids), K) + tuple(shape))
    for n, pid in enumerate(proposal_ids):
        for k in range(K):
            rng = np.random.default_rng(variant_seed(seed, pid, k))
            out[n, k] = noise_mask(shape, specs[k % len(specs)], rng)
    return out

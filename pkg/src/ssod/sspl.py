"""Self-supervised proposal learning: location prediction and instance discrimination."""

from __future__ import annotations

import logging
from dataclasses import asdict, dataclass
from typing import Dict, Optional, Tuple

import numpy as np

from . import autograd as ag
from .autograd import Tensor

logger = logging.getLogger(__name__)

Params = Dict[str, Tensor]


@dataclass(frozen=True)
class SsplConfig:
    feature_dim: int = 128
    loc_hidden: int = 64
    embed_dim: int = 32

    def __post_init__(self):
        if self.loc_hidden < 2 or self.embed_dim < 2:
            raise ValueError("head widths must be >= 2")

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "SsplConfig":
        extra = set(d) - set(cls.__dataclass_fields__)
        if extra:
            raise ValueError(f"unknown sspl keys {sorted(extra)}")
        return cls(**d)


def init_sspl_params(cfg: SsplConfig, rng: np.random.Generator) -> Params:
    D, Hl, De = cfg.feature_dim, cfg.loc_hidden, cfg.embed_dim
    p = {
        "self_loc.fc1.w": ag.parameter(rng.normal(0, np.sqrt(2.0 / D), size=(D, Hl))),
        "self_loc.fc1.b": ag.parameter(np.zeros(Hl)),
        "self_loc.fc2.w": ag.parameter(rng.normal(0, 0.01, size=(Hl, 4))),
        "self_loc.fc2.b": ag.parameter(np.zeros(4)),
        "self_cont.fc.w": ag.parameter(rng.normal(0, np.sqrt(1.0 / D), size=(D, De))),
        "self_cont.fc.b": ag.parameter(np.zeros(De)),
    }
    for name, t in p.items():
        t.name = name
    return p


def normalize_box(box, width: float, height: float) -> np.ndarray:
    """(x / W, y / H, w / W, h / H) for one box or an (N, 4) array."""
    if width <= 0 or height <= 0:
        raise ValueError("image dimensions must be positive")
    b = np.asarray(box, dtype=np.float64)
    return b / np.array([width, height, width, height], dtype=np.float64)


def location_forward(features: Tensor, params: Params) -> Tensor:
    h = ag.relu(ag.linear(features, params["self_loc.fc1.w"], params["self_loc.fc1.b"]))
    return ag.sigmoid(ag.linear(h, params["self_loc.fc2.w"], params["self_loc.fc2.b"]))


def _sq_dist(a: Tensor, target: np.ndarray) -> Tensor:
    d = a - target
    return ag.sum(d * d, axis=-1)


def location_loss(pred: Tensor, noisy: Optional[Tensor], target) -> Tensor:
    """Mean squared l2 distance of the original and K noisy location
    predictions to the normalized proposal box, averaged over proposals.

    Shapes: ``pred`` (N, 4), ``noisy`` (N, K, 4) or None, ``target`` (N, 4).
    Single-proposal inputs (4,), (K, 4), (4,) are accepted too.
    """
    target = np.asarray(target, dtype=np.float64)
    if pred.ndim == 1:
        pred = pred.reshape(1, 4)
        noisy = None if noisy is None else noisy.reshape(1, -1, 4)
        target = target.reshape(1, 4)
    if pred.shape[-1] != 4 or target.shape[-1] != 4:
        raise ValueError("location predictions need 4 components")
    total = _sq_dist(pred, target)
    K = 0
    if noisy is not None and noisy.shape[1] > 0:
        if noisy.shape[-1] != 4:
            raise ValueError("location predictions need 4 components")
        K = noisy.shape[1]
        total = total + ag.sum(_sq_dist(noisy, target[:, None, :]), axis=1)
    return ag.mean(total) * (1.0 / (K + 1))


def embed_forward(features: Tensor, params: Params, eps: float = 1e-12,
                  return_flags: bool = False):
    """Project and l2-normalize.  Rows whose projection norm is below ``eps``
    get ``eps`` added to the denominator and are flagged."""
    z = ag.linear(features, params["self_cont.fc.w"], params["self_cont.fc.b"])
    flags = ag.tiny_norm_rows(z, eps=eps)
    if flags.any():
        logger.warning("%d embedding(s) with near-zero norm", int(flags.sum()))
    out = ag.l2_normalize(z, axis=-1, eps=eps)
    return (out, flags) if return_flags else out


def contrastive_loss(emb: Tensor, noisy_emb: Tensor, tau: float, reduce: str = "mean") -> Tensor:
    """Instance discrimination of noisy embeddings against the image's proposals.

    ``emb`` is (N, D), ``noisy_emb`` (N, K, D), all unit-norm.  For proposal n
    the term is -(1/K) sum_k log softmax_{n'}(noisy[n, k] . emb[n'] / tau)[n].
    ``reduce="none"`` returns the (N,) per-proposal terms.
    """
    if tau <= 0:
        raise ValueError("tau must be positive")
    N, K, D = noisy_emb.shape
    if emb.shape != (N, D):
        raise ValueError(f"embedding shapes {emb.shape} and {noisy_emb.shape} disagree")
    sims = ag.matmul(noisy_emb.reshape(N * K, D), emb.T) * (1.0 / tau)
    logp = ag.log_softmax(sims, axis=-1)
    own = np.repeat(np.arange(N), K)
    picked = logp[np.arange(N * K), own].reshape(N, K)
    terms = -ag.mean(picked, axis=1)
    if reduce == "none":
        return terms
    return ag.mean(terms)


def sspl_loss(loc: Tensor, cont: Tensor, w_loc: float = 0.25, w_cont: float = 1.0) -> Tensor:
    return loc * w_loc + cont * w_cont


def sspl_components(feats: Tensor, noisy_feats: Tensor, targets: np.ndarray, params: Params,
                    tau: float, use_loc: bool = True, use_cont: bool = True
                    ) -> Tuple[Optional[Tensor], Optional[Tensor]]:
    """Location and contrastive losses for N proposals with K noisy copies each.

    ``feats`` (N, D), ``noisy_feats`` (N, K, D), ``targets`` (N, 4) normalized boxes.
    Either component is None when disabled.
    """
    N, K, D = noisy_feats.shape
    both = ag.concat([feats, noisy_feats.reshape(N * K, D)], axis=0)
    loc = cont = None
    if use_loc:
        L = location_forward(both, params)
        loc = location_loss(L[:N], L[N:].reshape(N, K, 4), targets)
    if use_cont:
        E = embed_forward(both, params)
        cont = contrastive_loss(E[:N], E[N:].reshape(N, K, -1), tau)
    return loc, cont

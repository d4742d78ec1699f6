"""Consistency between original and noisy proposal predictions.

The original predictions are detached: gradients reach only the noisy branch.
"""

from __future__ import annotations

import numpy as np

from . import autograd as ag
from .autograd import Tensor

LOG_FLOOR = 1e-12


def _check_simplex(p: np.ndarray, what: str, tol: float = 1e-6) -> None:
    if np.any(p < 0) or np.any(np.abs(p.sum(axis=-1) - 1.0) > tol):
        raise ValueError(f"{what} is not on the probability simplex")


def cls_consistency(probs: Tensor, noisy_probs: Tensor, reduce: str = "mean") -> Tensor:
    """Mean over k of KL(probs || noisy_probs[:, k]), averaged over proposals.

    ``probs`` (N, C) or (C,); ``noisy_probs`` (N, K, C) or (K, C).
    """
    if probs.ndim == 1:
        probs = probs.reshape(1, -1)
        noisy_probs = noisy_probs.reshape(1, *noisy_probs.shape)
    _check_simplex(probs.data, "original prediction")
    _check_simplex(noisy_probs.data, "noisy prediction")
    p = ag.detach(probs).data[:, None, :]
    plogp = np.where(p > 0, p * np.log(np.maximum(p, LOG_FLOOR)), 0.0)
    logq = ag.log(noisy_probs, clamp_min=LOG_FLOOR)
    kl = ag.sum(ag.tensor(plogp) - logq * p, axis=-1)  # (N, K)
    terms = ag.mean(kl, axis=1)
    return terms if reduce == "none" else ag.mean(terms)


def reg_consistency(deltas: Tensor, noisy_deltas: Tensor, reduce: str = "mean") -> Tensor:
    """min over k of summed smooth-l1(deltas - noisy_deltas[:, k]), averaged over proposals.

    Only the minimizing k receives gradient; ties go to the smallest k.
    ``deltas`` (N, 4) or (4,); ``noisy_deltas`` (N, K, 4) or (K, 4).
    """
    if deltas.ndim == 1:
        deltas = deltas.reshape(1, -1)
        noisy_deltas = noisy_deltas.reshape(1, *noisy_deltas.shape)
    if deltas.shape[-1] != 4 or noisy_deltas.shape[-1] != 4 or noisy_deltas.shape[0] != deltas.shape[0]:
        raise ValueError(f"regression shapes {deltas.shape} and {noisy_deltas.shape} disagree")
    target = ag.detach(deltas).data[:, None, :]
    per_k = ag.sum(ag.smooth_l1(noisy_deltas - target), axis=-1)  # (N, K)
    best = np.argmin(per_k.data, axis=1)
    terms = per_k[np.arange(per_k.shape[0]), best]
    return terms if reduce == "none" else ag.mean(terms)


def consistency_loss(probs: Tensor, deltas: Tensor, noisy_probs: Tensor, noisy_deltas: Tensor,
                     w_cls: float = 1.0, w_reg: float = 0.5) -> Tensor:
    """Weighted sum of :func:`cls_consistency` and :func:`reg_consistency`."""
    total = ag.tensor(0.0)
    if w_cls:
        total = total + cls_consistency(probs, noisy_probs) * w_cls
    if w_reg:
        total = total + reg_consistency(deltas, noisy_deltas) * w_reg
    return total

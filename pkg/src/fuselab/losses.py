"""Training objectives: binary cross-entropy and large-margin cosine loss.

Both return a scalar tensor differentiable through the autodiff graph.
LMCL follows the CosFace formulation: cross-entropy over scaled cosines with
a margin subtracted from the true class's cosine. The cosine is taken between
the L2-normalized feature and L2-normalized learnable class anchors, so the
loss is invariant to positive rescaling of the raw feature.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np

from fuselab import tensor as T
from fuselab.errors import ContractError
from fuselab.tensor import Tensor

PROB_CLAMP = 1e-12

DEFAULT_LMCL_S = 30.0
DEFAULT_LMCL_M = 0.35


@dataclass
class LmclParams:
    """Scale, margin and learnable class anchor vectors (k, d)."""

    s: float
    m: float
    class_weights: Tensor

    def __post_init__(self):
        if self.s <= 0:
            raise ContractError(f"lmcl: scale s must be positive, got {self.s}")
        if not 0.0 <= self.m < 1.0:
            raise ContractError(f"lmcl: margin m must be in [0, 1), got {self.m}")
        if self.class_weights.ndim != 2:
            raise ContractError(f"lmcl: class_weights must be (k, d), got shape {self.class_weights.shape}")


def _check_labels(labels: Sequence[int], n: int, name: str) -> list[int]:
    labels = list(labels)
    if len(labels) != n:
        raise ContractError(f"{name}: {len(labels)} labels for {n} samples")
    for y in labels:
        if y not in (0, 1):
            raise ContractError(f"{name}: label {y!r} outside {{0, 1}}")
    return labels


def bce_loss(probs: Tensor, labels: Sequence[int]) -> Tensor:
    """Mean over the batch of -log p(true class), probabilities pre-clamped."""
    if probs.ndim != 2 or probs.shape[1] != 2:
        raise ContractError(f"bce_loss: probs must be (batch, 2), got shape {probs.shape}")
    labels = _check_labels(labels, probs.shape[0], "bce_loss")
    p_true = T.gather_rows(T.clip(probs, PROB_CLAMP, 1.0 - PROB_CLAMP), labels)
    return T.scale(T.mean_all(T.log(p_true)), -1.0)


def cosine_logits(features: Tensor, params: LmclParams) -> Tensor:
    """s * cos(theta_j) between normalized features (N, d) and class anchors."""
    fn = T.l2_normalize_rows(features)
    wn = T.l2_normalize_rows(params.class_weights)
    return T.scale(T.matmul(fn, T.transpose(wn)), params.s)


def softmax_cross_entropy(logits: Tensor, labels: Sequence[int]) -> Tensor:
    """Mean of -log softmax(logits)[true class]."""
    labels = _check_labels(labels, logits.shape[0], "softmax_cross_entropy")
    return T.scale(T.mean_all(T.gather_rows(T.log_softmax(logits), labels)), -1.0)


def lmcl_loss(features: Tensor, params: LmclParams, labels: Sequence[int]) -> Tensor:
    """Large-margin cosine loss over a batch of feature vectors (N, d)."""
    if features.ndim != 2:
        raise ContractError(f"lmcl_loss: features must be (batch, d), got shape {features.shape}")
    labels = _check_labels(labels, features.shape[0], "lmcl_loss")
    k = params.class_weights.shape[0]
    logits = cosine_logits(features, params)
    margin = np.zeros((features.shape[0], k))
    margin[np.arange(features.shape[0]), labels] = params.s * params.m
    logits = T.sub(logits, Tensor(margin))
    return softmax_cross_entropy(logits, labels)

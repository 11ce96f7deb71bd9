"""Centered kernel alignment between branch features and attention weights.

Linear-kernel CKA with the biased HSIC estimator:

    HSIC(K, L) = tr(K H L H) / (m - 1)^2,   H = I - (1/m) 11^T
    CKA(K, L)  = HSIC(K, L) / sqrt(HSIC(K, K) HSIC(L, L))

Features are not mean-centered before the Gram product — the centering
lives entirely inside HSIC. Scores land in [0, 1] by Cauchy-Schwarz and
are invariant to isotropic scaling and orthogonal transforms of either
feature set.
"""

from __future__ import annotations

import io
from dataclasses import dataclass

import numpy as np

from .autodiff import Tensor

__all__ = [
    "DegenerateFeaturesError",
    "gram",
    "hsic",
    "cka",
    "CkaMatrix",
    "importance_matrix",
]


class DegenerateFeaturesError(ValueError):
    """Constant features have zero self-HSIC; CKA is undefined for them."""


def gram(features: np.ndarray) -> np.ndarray:
    """Linear-kernel Gram matrix X X^T of an [m, d] feature batch."""
    x = np.asarray(features, dtype=np.float64)
    if x.ndim != 2:
        raise ValueError(f"feature batch must be 2-D, got shape {x.shape}")
    if x.shape[0] < 2:
        raise ValueError("need at least 2 samples")
    if not np.isfinite(x).all():
        raise ValueError("non-finite feature values")
    return x @ x.T


def hsic(k: np.ndarray, l: np.ndarray) -> float:
    """Biased Hilbert-Schmidt independence criterion of two Gram matrices."""
    k = np.asarray(k, dtype=np.float64)
    l = np.asarray(l, dtype=np.float64)
    if k.shape != l.shape or k.ndim != 2 or k.shape[0] != k.shape[1]:
        raise ValueError(f"need equal square matrices, got {k.shape} / {l.shape}")
    m = k.shape[0]
    centering = np.eye(m) - np.ones((m, m)) / m
    return float(np.trace(k @ centering @ l @ centering) / (m - 1) ** 2)


def cka(k: np.ndarray, l: np.ndarray) -> float:
    """Normalized HSIC ratio in [0, 1]; symmetric in its arguments."""
    cross = hsic(k, l)
    self_k = hsic(k, k)
    self_l = hsic(l, l)
    if self_k <= 0.0 or self_l <= 0.0:
        raise DegenerateFeaturesError(
            "CKA undefined: a feature batch is constant across samples"
        )
    value = cross / np.sqrt(self_k * self_l)
    # Cauchy-Schwarz bounds the exact value; tolerate roundoff at the edges
    if not -1e-9 <= value <= 1.0 + 1e-9:
        raise ValueError(f"CKA {value} escaped [0, 1]")
    return float(min(max(value, 0.0), 1.0))


@dataclass
class CkaMatrix:
    """Per-(block, branch) similarity between branch features and weights."""

    scores: np.ndarray            # [blocks, branches] in [0, 1]
    block_labels: list[str]
    branch_labels: list[str]

    def to_csv(self) -> str:
        buf = io.StringIO()
        buf.write("block," + ",".join(self.branch_labels) + "\n")
        for label, row in zip(self.block_labels, self.scores):
            buf.write(label + "," + ",".join(f"{v:.6f}" for v in row) + "\n")
        return buf.getvalue()


def importance_matrix(model, images: np.ndarray, m: int) -> CkaMatrix:
    """CKA(branch features, attention weights) per block of a bridge model.

    Runs ``m`` samples through the model in eval mode, collects each
    block's projected branch statistics and its attention weights, and
    scores every branch against the weights.
    """
    if m < 2:
        raise ValueError("need at least 2 samples")
    if m > images.shape[0]:
        raise ValueError(f"asked for {m} samples but only {images.shape[0]} given")
    was_training = model.training
    model.eval()
    try:
        _, records = model.forward_collect(Tensor(images[:m]))
    finally:
        model.train(was_training)
    if not records:
        raise ValueError("model has no bridge attention blocks to analyze")
    branches = len(records[0]["branch_features"])
    scores = np.zeros((len(records), branches))
    for bi, record in enumerate(records):
        weight_gram = gram(record["weights"])
        for si, feats in enumerate(record["branch_features"]):
            scores[bi, si] = cka(gram(feats), weight_gram)
    return CkaMatrix(
        scores=scores,
        block_labels=[f"B{i + 1}" for i in range(len(records))],
        branch_labels=[f"S{i + 1}" for i in range(branches)],
    )

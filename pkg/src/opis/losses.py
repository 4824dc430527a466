"""Weighted refinement losses, the rescale factor, and the total objective.

Supervision weights are constants with respect to differentiation: gradients
flow only through the current branch's softmax scores, never into the
previous branch that produced the weights.
"""

from __future__ import annotations

from typing import Sequence

import numpy as np

from .midn import softmax_over_classes
from .supervision import SupervisionTargets

__all__ = ["zeta", "refinement_loss", "refinement_loss_grad", "total_loss", "LOG_CLAMP"]

# Softmax outputs can underflow; logs are clamped here.
LOG_CLAMP = 1e-12


def zeta(phase: str, n_total: int, n_selected: int) -> float:
    """Loss rescale factor: 1 normally, total/selected during fine-tuning."""
    if phase == "normal":
        return 1.0
    if phase != "finetune":
        raise ValueError(f"unknown phase {phase!r}")
    if n_selected < 1:
        raise ValueError("fine-tuning requires at least one selected instance")
    return n_total / n_selected


def refinement_loss(targets: SupervisionTargets, phi_k: np.ndarray, zeta_k: float) -> float:
    """Weighted cross-entropy of one branch against its assigned labels.

    Averaged over all proposals; ignored and deselected proposals contribute
    nothing because their weight is zero.
    """
    phi = np.asarray(phi_k, dtype=np.float64)
    if phi.shape != (targets.num_classes + 1, targets.num_proposals):
        raise ValueError(f"phi shape {phi.shape} does not match targets "
                         f"({targets.num_classes + 1}, {targets.num_proposals})")
    labeled = np.flatnonzero((targets.assigned_class > 0) & (targets.weight > 0.0))
    if labeled.size == 0:
        return 0.0
    picked = phi[targets.assigned_class[labeled] - 1, labeled]
    terms = targets.weight[labeled] * np.log(np.maximum(picked, LOG_CLAMP))
    return float(-zeta_k * terms.sum() / targets.num_proposals)


def refinement_loss_grad(targets: SupervisionTargets, phi_logits: np.ndarray, zeta_k: float) -> np.ndarray:
    """Gradient of refinement_loss with respect to the pre-softmax logits.

    Column r of the result is (zeta * w_r / P) * (softmax(logits_r) - onehot);
    weight-zero proposals give zero columns.
    """
    logits = np.asarray(phi_logits, dtype=np.float64)
    if logits.shape != (targets.num_classes + 1, targets.num_proposals):
        raise ValueError(f"logit shape {logits.shape} does not match targets "
                         f"({targets.num_classes + 1}, {targets.num_proposals})")
    coef = np.where(targets.assigned_class > 0, targets.weight, 0.0) * (zeta_k / targets.num_proposals)
    grad = softmax_over_classes(logits) * coef
    labeled = np.flatnonzero(coef > 0.0)
    grad[targets.assigned_class[labeled] - 1, labeled] -= coef[labeled]
    return grad


def total_loss(midn: float, refinement: Sequence[float]) -> float:
    """Total objective: image-classification loss plus all branch losses."""
    if len(refinement) < 1:
        raise ValueError("at least one refinement branch is required")
    return float(midn + sum(refinement))

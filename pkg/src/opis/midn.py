"""Dual-softmax instance scoring and the image-level classification loss.

Score matrices are laid out class-by-proposal: row c-1 holds class c, and the
background class C+1 is the last row of any (C+1, P) matrix.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

__all__ = [
    "SCORE_EPS",
    "ScoreSet",
    "softmax_over_classes",
    "softmax_over_instances",
    "compose_instance_scores",
    "image_scores",
    "midn_loss",
    "midn_loss_grad",
    "phi0_from_instance_scores",
]

# Clamp applied to image-level scores before taking logs.
SCORE_EPS = 1e-7


def _as_finite_matrix(x: np.ndarray, name: str) -> np.ndarray:
    m = np.asarray(x, dtype=np.float64)
    if m.ndim != 2:
        raise ValueError(f"{name} must be a 2-d matrix, got shape {m.shape}")
    if not np.all(np.isfinite(m)):
        raise ValueError(f"{name} contains non-finite entries")
    return m


def softmax_over_classes(logits: np.ndarray) -> np.ndarray:
    """Column-wise softmax: each proposal's scores sum to 1 across classes."""
    m = _as_finite_matrix(logits, "logits")
    z = m - m.max(axis=0, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=0, keepdims=True)


def softmax_over_instances(logits: np.ndarray) -> np.ndarray:
    """Row-wise softmax: each class's scores sum to 1 across proposals."""
    m = _as_finite_matrix(logits, "logits")
    z = m - m.max(axis=1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=1, keepdims=True)


def compose_instance_scores(class_probs: np.ndarray, det_probs: np.ndarray) -> np.ndarray:
    """Element-wise product of the two softmax streams."""
    sc = np.asarray(class_probs, dtype=np.float64)
    sd = np.asarray(det_probs, dtype=np.float64)
    if sc.shape != sd.shape:
        raise ValueError(f"stream shapes differ: {sc.shape} vs {sd.shape}")
    return sc * sd


def image_scores(instance_scores: np.ndarray) -> np.ndarray:
    """Per-class image-level score: sum of composed scores over proposals."""
    return np.asarray(instance_scores, dtype=np.float64).sum(axis=1)


def midn_loss(y_pred: np.ndarray, y_true: np.ndarray, eps: float = SCORE_EPS) -> float:
    """Multi-label binary cross-entropy over image-level class scores.

    Predictions are clamped into [eps, 1 - eps] before the logs, so the loss is
    finite for any input in [0, 1].
    """
    p = np.asarray(y_pred, dtype=np.float64)
    y = np.asarray(y_true, dtype=np.float64)
    if p.shape != y.shape:
        raise ValueError(f"prediction/label shapes differ: {p.shape} vs {y.shape}")
    pc = np.clip(p, eps, 1.0 - eps)
    return float(-(y * np.log(pc) + (1.0 - y) * np.log(1.0 - pc)).sum())


def midn_loss_grad(y_pred: np.ndarray, y_true: np.ndarray, eps: float = SCORE_EPS) -> np.ndarray:
    """d(midn_loss)/d(y_pred), zero where the clamp is active."""
    p = np.asarray(y_pred, dtype=np.float64)
    y = np.asarray(y_true, dtype=np.float64)
    if p.shape != y.shape:
        raise ValueError(f"prediction/label shapes differ: {p.shape} vs {y.shape}")
    pc = np.clip(p, eps, 1.0 - eps)
    g = (pc - y) / (pc * (1.0 - pc))
    return np.where((p < eps) | (p > 1.0 - eps), 0.0, g)


def phi0_from_instance_scores(instance_scores: np.ndarray) -> np.ndarray:
    """Supervision source for the first refinement branch.

    Copies the composed instance scores and appends an all-zero background row;
    columns are intentionally not renormalized (only relative order and the
    center score magnitude are consumed downstream).
    """
    x_r = np.asarray(instance_scores, dtype=np.float64)
    return np.vstack([x_r, np.zeros((1, x_r.shape[1]))])


@dataclass
class ScoreSet:
    """All per-scene score matrices produced by one forward pass.

    ``x_cls`` / ``x_det`` are raw stream logits, ``class_probs`` / ``det_probs``
    their softmaxes, ``x_r`` the composed instance scores, ``phi0`` the
    supervision source for branch 1, and ``phi[k-1]`` the (C+1, P) column
    softmax of refinement branch k (``ref_logits`` holds the pre-softmax
    matrices for gradient computation).
    """

    x_cls: np.ndarray
    x_det: np.ndarray
    class_probs: np.ndarray
    det_probs: np.ndarray
    x_r: np.ndarray
    phi0: np.ndarray
    phi: list[np.ndarray]
    ref_logits: list[np.ndarray]

    @property
    def num_classes(self) -> int:
        return self.x_r.shape[0]

    @property
    def num_proposals(self) -> int:
        return self.x_r.shape[1]

    @property
    def num_branches(self) -> int:
        return len(self.phi)

    def phi_prev(self, branch: int) -> np.ndarray:
        """Score matrix supervising the given 1-based branch."""
        if not 1 <= branch <= len(self.phi):
            raise ValueError(f"branch must be in [1, {len(self.phi)}], got {branch}")
        return self.phi0 if branch == 1 else self.phi[branch - 2]

"""Progressive instance balance: schedule, binned negative reselection, neglect.

The negative-to-positive ratio shrinks linearly from its initial value to 4
over the fine-tuning phase; negatives are drawn from four equal-width IoU bins
first and topped up uniformly at random, all without replacement.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .supervision import SupervisionTargets

__all__ = [
    "ScheduleState",
    "SamplerRng",
    "NegativeSampleDetail",
    "progressive_t",
    "ratio_mu",
    "neglect_threshold",
    "iou_bin_edges",
    "sample_negatives",
    "sample_negatives_detail",
    "reselect_positives",
    "apply_selection_mask",
]

# Stream tag separating sampler draws from all other seeded randomness.
_SAMPLER_TAG = 4


def progressive_t(t_n: int, t_0: int, t_1: int) -> float:
    """Fine-tuning progress in [0, 1]: 0 at the phase start, 1 at the end."""
    if t_0 >= t_1:
        raise ValueError(f"need t_0 < t_1, got ({t_0}, {t_1})")
    if not t_0 <= t_n <= t_1:
        raise ValueError(f"iteration {t_n} outside fine-tuning range [{t_0}, {t_1}]")
    return (t_n - t_0) / (t_1 - t_0)


def ratio_mu(mu_s: float, t: float) -> float:
    """Negative-to-positive target ratio, decaying linearly from mu_s to 4."""
    if mu_s < 4:
        raise ValueError(f"mu_s must be >= 4, got {mu_s}")
    if not 0.0 <= t <= 1.0:
        raise ValueError(f"t must lie in [0, 1], got {t}")
    return mu_s - (mu_s - 4.0) * t

def neglect_threshold(i_0: float, alpha: float, t_n: int, t_1: int) -> float:
    """Score-sum threshold below which a no-negative class keeps only its center."""
    if t_n > t_1:
        raise ValueError(f"iteration {t_n} exceeds final iteration {t_1}")
    return i_0 + alpha * t_n / t_1


def iou_bin_edges(lambda_ig: float, lambda_ng: float, n_bins: int = 4) -> np.ndarray:
    """Equal-width bin edges over the negative IoU interval (lambda_ig, lambda_ng)."""
    if lambda_ig >= lambda_ng:
        raise ValueError(f"need lambda_ig < lambda_ng, got ({lambda_ig}, {lambda_ng})")
    return np.linspace(lambda_ig, lambda_ng, n_bins + 1)


@dataclass(frozen=True)
class ScheduleState:
    """Iteration counters plus every sampling/reweighting hyperparameter.

    ``t_n`` is the current 0-based iteration; fine-tuning covers iterations in
    [t_0, t_1), so the first fine-tune iteration sees progress 0.
    """

    t_n: int
    t_0: int
    t_1: int
    mu_s: float = 20.0
    alpha: float = 0.85
    i_0: float = 0.05
    lambda_ig: float = 0.1
    lambda_ng: float = 0.5
    beta: float = 0.5
    gamma: float = 0.9
    n_bins: int = 4

    def __post_init__(self) -> None:
        if not 0 <= self.t_0 < self.t_1:
            raise ValueError(f"need 0 <= t_0 < t_1, got ({self.t_0}, {self.t_1})")
        if not 0 <= self.t_n <= self.t_1:
            raise ValueError(f"iteration {self.t_n} outside [0, {self.t_1}]")
        if self.mu_s < 4:
            raise ValueError(f"mu_s must be >= 4, got {self.mu_s}")
        if not 0.0 <= self.lambda_ig < self.lambda_ng <= 1.0:
            raise ValueError(f"bad thresholds ({self.lambda_ig}, {self.lambda_ng})")
        if not 0.0 <= self.beta <= 1.0:
            raise ValueError(f"beta must lie in [0, 1], got {self.beta}")
        if self.gamma < 0.0:
            raise ValueError(f"gamma must be >= 0, got {self.gamma}")

    @property
    def phase(self) -> str:
        return "finetune" if self.t_n >= self.t_0 else "normal"

    @property
    def t_progress(self) -> float:
        return progressive_t(self.t_n, self.t_0, self.t_1) if self.phase == "finetune" else 0.0

    @property
    def mu(self) -> float:
        return ratio_mu(self.mu_s, self.t_progress)

    @property
    def neglect(self) -> float:
        return neglect_threshold(self.i_0, self.alpha, self.t_n, self.t_1)


@dataclass(frozen=True)
class SamplerRng:
    """Seeded random stream keyed by (scene, iteration, branch, class).

    Identical coordinates always reproduce identical draws, independently of
    the order classes or branches are processed in.
    """

    seed: int
    scene_id: int
    iteration: int
    branch: int
    class_id: int

    def generator(self) -> np.random.Generator:
        key = (_SAMPLER_TAG, self.scene_id, self.iteration, self.branch, self.class_id)
        return np.random.default_rng(np.random.SeedSequence(self.seed, spawn_key=key))


@dataclass
class NegativeSampleDetail:
    """Bookkeeping trace of one two-stage negative reselection."""

    target: int
    bin_members: list[np.ndarray]
    stage1: list[np.ndarray]
    stage2: np.ndarray
    selected: np.ndarray = field(default_factory=lambda: np.empty(0, dtype=np.int64))


def sample_negatives_detail(
    neg_indices: np.ndarray,
    neg_ious: np.ndarray,
    n_pos: int,
    mu: float,
    lambda_ig: float,
    lambda_ng: float,
    rng: np.random.Generator,
    n_bins: int = 4,
) -> NegativeSampleDetail:
    """Two-stage negative reselection with a per-stage trace.

    Stage 1 draws min(n_pos, bin size) negatives uniformly without replacement
    from each IoU bin; stage 2 tops up to floor(mu * n_pos) from the unselected
    remainder. When the target exceeds the supply, every negative is kept.
    """
    if n_pos < 1:
        raise ValueError(f"n_pos must be >= 1, got {n_pos}")
    neg_indices = np.asarray(neg_indices, dtype=np.int64)
    neg_ious = np.asarray(neg_ious, dtype=np.float64)
    if neg_indices.size == 0:
        raise ValueError("sample_negatives requires a non-empty negative set")

    target = math.floor(mu * n_pos)
    edges = iou_bin_edges(lambda_ig, lambda_ng, n_bins)
    width = (lambda_ng - lambda_ig) / n_bins
    bin_of = np.clip(((neg_ious - lambda_ig) / width).astype(np.int64), 0, n_bins - 1)
    bins = [neg_indices[bin_of == j] for j in range(n_bins)]
    detail = NegativeSampleDetail(target=target, bin_members=bins, stage1=[], stage2=np.empty(0, dtype=np.int64))

    if target >= neg_indices.size:
        detail.stage1 = [b.copy() for b in bins]
        detail.selected = np.sort(neg_indices)
        return detail

    chosen: list[np.ndarray] = []
    for members in bins:
        take = min(n_pos, members.size)
        picked = rng.choice(members, size=take, replace=False) if take else members[:0]
        detail.stage1.append(np.sort(picked.astype(np.int64)))
        chosen.append(detail.stage1[-1])
    stage1_all = np.concatenate(chosen) if chosen else neg_indices[:0]
    need = target - stage1_all.size
    if need > 0:
        remaining = np.setdiff1d(neg_indices, stage1_all, assume_unique=True)
        if need >= remaining.size:
            detail.stage2 = remaining
        else:
            detail.stage2 = np.sort(rng.choice(remaining, size=need, replace=False).astype(np.int64))
    detail.selected = np.sort(np.concatenate([stage1_all, detail.stage2]))
    return detail


def sample_negatives(
    neg_indices: np.ndarray,
    neg_ious: np.ndarray,
    n_pos: int,
    mu: float,
    lambda_ig: float,
    lambda_ng: float,
    rng: np.random.Generator,
    n_bins: int = 4,
) -> np.ndarray:
    """Reselected negative indices; size is exactly min(floor(mu*n_pos), supply)."""
    return sample_negatives_detail(neg_indices, neg_ious, n_pos, mu, lambda_ig, lambda_ng, rng, n_bins).selected


def reselect_positives(
    pos_indices: np.ndarray,
    phi_prev: np.ndarray,
    class_id: int,
    center: int,
    neglect_thresh: float,
) -> np.ndarray:
    """Neglect low-evidence positives of a class that has no negatives.

    When the class's positive score mass (center included) falls below the
    threshold, only the cluster center survives; otherwise the set is returned
    unchanged. The center is never removed.
    """
    pos_indices = np.asarray(pos_indices, dtype=np.int64)
    if center not in pos_indices:
        raise RuntimeError(f"cluster center {center} missing from the positive set of class {class_id}")
    score_sum = float(np.asarray(phi_prev, dtype=np.float64)[class_id - 1, pos_indices].sum())
    if score_sum < neglect_thresh:
        return np.array([center], dtype=np.int64)
    return pos_indices


def apply_selection_mask(
    targets: SupervisionTargets,
    selected_pos: np.ndarray,
    selected_neg: np.ndarray,
) -> SupervisionTargets:
    """Zero the weight of every labeled proposal outside the selected sets.

    Labels, IoUs, and source classes are preserved; kept proposals keep their
    weight bit-for-bit.
    """
    keep = np.zeros(targets.num_proposals, dtype=bool)
    keep[np.asarray(selected_pos, dtype=np.int64)] = True
    keep[np.asarray(selected_neg, dtype=np.int64)] = True
    out = targets.copy()
    out.selected = keep
    out.weight = np.where(keep, targets.weight, 0.0)
    return out

"""Refinement losses and gradients: hand values, finite differences, and the
phase-boundary consistency of the rescale factor."""

import math

import numpy as np
import pytest

from opis.losses import refinement_loss, refinement_loss_grad, total_loss, zeta
from opis.midn import softmax_over_classes
from opis.supervision import SupervisionTargets


def make_targets(assigned, weights, num_classes):
    assigned = np.asarray(assigned, dtype=np.int64)
    weights = np.asarray(weights, dtype=np.float64)
    return SupervisionTargets(
        assigned_class=assigned,
        max_iou=np.zeros(assigned.size),
        source_class=np.maximum(assigned, 1),
        weight=weights,
        selected=weights > 0,
        num_classes=num_classes,
    )


class TestZeta:
    def test_normal_phase(self):
        assert zeta("normal", 2000, 0) == 1.0

    def test_finetune_ratio(self):
        assert zeta("finetune", 2000, 100) == 20.0

    def test_nothing_pruned(self):
        assert zeta("finetune", 2000, 2000) == 1.0

    def test_zero_selection_rejected(self):
        with pytest.raises(ValueError):
            zeta("finetune", 2000, 0)

    def test_unknown_phase_rejected(self):
        with pytest.raises(ValueError):
            zeta("warmup", 10, 10)


class TestRefinementLoss:
    def test_all_weights_zero(self):
        t = make_targets([1, 2, 0], [0.0, 0.0, 0.0], num_classes=2)
        phi = softmax_over_classes(np.zeros((3, 3)))
        assert refinement_loss(t, phi, 1.0) == 0.0

    def test_single_proposal_hand_value(self):
        t = make_targets([1], [1.0], num_classes=1)
        phi = np.array([[0.5], [0.5]])
        assert refinement_loss(t, phi, 1.0) == pytest.approx(-math.log(0.5), abs=1e-12)

    def test_linear_in_zeta(self):
        rng = np.random.default_rng(0)
        t = make_targets([1, 3, 2, 0], [0.4, 0.9, 0.2, 0.0], num_classes=2)
        phi = softmax_over_classes(rng.normal(size=(3, 4)))
        assert refinement_loss(t, phi, 2.0) == pytest.approx(2.0 * refinement_loss(t, phi, 1.0), abs=1e-12)

    def test_nonnegative_and_permutation_invariant(self):
        rng = np.random.default_rng(1)
        for _ in range(100):
            n = int(rng.integers(2, 20))
            assigned = rng.integers(0, 4, size=n)
            weights = np.where(assigned > 0, rng.uniform(size=n), 0.0)
            t = make_targets(assigned, weights, num_classes=3)
            phi = softmax_over_classes(rng.normal(size=(4, n)))
            loss = refinement_loss(t, phi, 1.0)
            assert loss >= 0.0
            perm = rng.permutation(n)
            t_perm = make_targets(assigned[perm], weights[perm], num_classes=3)
            assert refinement_loss(t_perm, phi[:, perm], 1.0) == pytest.approx(loss, abs=1e-12)

    def test_shape_mismatch(self):
        t = make_targets([1, 2], [1.0, 1.0], num_classes=2)
        with pytest.raises(ValueError):
            refinement_loss(t, np.zeros((3, 5)), 1.0)

    def test_phase_boundary_consistency(self):
        """With everything selected, the fine-tune loss at zeta=|R|/|R_s|
        equals the normal-phase loss, because |R_s| = |R| gives zeta = 1."""
        rng = np.random.default_rng(2)
        n = 12
        assigned = rng.integers(1, 4, size=n)  # everything labeled
        weights = rng.uniform(0.1, 1.0, size=n)
        t = make_targets(assigned, weights, num_classes=3)
        phi = softmax_over_classes(rng.normal(size=(4, n)))
        z = zeta("finetune", n, n)
        assert refinement_loss(t, phi, z) == refinement_loss(t, phi, zeta("normal", n, n))


class TestRefinementLossGrad:
    def test_weight_zero_gives_zero_column(self):
        t = make_targets([1, 2], [1.0, 0.0], num_classes=1)
        logits = np.array([[0.3, -0.2], [0.1, 0.9]])
        g = refinement_loss_grad(t, logits, 1.0)
        np.testing.assert_array_equal(g[:, 1], 0.0)
        assert np.any(g[:, 0] != 0.0)

    def test_uniform_logits_hand_value(self):
        t = make_targets([1], [1.0], num_classes=2)
        logits = np.zeros((3, 1))
        g = refinement_loss_grad(t, logits, 1.0)
        np.testing.assert_allclose(g[:, 0], [1 / 3 - 1, 1 / 3, 1 / 3], atol=1e-12)

    def test_matches_finite_differences(self):
        rng = np.random.default_rng(3)
        h = 1e-6
        for _ in range(100):
            n = int(rng.integers(1, 30))
            num_classes = int(rng.integers(1, 5))
            assigned = rng.integers(0, num_classes + 2, size=n)
            weights = np.where(assigned > 0, rng.uniform(size=n), 0.0)
            t = make_targets(assigned, weights, num_classes=num_classes)
            logits = rng.normal(size=(num_classes + 1, n))
            z = float(rng.uniform(1.0, 5.0))
            analytic = refinement_loss_grad(t, logits, z)

            def loss_at(m):
                return refinement_loss(t, softmax_over_classes(m), z)

            numeric = np.zeros_like(logits)
            for i in range(logits.shape[0]):
                for j in range(n):
                    up, down = logits.copy(), logits.copy()
                    up[i, j] += h
                    down[i, j] -= h
                    numeric[i, j] = (loss_at(up) - loss_at(down)) / (2 * h)
            err = np.abs(analytic - numeric) / np.maximum(1.0, np.maximum(np.abs(analytic), np.abs(numeric)))
            assert err.max() <= 1e-5


class TestTotalLoss:
    def test_sum(self):
        assert total_loss(0.5, [0.1, 0.2, 0.3]) == pytest.approx(1.1, abs=1e-15)

    def test_empty_refinements_rejected(self):
        with pytest.raises(ValueError):
            total_loss(0.5, [])

    def test_matches_sequential_accumulation(self):
        rng = np.random.default_rng(4)
        vals = rng.uniform(size=6)
        acc = vals[0]
        for v in vals[1:]:
            acc += v
        assert total_loss(float(vals[0]), vals[1:].tolist()) == pytest.approx(acc, abs=1e-12)

"""Loss identities, invariances, and finite-difference gradient checks."""

import math

import numpy as np
import pytest
import torch
import torch.nn.functional as F

from conftest import check_gradients
from uniav.errors import ConfigurationError, InputError, TrainingDivergenceError
from uniav.objectives import (
    LossBundle,
    ScoreMatrix,
    contrastive_loss,
    correspondence_score,
    local_score_matrix,
    mva_loss,
    score_matrix,
    separation_loss,
    total_loss,
)


def unit(x):
    return F.normalize(x, dim=-1)


class TestScoreMatrix:
    def test_non_square_rejected(self):
        with pytest.raises(InputError):
            ScoreMatrix(torch.zeros(2, 3), 0.07)

    def test_bad_temperature_rejected(self):
        with pytest.raises(ConfigurationError):
            ScoreMatrix(torch.zeros(2, 2), 0.0)

    def test_out_of_range_scores_rejected(self):
        with pytest.raises(InputError):
            ScoreMatrix(torch.full((2, 2), 2.5), 0.07)

    def test_batched_scores_stay_in_range(self):
        torch.manual_seed(0)
        for _ in range(20):
            a_glb = unit(torch.randn(6, 16))
            a_loc = unit(torch.randn(6, 16))
            v_glb = unit(torch.randn(6, 16))
            v_loc = unit(torch.randn(6, 49, 16))
            s = score_matrix(a_glb, a_loc, v_glb, v_loc, 0.07)
            assert s.values.abs().max() <= 2.0 + 1e-6


class TestCorrespondenceScore:
    def test_self_similarity_is_two(self):
        a = unit(torch.randn(8))
        cells = unit(torch.randn(5, 8))
        cells[2] = a
        assert torch.isclose(correspondence_score(a, a, a, cells), torch.tensor(2.0), atol=1e-6)

    def test_orthogonal_is_zero(self):
        a = torch.zeros(4)
        a[0] = 1.0
        v = torch.zeros(4)
        v[1] = 1.0
        cells = torch.zeros(3, 4)
        cells[:, 2] = 1.0
        assert correspondence_score(a, a, v, cells).item() == 0.0

    def test_global_point_three_local_max_point_nine(self):
        # cos(a_glb, v_glb) = 0.3 and local cosines {0.2, 0.9, -0.5}: s = 1.2
        a_glb = torch.tensor([1.0, 0.0, 0.0])
        v_glb = torch.tensor([0.3, math.sqrt(1 - 0.09), 0.0])
        a_loc = torch.tensor([1.0, 0.0, 0.0])
        cells = torch.stack([
            torch.tensor([0.2, math.sqrt(1 - 0.04), 0.0]),
            torch.tensor([0.9, 0.0, math.sqrt(1 - 0.81)]),
            torch.tensor([-0.5, math.sqrt(1 - 0.25), 0.0]),
        ])
        s = correspondence_score(a_glb, a_loc, v_glb, cells)
        assert abs(s.item() - 1.2) < 1e-6

    def test_empty_local_set_rejected(self):
        a = unit(torch.randn(8))
        with pytest.raises(InputError):
            correspondence_score(a, a, a, torch.zeros(0, 8))


class TestContrastiveLoss:
    def test_singleton_batch_is_zero(self):
        s = ScoreMatrix(torch.tensor([[1.7]]), 1.0)
        assert contrastive_loss(s).item() == 0.0

    def test_identity_matrix_reference_value(self):
        s = ScoreMatrix(torch.eye(2, dtype=torch.float64), 1.0)
        want = 2.0 * math.log(1.0 + math.exp(-1.0))
        assert abs(contrastive_loss(s).item() - want) < 1e-6

    def test_constant_shift_invariance(self):
        torch.manual_seed(1)
        vals = torch.rand(5, 5, dtype=torch.float64) * 2 - 1
        base = contrastive_loss(ScoreMatrix(vals, 0.07)).item()
        shifted = contrastive_loss(ScoreMatrix(vals + 0.73, 0.07)).item()
        assert abs(base - shifted) < 1e-9

    def test_joint_permutation_invariance(self):
        torch.manual_seed(2)
        vals = torch.rand(6, 6, dtype=torch.float64) * 2 - 1
        base = contrastive_loss(ScoreMatrix(vals, 0.1)).item()
        for seed in range(10):
            g = torch.Generator().manual_seed(seed)
            perm = torch.randperm(6, generator=g)
            permuted = vals[perm][:, perm]
            got = contrastive_loss(ScoreMatrix(permuted, 0.1)).item()
            assert abs(got - base) < 1e-9

    def test_strictly_decreasing_in_diagonal(self):
        torch.manual_seed(3)
        vals = torch.rand(4, 4, dtype=torch.float64) * 2 - 1
        losses = []
        for bump in (0.0, 0.2, 0.4, 0.8):
            v = vals.clone()
            v[1, 1] = vals[1, 1] + bump
            losses.append(contrastive_loss(ScoreMatrix(v, 0.5)).item())
        assert all(b < a for a, b in zip(losses, losses[1:]))

    def test_nonnegative(self):
        torch.manual_seed(4)
        for _ in range(50):
            vals = torch.rand(5, 5, dtype=torch.float64) * 4 - 2
            assert contrastive_loss(ScoreMatrix(vals, 0.07)).item() >= 0.0


class TestSeparationLoss:
    def test_perfect_prediction_is_tiny(self):
        target = (torch.rand(6, 10) > 0.5).double()
        pred = torch.clamp(target, 1e-6, 1 - 1e-6)
        assert separation_loss(pred, target).item() <= 1.1e-6

    def test_uniform_half_is_ln2(self):
        target = (torch.rand(8, 8) > 0.3).double()
        pred = torch.full((8, 8), 0.5, dtype=torch.float64)
        assert abs(separation_loss(pred, target).item() - math.log(2.0)) < 1e-6

    def test_two_by_two_reference_value(self):
        pred = torch.tensor([[0.9, 0.1], [0.8, 0.2]], dtype=torch.float64)
        target = torch.tensor([[1.0, 0.0], [1.0, 0.0]], dtype=torch.float64)
        want = -(math.log(0.9) + math.log(0.9) + math.log(0.8) + math.log(0.8)) / 4.0
        got = separation_loss(pred, target).item()
        assert abs(got - want) < 1e-9
        assert abs(got - 0.1643) < 1e-3

    def test_shape_mismatch_rejected(self):
        with pytest.raises(InputError):
            separation_loss(torch.rand(3, 4), torch.rand(4, 3))


class TestMvaLoss:
    def setup_method(self):
        torch.manual_seed(5)
        self.cells = unit(torch.randn(4, 9, 16, dtype=torch.float64))
        self.a_i = unit(torch.randn(4, 16, dtype=torch.float64))
        self.a_j = unit(torch.randn(4, 16, dtype=torch.float64))

    def test_alpha_one_collapses_to_base_contrastive(self):
        want = contrastive_loss(local_score_matrix(self.a_i, self.cells, 0.07)).item()
        got = mva_loss(self.cells, self.a_i, self.a_j, 1.0, 0.07).item()
        assert abs(got - want) < 1e-12

    def test_alpha_zero_collapses_to_partner_contrastive(self):
        want = contrastive_loss(local_score_matrix(self.a_j, self.cells, 0.07)).item()
        got = mva_loss(self.cells, self.a_i, self.a_j, 0.0, 0.07).item()
        assert abs(got - want) < 1e-12

    def test_singleton_batch_is_zero(self):
        cells = unit(torch.randn(1, 9, 16, dtype=torch.float64))
        a = unit(torch.randn(1, 16, dtype=torch.float64))
        assert mva_loss(cells, a, a, 0.5, 0.07).item() == 0.0

    def test_affine_in_alpha(self):
        alphas = [0.0, 0.25, 0.5, 0.75, 1.0]
        vals = [mva_loss(self.cells, self.a_i, self.a_j, a, 0.07).item() for a in alphas]
        diffs = np.diff(vals)
        assert np.allclose(diffs, diffs[0], atol=1e-9)

    def test_alpha_out_of_range_rejected(self):
        with pytest.raises(InputError):
            mva_loss(self.cells, self.a_i, self.a_j, 1.2, 0.07)


class TestTotalLoss:
    def test_zero_inputs(self):
        assert total_loss(0.0, 0.0, 0.0).total == 0.0

    def test_plain_addition(self):
        bundle = total_loss(0.5, 0.7, 0.3)
        assert abs(bundle.total - 1.5) < 1e-12

    def test_bundle_invariant_with_tensors(self):
        cl = torch.tensor(0.9)
        bundle = total_loss(cl, 0.0, 0.0)
        assert torch.is_tensor(bundle.total)
        assert bundle.total.item() == cl.item()

    def test_disabled_objectives_contribute_exact_zero(self):
        cl = torch.tensor(1.3, requires_grad=True)
        bundle = total_loss(cl, 0.0, 0.0)
        bundle.total.backward()
        assert cl.grad.item() == 1.0

    def test_non_finite_rejected(self):
        with pytest.raises(TrainingDivergenceError):
            total_loss(float("nan"), 0.0, 0.0)
        with pytest.raises(TrainingDivergenceError):
            total_loss(0.0, torch.tensor(float("inf")), 0.0)

    def test_detached_logging_view(self):
        bundle = total_loss(torch.tensor(0.25), 0.5, 0.0)
        d = bundle.detached()
        assert d == {"cl": 0.25, "mas": 0.5, "mva": 0.0, "total": 0.75}


class TestGradients:
    """Analytic vs central finite differences, float64, 20 seeds."""

    B, P, C = 3, 8, 4

    def test_contrastive_gradients(self):
        for seed in range(20):
            torch.manual_seed(seed)
            raw = [torch.randn(self.B, self.P, dtype=torch.float64) for _ in range(3)]
            raw.append(torch.randn(self.B, self.C, self.P, dtype=torch.float64))

            def fn():
                a_glb, a_loc, v_glb = (unit(t) for t in raw[:3])
                v_loc = unit(raw[3])
                return contrastive_loss(score_matrix(a_glb, a_loc, v_glb, v_loc, 0.3))

            check_gradients(fn, raw, rtol=1e-4)

    def test_separation_gradients(self):
        for seed in range(20):
            torch.manual_seed(100 + seed)
            logits = [torch.randn(2, 5, 5, dtype=torch.float64)]
            target = (torch.rand(2, 5, 5) > 0.5).double()

            def fn():
                return separation_loss(torch.sigmoid(logits[0]), target)

            check_gradients(fn, logits, rtol=1e-4)

    def test_mva_gradients(self):
        for seed in range(20):
            torch.manual_seed(200 + seed)
            raw = [
                torch.randn(self.B, self.C, self.P, dtype=torch.float64),
                torch.randn(self.B, self.P, dtype=torch.float64),
                torch.randn(self.B, self.P, dtype=torch.float64),
            ]

            def fn():
                return mva_loss(unit(raw[0]), unit(raw[1]), unit(raw[2]), 0.4, 0.3)

            check_gradients(fn, raw, rtol=1e-4)

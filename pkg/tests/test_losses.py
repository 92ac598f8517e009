import math

import numpy as np
import pytest
import torch

from lesionseg.losses import LossConfig, bce_loss, compound_loss, dice_coeff, dice_loss

TINY = 1e-12  # stands in for the eps -> 0 limit in the fixtures


def _fd_gradient(fn, x, h=1e-5):
    """Central finite differences of a scalar function of a tensor."""
    g = torch.zeros_like(x)
    flat = x.view(-1)
    gf = g.view(-1)
    for i in range(flat.numel()):
        orig = flat[i].item()
        flat[i] = orig + h
        up = fn(x).item()
        flat[i] = orig - h
        dn = fn(x).item()
        flat[i] = orig
        gf[i] = (up - dn) / (2 * h)
    return g


class TestBCE:
    def test_zero_logits_on_ones_is_ln2(self):
        x = torch.zeros(4, 4, 4)
        y = torch.ones(4, 4, 4)
        assert bce_loss(x, y).item() == pytest.approx(math.log(2), rel=1e-6)

    def test_saturated_positive_logits_vanish(self):
        x = torch.full((4, 4, 4), 50.0)
        y = torch.ones(4, 4, 4)
        assert bce_loss(x, y).item() == pytest.approx(0.0, abs=1e-8)

    def test_class_weight_scales_only_foreground_term(self):
        # two voxels: one lesion, one background, logit 0 each
        x = torch.zeros(2)
        y = torch.tensor([1.0, 0.0])
        base = bce_loss(x, y, w_c=1.0).item()
        weighted = bce_loss(x, y, w_c=2.0).item()
        # hand computation: mean of (w_c*ln2, ln2)
        assert base == pytest.approx(math.log(2), rel=1e-6)
        assert weighted == pytest.approx((2 * math.log(2) + math.log(2)) / 2, rel=1e-6)

    def test_shape_mismatch_rejected(self):
        with pytest.raises(ValueError):
            bce_loss(torch.zeros(2, 2), torch.zeros(2, 3))


class TestDice:
    def test_identical_nonempty_masks(self):
        y = torch.tensor([0.0, 1.0, 1.0, 0.0])
        assert dice_coeff(y, y, smooth=TINY).item() == pytest.approx(1.0)

    def test_disjoint_masks(self):
        a = torch.tensor([1.0, 1.0, 0.0, 0.0])
        b = torch.tensor([0.0, 0.0, 1.0, 1.0])
        assert dice_coeff(a, b, smooth=TINY).item() == pytest.approx(0.0, abs=1e-9)

    def test_half_overlap(self):
        a = torch.tensor([1.0, 1.0, 0.0, 0.0])
        b = torch.tensor([0.0, 1.0, 1.0, 0.0])
        assert dice_coeff(a, b, smooth=TINY).item() == pytest.approx(0.5)

    def test_symmetric_for_binary_inputs(self):
        rng = np.random.default_rng(4)
        a = torch.from_numpy(rng.integers(0, 2, 64).astype(np.float32))
        b = torch.from_numpy(rng.integers(0, 2, 64).astype(np.float32))
        assert dice_coeff(a, b).item() == pytest.approx(dice_coeff(b, a).item())

    def test_empty_empty_defined_by_smoothing(self):
        z = torch.zeros(8)
        assert dice_coeff(z, z, smooth=1.0).item() == pytest.approx(1.0)

    def test_dice_loss_fixtures(self):
        big = torch.full((8,), 60.0)
        y = torch.ones(8)
        assert dice_loss(big, y).item() == pytest.approx(0.0, abs=1e-4)
        assert dice_loss(-big, y, smooth=TINY).item() == pytest.approx(1.0, abs=1e-4)


class TestCompound:
    def test_projections(self):
        x = torch.randn(4, 4, 4, generator=torch.Generator().manual_seed(0))
        y = (torch.rand(4, 4, 4, generator=torch.Generator().manual_seed(1)) > 0.5).float()
        only_bce = compound_loss(x, y, LossConfig(alpha_b=1, alpha_d=0))
        only_dice = compound_loss(x, y, LossConfig(alpha_b=0, alpha_d=1))
        assert only_bce.item() == pytest.approx(bce_loss(x, y).item())
        assert only_dice.item() == pytest.approx(dice_loss(x, y).item())

    def test_additivity_on_half_overlap_fixture(self):
        x = torch.tensor([8.0, 8.0, -8.0, -8.0])
        y = torch.tensor([0.0, 1.0, 1.0, 0.0])
        total = compound_loss(x, y)
        assert total.item() == pytest.approx(bce_loss(x, y).item() + dice_loss(x, y).item())

    def test_nonnegative_and_finite(self):
        rng = torch.Generator().manual_seed(3)
        for _ in range(10):
            x = torch.randn(3, 3, 3, generator=rng) * 20
            y = (torch.rand(3, 3, 3, generator=rng) > 0.5).float()
            v = compound_loss(x, y).item()
            assert math.isfinite(v) and v >= 0

    def test_gradient_matches_finite_differences(self):
        torch.manual_seed(0)
        x = torch.randn(2, 4, 4, 4, dtype=torch.float64, requires_grad=True)
        y = (torch.rand(2, 4, 4, 4) > 0.6).double()
        loss = compound_loss(x, y)
        loss.backward()
        analytic = x.grad.clone()
        numeric = _fd_gradient(lambda t: compound_loss(t, y), x.detach().clone())
        rel = (analytic - numeric).norm() / numeric.norm()
        assert rel < 1e-4

    def test_raising_true_lesion_logit_never_increases_loss(self):
        torch.manual_seed(1)
        x = torch.randn(4, 4, 4, dtype=torch.float64)
        y = torch.zeros(4, 4, 4, dtype=torch.float64)
        y[1:3, 1:3, 1:3] = 1
        base = compound_loss(x, y).item()
        for idx in np.argwhere(y.numpy() > 0)[:5]:
            bumped = x.clone()
            bumped[tuple(idx)] += 0.5
            assert compound_loss(bumped, y).item() <= base + 1e-12

import math

import numpy as np
import pytest
import torch

from airm.errors import ParameterError, ShapeError
from airm.losses import (LossWeights, ce_loss, combined_airmf_loss, grad_loss, l1_loss, l2_loss,
                         total_loss)


def t(a):
    return torch.as_tensor(np.asarray(a, dtype=np.float64))


def oracle_l1(p, g):
    return sum(abs(a - b) for a, b in zip(p.ravel(), g.ravel())) / p.size


def oracle_l2(p, g):
    return sum((a - b) ** 2 for a, b in zip(p.ravel(), g.ravel())) / p.size


def oracle_ce(p, g):
    s = 0.0
    for a, b in zip(p.ravel(), g.ravel()):
        a = min(max(a, 1e-7), 1 - 1e-7)
        s -= b * math.log(a) + (1 - b) * math.log(1 - a)
    return s / p.size


def oracle_grad(p, g):
    H, W = p.shape
    sx = sum(abs((p[y, x + 1] - p[y, x]) - (g[y, x + 1] - g[y, x])) for y in range(H) for x in range(W - 1))
    sy = sum(abs((p[y + 1, x] - p[y, x]) - (g[y + 1, x] - g[y, x])) for y in range(H - 1) for x in range(W))
    return 0.5 * (sx / (H * (W - 1)) + sy / ((H - 1) * W))


@pytest.fixture
def pair():
    rng = np.random.default_rng(0)
    return rng.uniform(0.02, 0.98, (8, 8)), (rng.uniform(size=(8, 8)) > 0.5).astype(np.float64)


class TestElementwise:
    @pytest.mark.parametrize("fn", [l1_loss, l2_loss, grad_loss])
    def test_zero_at_equality(self, fn, pair):
        p, _ = pair
        assert float(fn(t(p), t(p))) == 0.0

    def test_complement(self):
        g = (np.random.default_rng(1).uniform(size=(6, 6)) > 0.5).astype(float)
        assert float(l1_loss(t(1 - g), t(g))) == 1.0
        assert float(l2_loss(t(1 - g), t(g))) == 1.0

    def test_against_oracles(self, pair):
        p, g = pair
        assert abs(float(l1_loss(t(p), t(g))) - oracle_l1(p, g)) <= 1e-12
        assert abs(float(l2_loss(t(p), t(g))) - oracle_l2(p, g)) <= 1e-12
        assert abs(float(ce_loss(t(p), t(g))) - oracle_ce(p, g)) <= 1e-10
        assert abs(float(grad_loss(t(p), t(g))) - oracle_grad(p, g)) <= 1e-12

    def test_shape_mismatch(self):
        for fn in (l1_loss, l2_loss, ce_loss, grad_loss):
            with pytest.raises(ShapeError):
                fn(torch.zeros(3, 3), torch.zeros(3, 4))


class TestCrossEntropy:
    def test_limit(self, pair):
        _, g = pair
        assert float(ce_loss(t(g), t(g))) < 1e-6

    def test_half(self, pair):
        _, g = pair
        assert abs(float(ce_loss(t(np.full_like(g, 0.5)), t(g))) - math.log(2)) <= 1e-12


class TestGradLoss:
    def test_dc_shift_invariance(self, pair):
        p, g = pair
        assert float(grad_loss(t(g + 0.3), t(g))) <= 1e-15

    def test_vertical_edge_vs_flat(self):
        edge = np.zeros((4, 4))
        edge[:, 2:] = 1
        flat = np.zeros((4, 4))
        value = float(grad_loss(t(edge), t(flat)))
        assert abs(value - oracle_grad(edge, flat)) <= 1e-15
        # 4 unit jumps among 12 horizontal differences, none vertically
        assert value == pytest.approx(0.5 * (4 / 12))


class TestCombination:
    def test_zero_at_equality(self, pair):
        _, g = pair
        total, parts = combined_airmf_loss(t(g), t(g))
        assert float(total) < 1e-6
        assert set(parts) == {"l1", "l2", "ce", "grad"}

    def test_l1_only(self, pair):
        p, g = pair
        total, _ = combined_airmf_loss(t(p), t(g), LossWeights(1, 0, 0, 0))
        assert float(total) == float(l1_loss(t(p), t(g)))

    def test_default_weights(self, pair):
        p, g = pair
        total, _ = combined_airmf_loss(t(p), t(g))
        expected = (0.2 * oracle_l1(p, g) + 0.2 * oracle_l2(p, g) + 0.3 * oracle_ce(p, g)
                    + 0.4 * oracle_grad(p, g))
        assert abs(float(total) - expected) <= 1e-12

    def test_total(self):
        assert total_loss(0.0, 0.0) == 0.0
        assert total_loss(2.0, 4.0) == 3.0
        w = LossWeights(airmf=0.25, aff=2.0)
        assert total_loss(2.0, 4.0, w) == 0.25 * 2 + 2.0 * 4

    def test_weights_validated(self):
        with pytest.raises(ParameterError):
            LossWeights(l1=-1)

    def test_defaults(self):
        w = LossWeights()
        assert (w.l1, w.l2, w.ce, w.grad, w.airmf, w.aff) == (0.2, 0.2, 0.3, 0.4, 0.5, 0.5)


@pytest.mark.parametrize("fn", [l1_loss, l2_loss, ce_loss, grad_loss,
                                lambda p, g: combined_airmf_loss(p, g)[0]])
def test_gradients_match_central_differences(fn):
    # atol only absorbs round-off where the piecewise-linear terms cancel to exactly zero
    rng = np.random.default_rng(5)
    p = torch.tensor(rng.uniform(0.05, 0.95, (8, 8)), requires_grad=True)
    g = torch.tensor((rng.uniform(size=(8, 8)) > 0.5).astype(float))
    assert torch.autograd.gradcheck(lambda x: fn(x, g), (p,), eps=1e-6, atol=1e-9, rtol=1e-5)


@pytest.mark.parametrize("fn", [l1_loss, l2_loss, ce_loss, grad_loss])
def test_nonnegative(fn):
    rng = np.random.default_rng(9)
    for _ in range(10):
        p = t(rng.uniform(size=(5, 7)))
        g = t(rng.uniform(size=(5, 7)) > 0.5)
        assert float(fn(p, g)) >= 0

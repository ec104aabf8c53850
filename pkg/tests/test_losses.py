import math

import numpy as np
import pytest
import torch

from fdcheck import check_input_grads
from vadfusion.losses import (
    LossValue,
    agreement_loss,
    agreement_target,
    bce,
    classifier_loss,
    fusion_loss,
    gaussian_nll,
    margin_loss,
)

def t(*vals):
    return torch.tensor(vals, dtype=torch.float64)


class TestGaussianNll:
    def test_zero_residual_unit_variance(self):
        mu = t(0.2, 0.5, 0.8)
        assert float(gaussian_nll(mu, torch.zeros(3, dtype=torch.float64), mu)) == pytest.approx(0.0)

    def test_single_dim_value(self):
        # 0.04/0.08 + ln(0.04)/2 = 0.5 - 1.6094379... = -1.1094379124341003
        loss = gaussian_nll(t(0.3), torch.log(t(0.04)), t(0.5))
        assert float(loss) == pytest.approx(-1.1094379124341003, abs=1e-12)

    def test_floor_variance_log_term(self):
        # y = mu on all three dims at the variance floor: 1.5 * ln(2e-3)
        mu = t(0.1, 0.2, 0.3)
        lv = torch.full((3,), math.log(2e-3), dtype=torch.float64)
        assert float(gaussian_nll(mu, lv, mu)) == pytest.approx(
            1.5 * math.log(2e-3), abs=1e-12
        )

    def test_batch_mean_reduction(self):
        mu = torch.zeros(4, 3, dtype=torch.float64)
        lv = torch.zeros(4, 3, dtype=torch.float64)
        target = torch.zeros(4, 3, dtype=torch.float64)
        target[0] = 1.0
        # one sample contributes 3 * 1/2, averaged over 4
        assert float(gaussian_nll(mu, lv, target)) == pytest.approx(1.5 / 4)

    def test_rejects_non_finite(self):
        with pytest.raises(ValueError, match="non-finite"):
            gaussian_nll(t(float("nan")), t(0.0), t(0.0))

    def test_gradients(self):
        rng = np.random.default_rng(0)
        for i in range(20):
            mu = torch.tensor(rng.normal(size=(2, 3)))
            lv = torch.tensor(rng.uniform(-3.0, 1.0, size=(2, 3)))
            y = torch.tensor(rng.normal(size=(2, 3)))
            check_input_grads(gaussian_nll, [mu, lv, y], context=f"nll #{i}")


class TestMarginLoss:
    def test_consistent_identical(self):
        e = t(0.1, 0.2, 0.3)
        assert float(margin_loss(e, e, t(1.0), 0.9)) == pytest.approx(0.0, abs=1e-10)

    def test_hinge_satisfied(self):
        e_s = t(2.0, 0.0)
        e_t = t(0.0, 0.0)  # d = 2 >= m
        assert float(margin_loss(e_s, e_t, t(0.0), 0.9)) == 0.0

    def test_hinge_active_value(self):
        # d = 0.4, m = 0.9 -> (0.5)^2 = 0.25
        e_s = t(0.4, 0.0)
        e_t = t(0.0, 0.0)
        assert float(margin_loss(e_s, e_t, t(0.0), 0.9)) == pytest.approx(0.25, abs=1e-12)

    def test_consistent_squared_distance(self):
        e_s = t(0.3, 0.4)
        e_t = t(0.0, 0.0)
        assert float(margin_loss(e_s, e_t, t(1.0), 0.9)) == pytest.approx(0.25, abs=1e-12)

    def test_width_mismatch(self):
        with pytest.raises(ValueError, match="width"):
            margin_loss(t(1.0, 2.0), t(1.0), t(1.0), 0.9)

    def test_nonpositive_margin(self):
        with pytest.raises(ValueError, match="margin"):
            margin_loss(t(1.0), t(0.0), t(0.0), 0.0)

    def test_gradients_both_branches(self):
        rng = np.random.default_rng(1)
        m = 0.9
        for i in range(20):
            width = int(rng.integers(2, 6))
            e_s = torch.tensor(rng.normal(size=(3, width)))
            e_t = torch.tensor(rng.normal(size=(3, width)))
            y = torch.tensor(rng.integers(0, 2, size=3).astype(float))
            d = torch.linalg.vector_norm(e_s - e_t, dim=-1)
            if torch.any((d - m).abs() < 1e-3):  # stay off the hinge kink
                continue
            check_input_grads(
                lambda a, b: margin_loss(a, b, y, m), [e_s, e_t],
                context=f"margin #{i}",
            )

    def test_gradient_zero_in_dead_zone(self):
        e_s = torch.tensor([[3.0, 0.0]], requires_grad=True)
        e_t = torch.tensor([[0.0, 0.0]])
        loss = margin_loss(e_s, e_t, torch.tensor([0.0]), 0.9)
        loss.backward()
        assert torch.all(e_s.grad == 0.0)


class TestClassifierLoss:
    def test_perfect_prediction_near_zero(self):
        # consistent pair, identical embeddings, p_inc = 1 - y = 0
        e = torch.zeros(1, 4, dtype=torch.float64)
        lv = classifier_loss(t(0.0), torch.tensor([1.0]), e, e)
        assert float(lv.total) == pytest.approx(0.0, abs=1e-5)

    def test_uncertain_prediction_value(self):
        # BCE(0.5) = ln 2; margin (d=0.4, m=0.9, y=0) = 0.25; lambda = 0.15
        e_s = torch.tensor([[0.4, 0.0]], dtype=torch.float64)
        e_t = torch.zeros(1, 2, dtype=torch.float64)
        lv = classifier_loss(t(0.5), torch.tensor([0.0]), e_s, e_t,
                             m=0.9, lambda_margin=0.15)
        assert float(lv.total) == pytest.approx(math.log(2.0) + 0.0375, abs=1e-12)

    def test_component_bookkeeping(self):
        rng = np.random.default_rng(2)
        for _ in range(30):
            n = int(rng.integers(1, 8))
            p = torch.tensor(rng.uniform(0.01, 0.99, size=n))
            y = torch.tensor(rng.integers(0, 2, size=n).astype(float))
            e_s = torch.tensor(rng.normal(size=(n, 5)))
            e_t = torch.tensor(rng.normal(size=(n, 5)))
            lam = float(rng.uniform(0.0, 2.0))
            lv = classifier_loss(p, y, e_s, e_t, m=0.9, lambda_margin=lam)
            assert float((lv.total - lv.weighted_sum()).abs()) < 1e-9

    def test_gradients(self):
        rng = np.random.default_rng(3)
        for i in range(20):
            n = 3
            p = torch.tensor(rng.uniform(0.05, 0.95, size=n))
            y = torch.tensor(rng.integers(0, 2, size=n).astype(float))
            e_s = torch.tensor(rng.normal(size=(n, 4)))
            e_t = torch.tensor(rng.normal(size=(n, 4)))
            d = torch.linalg.vector_norm(e_s - e_t, dim=-1)
            if torch.any((d - 0.9).abs() < 1e-3):
                continue
            check_input_grads(
                lambda pp, a, b: classifier_loss(pp, y, a, b).total,
                [p, e_s, e_t], context=f"cls #{i}",
            )


class TestAgreementTarget:
    def test_equal_variances(self):
        mu, var = agreement_target(t(0.2), torch.log(t(0.04)),
                                   t(0.6), torch.log(t(0.04)))
        assert float(mu) == pytest.approx(0.4)
        assert float(var) == pytest.approx(0.02)

    def test_worked_example(self):
        # precisions 100 and 25 -> mu = (20+20)/125 = 0.32, var = 1/125 = 0.008
        mu, var = agreement_target(t(0.2), torch.log(t(0.01)),
                                   t(0.8), torch.log(t(0.04)))
        assert float(mu) == pytest.approx(0.32, abs=1e-12)
        assert float(var) == pytest.approx(0.008, abs=1e-12)

    def test_dominant_precision_limit(self):
        mu, _ = agreement_target(t(0.1), torch.log(t(1e4)),
                                 t(0.9), torch.log(t(1e-2)))
        assert float(mu) == pytest.approx(0.9, abs=1e-4)

    def test_matches_grid_integrated_product(self):
        # oracle: normalize the pointwise product of the two densities on a grid
        rng = np.random.default_rng(4)
        grid = np.arange(-8.0, 8.0, 1e-4)
        for _ in range(25):
            mu_s, mu_t = rng.uniform(-1.0, 2.0, size=2)
            var_s, var_t = rng.uniform(5e-3, 0.5, size=2)
            dens = (np.exp(-((grid - mu_s) ** 2) / (2 * var_s))
                    * np.exp(-((grid - mu_t) ** 2) / (2 * var_t)))
            dens /= np.trapezoid(dens, grid)
            mu_ref = np.trapezoid(grid * dens, grid)
            var_ref = np.trapezoid((grid - mu_ref) ** 2 * dens, grid)
            mu, var = agreement_target(
                t(mu_s), torch.log(t(var_s)), t(mu_t), torch.log(t(var_t)))
            assert float(mu) == pytest.approx(mu_ref, abs=1e-6)
            assert float(var) == pytest.approx(var_ref, abs=1e-6)

    def test_detached_from_inputs(self):
        mu_s = t(0.2).requires_grad_(True)
        mu, var = agreement_target(mu_s, t(0.0), t(0.4), t(0.0))
        assert not mu.requires_grad and not var.requires_grad


class TestAgreementLoss:
    def test_zero_residual(self):
        # mu_f at the target: only the 0.5*log(var) terms remain
        loss = agreement_loss(t(0.32), t(0.2), torch.log(t(0.01)),
                              t(0.8), torch.log(t(0.04)))
        assert float(loss) == pytest.approx(0.5 * math.log(0.008), abs=1e-12)

    def test_monotone_in_residual(self):
        base = agreement_loss(t(0.32), t(0.2), torch.log(t(0.01)),
                              t(0.8), torch.log(t(0.04)))
        prev = float(base)
        for delta in (0.05, 0.1, 0.2, 0.4):
            cur = float(agreement_loss(t(0.32 + delta), t(0.2), torch.log(t(0.01)),
                                       t(0.8), torch.log(t(0.04))))
            assert cur > prev
            prev = cur

    def test_gradients_wrt_fused_mean(self):
        # unimodal outputs are constants (frozen towers): only mu_f may carry grad
        rng = np.random.default_rng(5)
        for i in range(20):
            mu_f = torch.tensor(rng.normal(size=(2, 3)))
            mu_s = torch.tensor(rng.normal(size=(2, 3)))
            lv_s = torch.tensor(rng.uniform(-4, 0, size=(2, 3)))
            mu_t = torch.tensor(rng.normal(size=(2, 3)))
            lv_t = torch.tensor(rng.uniform(-4, 0, size=(2, 3)))
            check_input_grads(
                lambda m: agreement_loss(m, mu_s, lv_s, mu_t, lv_t),
                [mu_f], context=f"agree #{i}",
            )

    def test_no_gradient_into_towers(self):
        mu_f = t(0.3).requires_grad_(True)
        mu_s = t(0.2).requires_grad_(True)
        loss = agreement_loss(mu_f, mu_s, t(0.0), t(0.5), t(0.0))
        grad_f, grad_s = torch.autograd.grad(loss, [mu_f, mu_s], allow_unused=True)
        assert grad_f is not None and float(grad_f.abs()) > 0.0
        assert grad_s is None or torch.all(grad_s == 0.0)


class TestFusionLoss:
    def setup_method(self):
        rng = np.random.default_rng(6)
        self.mu_f = torch.tensor(rng.normal(0.5, 0.2, size=(4, 3)))
        self.lv_f = torch.tensor(rng.uniform(-4, 0, size=(4, 3)))
        self.target = torch.tensor(rng.uniform(0, 1, size=(4, 3)))
        self.mu_s = torch.tensor(rng.normal(0.5, 0.2, size=(4, 3)))
        self.lv_s = torch.tensor(rng.uniform(-4, 0, size=(4, 3)))
        self.mu_t = torch.tensor(rng.normal(0.5, 0.2, size=(4, 3)))
        self.lv_t = torch.tensor(rng.uniform(-4, 0, size=(4, 3)))

    def test_labeled_zero_lambda_is_pure_nll(self):
        labeled = torch.ones(4, dtype=torch.bool)
        lv = fusion_loss(self.mu_f, self.lv_f, self.target, labeled,
                         self.mu_s, self.lv_s, self.mu_t, self.lv_t,
                         lambda_agree=0.0)
        ref = gaussian_nll(self.mu_f, self.lv_f, self.target)
        assert float(lv.total) == pytest.approx(float(ref), abs=1e-12)

    def test_unlabeled_is_weighted_agreement(self):
        lv = fusion_loss(self.mu_f, self.lv_f, None, None,
                         self.mu_s, self.lv_s, self.mu_t, self.lv_t,
                         lambda_agree=0.7)
        ref = agreement_loss(self.mu_f, self.mu_s, self.lv_s, self.mu_t, self.lv_t)
        assert float(lv.total) == pytest.approx(0.7 * float(ref), abs=1e-12)

    def test_no_signal_rejected(self):
        with pytest.raises(ValueError, match="no signal"):
            fusion_loss(self.mu_f, self.lv_f, None, None,
                        self.mu_s, self.lv_s, self.mu_t, self.lv_t,
                        lambda_agree=0.0)

    def test_component_bookkeeping(self):
        rng = np.random.default_rng(7)
        for _ in range(30):
            labeled = torch.tensor(rng.integers(0, 2, size=4, dtype=np.int64) > 0)
            lam = float(rng.uniform(0.0, 2.0))
            if not labeled.any() and lam == 0.0:
                continue
            lv = fusion_loss(self.mu_f, self.lv_f, self.target, labeled,
                             self.mu_s, self.lv_s, self.mu_t, self.lv_t,
                             lambda_agree=lam)
            assert float((lv.total - lv.weighted_sum()).abs()) < 1e-9

    def test_mixed_batch_matches_manual_sum(self):
        labeled = torch.tensor([True, False, True, False])
        lam = 0.5
        lv = fusion_loss(self.mu_f, self.lv_f, self.target, labeled,
                         self.mu_s, self.lv_s, self.mu_t, self.lv_t,
                         lambda_agree=lam)
        var_f = torch.exp(self.lv_f)
        nll_per = ((self.target - self.mu_f) ** 2 / (2 * var_f)
                   + 0.5 * self.lv_f).sum(-1)
        from vadfusion.losses import agreement_target
        mu_a, var_a = agreement_target(self.mu_s, self.lv_s, self.mu_t, self.lv_t)
        agree_per = ((self.mu_f - mu_a) ** 2 / (2 * var_a)
                     + 0.5 * torch.log(var_a)).sum(-1)
        expected = (nll_per * labeled).sum() / 4 + lam * agree_per.mean()
        assert float(lv.total) == pytest.approx(float(expected), abs=1e-12)


class TestBce:
    def test_matches_log2_at_half(self):
        assert float(bce(t(0.5), t(1.0))) == pytest.approx(math.log(2.0))

    def test_clamping_keeps_finite(self):
        assert math.isfinite(float(bce(t(0.0), t(1.0))))
        assert math.isfinite(float(bce(t(1.0), t(0.0))))


def test_losses_finite_on_floor_respecting_inputs():
    rng = np.random.default_rng(8)
    for _ in range(50):
        mu = torch.tensor(rng.normal(size=(3, 3)))
        lv = torch.tensor(rng.uniform(math.log(2e-3), 2.0, size=(3, 3)))
        y = torch.tensor(rng.normal(size=(3, 3)))
        assert math.isfinite(float(gaussian_nll(mu, lv, y)))

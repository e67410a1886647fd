"""Masked reconstruction likelihood, KL, ELBo assembly, and reporting metrics."""

import numpy as np
import pytest

from relayvi.errors import DomainError, MetricError, ShapeError
from relayvi.models import Mlp, build_decoder, decode
from relayvi.objective import (
    elastic_metric,
    elastic_metric_per_row,
    elbo,
    elbo_from_params,
    imputation_loss,
    kl_diag_gaussian,
    masked_recon_loglik,
)
from relayvi.posterior import init_bank, posterior_mean_values, selection_masks
from relayvi.seeding import derived_rng
from relayvi.tensor import Tensor

from oracles import finite_diff_grad, mc_kl_standard_normal, rel_err


def zero_decoder(t, d):
    m = Mlp.init([t, 8, d], np.random.default_rng(0))
    for w in m.weights:
        w.values[:] = 0.0
    return m


class TestMaskedReconLoglik:
    def test_perfect_reconstruction(self):
        x = np.array([[1.0, 2.0]])
        assert masked_recon_loglik(x, np.ones_like(x), Tensor(x)).item() == 0.0

    def test_single_observed_residual(self):
        out = masked_recon_loglik(
            np.array([[1.0, 0.0]]), np.array([[1.0, 0.0]]), Tensor(np.array([[0.0, 0.0]]))
        )
        assert out.item() == -0.5

    def test_masked_perturbation_bit_exact_zero_effect(self):
        rng = np.random.default_rng(0)
        x = rng.standard_normal((3, 5))
        mask = (rng.random((3, 5)) > 0.4).astype(np.float64)
        recon_val = rng.standard_normal((3, 5))
        base = masked_recon_loglik(x, mask, Tensor(recon_val)).item()
        x2 = x.copy()
        x2[mask == 0.0] += rng.standard_normal((mask == 0.0).sum()) * 100
        assert masked_recon_loglik(x2, mask, Tensor(recon_val)).item() == base

    def test_masked_gradient_exactly_zero(self):
        rng = np.random.default_rng(1)
        x = rng.standard_normal((2, 4))
        mask = np.array([[1.0, 0.0, 1.0, 0.0], [0.0, 1.0, 1.0, 1.0]])
        recon = Tensor(rng.standard_normal((2, 4)), requires_grad=True)
        masked_recon_loglik(x, mask, recon).backward()
        np.testing.assert_array_equal(recon.grad[mask == 0.0], 0.0)

    def test_shape_mismatch(self):
        with pytest.raises(ShapeError):
            masked_recon_loglik(np.ones((2, 3)), np.ones((2, 3)), Tensor(np.ones((3, 2))))


class TestKlDiagGaussian:
    def test_prior_equals_posterior(self):
        assert kl_diag_gaussian(Tensor(np.zeros((1, 3))), Tensor(np.ones((1, 3)))).item() == 0.0

    def test_unit_shift(self):
        assert kl_diag_gaussian(Tensor(np.array([[1.0]])), Tensor(np.array([[1.0]]))).item() == 0.5

    def test_matches_monte_carlo(self):
        mu, sigma = 0.7, 1.3
        closed = kl_diag_gaussian(Tensor(np.array([[mu]])), Tensor(np.array([[sigma]]))).item()
        mc = mc_kl_standard_normal(mu, sigma, n_samples=1_000_000, seed=0)
        assert abs(closed - mc) / abs(mc) < 0.01

    def test_nonnegative_and_zero_iff_standard(self):
        rng = np.random.default_rng(2)
        for _ in range(20):
            mu = Tensor(rng.standard_normal((4, 3)))
            sigma = Tensor(rng.uniform(0.3, 2.5, (4, 3)))
            assert kl_diag_gaussian(mu, sigma).item() >= -1e-12
        assert kl_diag_gaussian(Tensor(np.zeros((2, 2))), Tensor(np.ones((2, 2)))).item() == 0.0

    def test_nonpositive_sigma_rejected(self):
        with pytest.raises(DomainError):
            kl_diag_gaussian(Tensor(np.zeros((1, 2))), Tensor(np.array([[1.0, 0.0]])))

    def test_batch_averaging(self):
        mu = Tensor(np.array([[1.0], [0.0]]))
        sigma = Tensor(np.ones((2, 1)))
        assert kl_diag_gaussian(mu, sigma).item() == pytest.approx(0.25)


class TestElbo:
    def test_degenerate_breakdown(self):
        # zero decoder, zero data, full mask, noise forced off: recon 0, kl = mean of rows' 1/2 sum mu^2
        bank = init_bank(2, 3, (2,), 0.5, seed=0)
        decoder = zero_decoder(3, 4)
        x = np.zeros((2, 4))
        out = elbo(bank, [0, 1], decoder, x, np.ones_like(x), noise_seed=0, noise=np.zeros((2, 3)))
        assert out.recon_loglik.item() == 0.0
        mu = posterior_mean_values(bank, [0, 1])
        expected_kl = 0.5 * (mu**2).sum(axis=1).mean()
        assert out.kl.item() == pytest.approx(expected_kl, rel=1e-12)

    def test_none_mask_equals_all_ones(self):
        bank = init_bank(3, 4, (3,), 0.5, seed=1)
        decoder = build_decoder((64,), 4, 5, seed=2)
        x = derived_rng(3).standard_normal((3, 5))
        a = elbo(bank, [0, 2], decoder, x, None, noise_seed=9)
        b = elbo(bank, [0, 2], decoder, x, np.ones_like(x), noise_seed=9)
        assert a.recon_loglik.item() == b.recon_loglik.item()
        assert a.kl.item() == b.kl.item()
        assert a.elbo.item() == b.elbo.item()

    def test_breakdown_identity(self):
        bank = init_bank(3, 4, (3,), 0.5, seed=1)
        decoder = build_decoder((64,), 4, 5, seed=2)
        x = derived_rng(4).standard_normal((3, 5))
        out = elbo(bank, [1], decoder, x, None, noise_seed=5)
        assert out.elbo.item() == out.recon_loglik.item() - out.kl.item()

    def test_batch_row_permutation_tolerance(self):
        bank = init_bank(6, 4, (4,), 0.5, seed=3)
        decoder = build_decoder((64,), 4, 7, seed=4)
        x = derived_rng(5).standard_normal((6, 7))
        noise = derived_rng(6).standard_normal((6, 4))
        rows = np.arange(6)
        perm = np.array([3, 1, 5, 0, 4, 2])
        a = elbo(bank, rows, decoder, x, None, noise_seed=0, noise=noise)
        b = elbo(bank, rows[perm], decoder, x, None, noise_seed=0, noise=noise[perm])
        assert abs(a.elbo.item() - b.elbo.item()) <= 1e-9 * max(1.0, abs(a.elbo.item()))

    def test_gradients_all_parameter_classes(self):
        # small joint model, fixed noise and selection, against finite differences
        t, d, n, k = 3, 4, 2, 3
        bank = init_bank(n, t, (k,), 0.7, seed=7)
        decoder = build_decoder((64,), t, d, seed=8)
        x = derived_rng(9).standard_normal((n, d))
        mask = (derived_rng(10).random((n, d)) > 0.3).astype(np.float64)
        rows = np.arange(n)
        masks = selection_masks(bank, rows)
        noise = derived_rng(11).standard_normal((n, t))

        out = elbo(bank, rows, decoder, x, mask, noise_seed=0, masks=masks, noise=noise)
        out.elbo.backward()

        group = bank.groups[0]
        arrays = [
            group.vectors.values.copy(),
            group.coeffs.values.copy(),
            bank.mu_eps.values.copy(),
            bank.log_sigma.values.copy(),
            *[w.values.copy() for w in decoder.weights],
            *[b.values.copy() for b in decoder.biases],
        ]
        tensors = [group.vectors, group.coeffs, bank.mu_eps, bank.log_sigma, *decoder.weights, *decoder.biases]

        def forward_np(vec, cf, eps, ls, *net):
            mu = (cf * masks[0]) @ vec + eps
            sigma = np.exp(ls)
            z = mu + sigma * noise
            h = z
            n_layers = len(net) // 2
            for i in range(n_layers):
                h = h @ net[i] + net[n_layers + i]
                if i != n_layers - 1:
                    h = np.maximum(h, 0.0)
            recon = -0.5 * (((x - h) * mask) ** 2).sum()
            kl = 0.5 * (mu**2 + sigma**2 - 1.0 - 2.0 * ls).sum(axis=1).mean()
            return recon - kl

        for i, p in enumerate(tensors):
            fd = finite_diff_grad(forward_np, arrays, which=i)
            assert rel_err(p.grad, fd) < 1e-4, f"parameter class {i} mismatch"


class TestElasticMetric:
    def test_perfect(self):
        x = np.ones((2, 2))
        assert elastic_metric(x, None, x) == 0.0

    def test_unit_residual(self):
        assert elastic_metric(np.array([[1.0]]), None, np.array([[0.0]])) == 2.0

    def test_negative_half_residual(self):
        assert elastic_metric(np.array([[0.0]]), None, np.array([[0.5]])) == 0.75

    def test_masked_entries_ignored_bitwise(self):
        x = np.array([[1.0, 5.0]])
        mask = np.array([[1.0, 0.0]])
        recon = np.array([[0.5, -100.0]])
        assert elastic_metric(x, mask, recon) == elastic_metric(
            np.array([[1.0, 999.0]]), mask, recon
        )

    def test_no_observed_entries(self):
        with pytest.raises(MetricError):
            elastic_metric(np.ones((1, 2)), np.zeros((1, 2)), np.ones((1, 2)))

    def test_nonnegative_zero_iff_perfect(self):
        rng = np.random.default_rng(3)
        x = rng.standard_normal((4, 6))
        recon = x.copy()
        recon[0, 0] += 1e-9
        assert elastic_metric(x, None, recon) > 0.0

    def test_per_row_variant(self):
        x = np.array([[1.0, 0.0], [0.0, 0.0]])
        recon = np.zeros((2, 2))
        np.testing.assert_allclose(elastic_metric_per_row(x, None, recon), [1.0, 0.0])


class TestImputationLoss:
    def test_perfect_on_missing(self):
        x = np.array([[1.0, 2.0]])
        mask = np.array([[1.0, 0.0]])
        recon = np.array([[5.0, 2.0]])
        assert imputation_loss(x, mask, recon) == 0.0

    def test_full_mask_rejected(self):
        with pytest.raises(MetricError):
            imputation_loss(np.ones((1, 2)), np.ones((1, 2)), np.ones((1, 2)))

    def test_unit_residual_on_missing(self):
        x = np.array([[1.0, 1.0]])
        mask = np.array([[1.0, 0.0]])
        recon = np.array([[1.0, 0.0]])
        assert imputation_loss(x, mask, recon) == 2.0

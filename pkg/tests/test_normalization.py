"""Normalization module: ADIS proposal updates and Z estimation."""

import numpy as np
import pytest

from gpe_ngd.errors import InsufficientCoverage
from gpe_ngd.normalization import (
    COV_INFLATION,
    AdisProposal,
    ZEstimate,
    estimate_z,
    make_initial_proposal,
    update_proposal,
)
from gpe_ngd.sampler import AnalyticTarget, DomainBox

GAUSS_1D = AnalyticTarget(lambda R: -0.5 * R[:, 0] ** 2)  # psi = exp(-x^2/2)
Z_GAUSS_1D = np.sqrt(np.pi)  # integral of exp(-x^2); box [-6, 6] truncation ~1e-16


def box1d():
    return DomainBox.cube(6.0, 1)


class TestUpdateProposal:
    def test_ema_one_takes_moments_times_inflation(self):
        q = make_initial_proposal(box1d())
        mean, cov = np.array([0.3]), np.array([[0.7]])
        q2 = update_proposal(q, (mean, cov), ema=1.0)
        assert q2.gauss_mean[0] == pytest.approx(0.3)
        assert q2.gauss_cov[0, 0] == pytest.approx(COV_INFLATION**2 * (0.7 + 1e-8))

    def test_ema_zero_no_change(self):
        q = make_initial_proposal(box1d())
        q2 = update_proposal(q, (np.array([5.0]), np.array([[9.0]])), ema=0.0)
        assert q2.gauss_mean[0] == q.gauss_mean[0]
        np.testing.assert_allclose(q2.gauss_cov, q.gauss_cov)

    def test_repeated_updates_converge_geometrically(self):
        q = make_initial_proposal(box1d())
        mean, cov = np.array([1.0]), np.array([[0.5]])
        gaps = []
        for _ in range(12):
            q = update_proposal(q, (mean, cov), ema=0.5)
            gaps.append(abs(q.gauss_mean[0] - 1.0))
        gaps = np.array(gaps)
        ratios = gaps[1:] / gaps[:-1]
        np.testing.assert_allclose(ratios, 0.5, rtol=1e-8)

    def test_alpha_unchanged(self):
        q = make_initial_proposal(box1d(), alpha=0.65)
        q2 = update_proposal(q, (np.zeros(1), np.eye(1)), ema=0.7)
        assert q2.alpha == 0.65


class TestEstimateZ:
    def test_uniform_integrand_exact(self):
        # psi == 1 on [0,1]^2 with a pure-uniform proposal: every weight is
        # exactly |D| = 1, so the estimate is exact with zero spread.
        box = DomainBox(np.zeros(2), np.ones(2))
        target = AnalyticTarget(lambda R: np.zeros(len(R)))
        q = AdisProposal(alpha=0.0, gauss_mean=np.zeros(2), gauss_cov=np.eye(2), box=box)
        z = estimate_z(target, q, n=256, seed=0)
        assert z.value == pytest.approx(1.0, abs=1e-12)
        assert z.std_error == pytest.approx(0.0, abs=1e-12)
        assert z.ess == pytest.approx(256.0)

    def test_analytic_gaussian_within_one_percent(self):
        q = make_initial_proposal(box1d(), alpha=0.8, scale=1.0)
        q = update_proposal(q, (np.zeros(1), np.array([[0.5]])), ema=1.0)
        z = estimate_z(GAUSS_1D, q, n=8000, seed=42)
        assert z.value == pytest.approx(Z_GAUSS_1D, rel=0.01)
        assert z.ess <= z.n_samples

    def test_matched_gaussian_high_ess(self):
        q = make_initial_proposal(box1d(), alpha=1.0)
        q = update_proposal(q, (np.zeros(1), np.array([[0.5]])), ema=1.0)
        z = estimate_z(GAUSS_1D, q, n=8000, seed=7)
        assert z.ess / z.n_samples >= 0.5

    def test_unbiased_over_seeds(self):
        q = make_initial_proposal(box1d(), alpha=0.8)
        q = update_proposal(q, (np.zeros(1), np.array([[0.5]])), ema=1.0)
        vals, ses = [], []
        for seed in range(100):
            z = estimate_z(GAUSS_1D, q, n=2000, seed=seed)
            vals.append(z.value)
            ses.append(z.std_error)
        mean = np.mean(vals)
        combined_se = np.sqrt(np.sum(np.square(ses))) / len(ses)
        assert abs(mean - Z_GAUSS_1D) < 3 * combined_se

    def test_defensive_weight_bound(self):
        # with alpha < 1 every weight is at most sup|psi|^2 |D| / (1-alpha)
        box = box1d()
        q = make_initial_proposal(box, alpha=0.8)
        # deliberately mismatched narrow proposal far from the mass
        q = update_proposal(q, (np.array([4.0]), np.array([[0.05]])), ema=1.0)
        rng = np.random.default_rng(3)
        R = box.sample_uniform(rng, 4000)
        psi2 = np.exp(2 * GAUSS_1D.log_abs(R))
        w = psi2 / q.density(R)
        bound = 1.0 * box.volume / (1 - q.alpha)  # sup |psi|^2 = 1
        assert np.all(w <= bound * (1 + 1e-12))

    def test_error_scales_with_sqrt_n(self):
        q = make_initial_proposal(box1d(), alpha=0.8)
        q = update_proposal(q, (np.zeros(1), np.array([[0.5]])), ema=1.0)
        se_n = np.mean([estimate_z(GAUSS_1D, q, 4000, seed=s).std_error for s in range(8)])
        se_2n = np.mean([estimate_z(GAUSS_1D, q, 8000, seed=100 + s).std_error for s in range(8)])
        assert se_n / se_2n == pytest.approx(np.sqrt(2.0), rel=0.2)

    def test_insufficient_coverage_raises(self):
        # alpha=1 Gaussian concentrated far outside the density's support
        box = DomainBox.cube(6.0, 1)
        target = AnalyticTarget(lambda R: -50.0 * (R[:, 0] + 5.0) ** 2)  # peak at -5
        q = AdisProposal(
            alpha=1.0,
            gauss_mean=np.array([5.9]),
            gauss_cov=np.array([[1e-4]]),
            box=box,
        )
        with pytest.raises(InsufficientCoverage):
            estimate_z(target, q, n=2000, seed=0)

    def test_invalid_inputs(self):
        q = make_initial_proposal(box1d())
        with pytest.raises(ValueError):
            estimate_z(GAUSS_1D, q, n=1, seed=0)
        with pytest.raises(ValueError):
            ZEstimate(value=-1.0, std_error=0.0, n_samples=10, ess=10.0)
        with pytest.raises(ValueError):
            AdisProposal(alpha=1.5, gauss_mean=np.zeros(1), gauss_cov=np.eye(1), box=box1d())

    def test_deterministic_given_seed(self):
        q = make_initial_proposal(box1d(), alpha=0.8)
        a = estimate_z(GAUSS_1D, q, n=1000, seed=5)
        b = estimate_z(GAUSS_1D, q, n=1000, seed=5)
        assert a.value == b.value and a.ess == b.ess

"""
Signal priors and their scalar denoisers.

Known values:
- Gaussian prior: E[x|r] = r/(1+v), mmse = v/(1+v), decision function 0
- QPSK at high SNR: posterior mean saturates to the nearest symbol
"""
from dataclasses import dataclass

import numpy as np
import pytest

from diagnostics import (
    divergence_free_check, gaussian_degeneracy_check, jensen_check, laplacian_check,
    mmse_bound_check, mmse_oracle_check,
)
from models import ExtrinsicMessage
from priors import (
    BernoulliGaussianPrior, GaussianPrior, Prior, QpskPrior, decision_function, extrinsic_denoise,
    extrinsic_variance, make_prior, mmse, posterior_mean, require_non_gaussian,
)
from rng import SeededRNG
from validation import DegenerateMessageError, NumericalGuardError, ValidationError


@dataclass(frozen=True)
class _ScaledGaussian(Prior):
    """mmse(v) = v / (1 + eps v): extrinsic precision eps."""
    eps: float = 1e-13
    kind = 'scaled-test'

    def posterior_mean(self, r, v):
        return np.asarray(r) / (1.0 + self.eps * v)

    def posterior_variance(self, r, v):
        return np.full(np.shape(r), self.mmse(v))

    def mmse(self, v):
        return v / (1.0 + self.eps * v)

    def sample(self, size, rng):
        return np.zeros(size, dtype=complex)

    @property
    def fourth_moment(self):
        return 0.0


class TestPosteriorMean:

    def test_gaussian(self):
        r = np.array([0.3 + 1j, -2.0])
        np.testing.assert_allclose(posterior_mean(GaussianPrior(), r, 0.5), r / 1.5)

    def test_qpsk_saturates(self):
        out = posterior_mean(QpskPrior(), 10 + 10j, 0.01)
        assert abs(out - (1 + 1j) / np.sqrt(2)) <= 1e-6

    def test_qpsk_bounded_by_symbol_modulus(self):
        r = SeededRNG(1).complex_normal(1000, variance=4.0)
        assert np.all(np.abs(QpskPrior().posterior_mean(r, 0.3)) <= 1.0 + 1e-12)

    def test_bg_against_monte_carlo(self):
        prior = BernoulliGaussianPrior(0.1)
        r, v = 0.3 + 0j, 0.5
        x = prior.sample(10 ** 6, SeededRNG(5))
        w = np.exp(-np.abs(r - x) ** 2 / v)
        estimate = np.sum(w * x) / np.sum(w)
        # delta-method standard error of the ratio estimator
        resid = w * (x - estimate)
        stderr = np.sqrt(np.sum(np.abs(resid) ** 2)) / np.sum(w)
        assert abs(prior.posterior_mean(r, v) - estimate) <= 3 * stderr

    def test_rejects_nonpositive_variance(self):
        with pytest.raises(ValidationError):
            posterior_mean(QpskPrior(), 1.0, 0.0)


class TestMmse:

    def test_gaussian_exact(self):
        for v in (0.01, 1.0, 10.0):
            assert mmse(GaussianPrior(), v) == pytest.approx(v / (1 + v), rel=1e-14)

    @pytest.mark.parametrize('prior', [BernoulliGaussianPrior(0.1), QpskPrior()])
    def test_noiseless_limit(self, prior):
        assert mmse(prior, 1e-8) <= 1e-6

    @pytest.mark.parametrize('prior', [BernoulliGaussianPrior(0.1), BernoulliGaussianPrior(0.5), QpskPrior()])
    def test_below_gaussian_and_monotone(self, prior):
        assert mmse_bound_check(prior)['passed']

    def test_qpsk_against_monte_carlo(self):
        assert mmse_oracle_check(QpskPrior(), 0.5, 10 ** 6, SeededRNG(2))['passed']

    def test_bg_against_monte_carlo(self):
        assert mmse_oracle_check(BernoulliGaussianPrior(0.1), 0.1, 10 ** 6, SeededRNG(3))['passed']

    def test_rejects_nonpositive_variance(self):
        with pytest.raises(ValidationError):
            mmse(QpskPrior(), -1.0)


class TestExtrinsic:

    def test_gaussian_decision_function_vanishes(self):
        assert gaussian_degeneracy_check(10 ** 4, SeededRNG(4))['passed']

    def test_gaussian_degeneracy_at_small_variance(self):
        report = gaussian_degeneracy_check(10 ** 4, SeededRNG(4), variances=(1e-6, 1e-4))
        assert report['passed'], report
        assert report['variances'] == [1e-6, 1e-4]

    def test_variance_relation(self):
        prior = BernoulliGaussianPrior(0.1)
        v = 0.2
        out = extrinsic_denoise(prior, ExtrinsicMessage(mean=np.array([0.1 + 0.2j, 3.0]), variance=v))
        assert 1.0 / out.variance == pytest.approx(1.0 / mmse(prior, v) - 1.0 / v, rel=1e-12)
        assert out.variance > 0

    def test_uninformative_input(self):
        # extrinsic precision 1/mmse - 1/v tends to the prior precision 1
        assert extrinsic_variance(BernoulliGaussianPrior(0.1), 1e6) == pytest.approx(1.0, abs=1e-3)

    def test_degenerate_precision_raises(self):
        with pytest.raises(DegenerateMessageError):
            extrinsic_variance(_ScaledGaussian(), 1.0)

    def test_mmse_above_input_raises(self):
        with pytest.raises(NumericalGuardError) as info:
            extrinsic_variance(_ScaledGaussian(eps=-0.5), 1.0)
        assert info.value.diagnostics['prior'] == 'scaled-test'

    def test_decision_function_formula(self):
        prior = QpskPrior()
        r, v = np.array([0.4 - 0.1j]), 0.3
        expected = extrinsic_variance(prior, v) * (prior.posterior_mean(r, v) / mmse(prior, v) - r / v)
        np.testing.assert_allclose(decision_function(prior, r, v), expected)

    @pytest.mark.parametrize('prior', [BernoulliGaussianPrior(0.1), QpskPrior()])
    def test_divergence_free(self, prior):
        assert divergence_free_check(prior, 0.2, 200000, SeededRNG(6))['passed']

    def test_gaussian_prior_rejected_by_engine(self):
        with pytest.raises(ValidationError):
            require_non_gaussian(GaussianPrior())

    def test_full_activity_bg_is_gaussian(self):
        prior = BernoulliGaussianPrior(1.0)
        assert prior.is_gaussian
        with pytest.raises(ValidationError):
            require_non_gaussian(prior)


class TestMomentIdentities:

    @pytest.mark.parametrize('prior', [BernoulliGaussianPrior(0.1), QpskPrior()])
    @pytest.mark.parametrize('v', [0.05, 0.5])
    def test_laplacian_identity(self, prior, v):
        assert laplacian_check(prior, v, 500, SeededRNG(7))['passed']

    @pytest.mark.parametrize('prior', [BernoulliGaussianPrior(0.1), QpskPrior()])
    def test_jensen(self, prior):
        assert jensen_check(prior, 0.2, 200000, SeededRNG(8))['passed']

    @pytest.mark.parametrize('prior', [BernoulliGaussianPrior(0.1), QpskPrior()])
    def test_unit_variance(self, prior):
        x = prior.sample(200000, SeededRNG(9))
        p = np.abs(x) ** 2
        assert abs(p.mean() - 1.0) <= 5 * p.std(ddof=1) / np.sqrt(p.size)
        assert abs(x.mean()) <= 5 * np.sqrt(1.0 / x.size)

    def test_fourth_moments(self):
        assert BernoulliGaussianPrior(0.1).fourth_moment == pytest.approx(20.0)
        assert QpskPrior().fourth_moment == 1.0


class TestMakePrior:

    def test_aliases(self):
        assert isinstance(make_prior('bg', 0.2), BernoulliGaussianPrior)
        assert isinstance(make_prior('QPSK'), QpskPrior)
        assert make_prior('gaussian').is_gaussian

    def test_unknown(self):
        with pytest.raises(ValidationError):
            make_prior('laplace')

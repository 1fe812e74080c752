"""
State evolution, the asymptotic normalization and fixed-point analysis.

Known values:
- Point mass at lambda = 1: gamma(v) = (sigma2 + v) / delta
- Single atom with delta = 1: mse_AB = sigma2 on every iteration
"""
import numpy as np
import pytest

from ensembles import density_family, make_density, mp_atoms
from models import EnsembleSpec
from priors import BernoulliGaussianPrior, QpskPrior, mmse
from rng import SeededRNG
from state_evolution import (
    find_fixed_points, gamma_asymptotic, gamma_cross, locate_threshold, se_map, se_run, se_step,
    threshold_scan,
)
from validation import ValidationError

POINT_MASS = make_density([1.0])


class TestGammaAsymptotic:

    def test_point_mass_full_rate(self):
        assert gamma_asymptotic(POINT_MASS, 1.0, 0.01, 0.3) == pytest.approx(0.31, rel=1e-14)

    def test_point_mass_half_rate(self):
        assert gamma_asymptotic(POINT_MASS, 0.5, 0.01, 0.3) == pytest.approx(0.62, rel=1e-14)

    def test_mp_against_monte_carlo(self):
        # lambda ~ MP(0.5) sampled by inverse CDF from the atomized law
        density = mp_atoms(0.5, 4096)
        u = SeededRNG(1).uniform(10 ** 6)
        lam = np.interp(u, (np.arange(4096) + 0.5) / 4096, density.eigenvalues)
        mc = 1.0 / np.mean(0.5 * lam / (0.01 + 0.1 * lam))
        assert gamma_asymptotic(density, 0.5, 0.01, 0.1) == pytest.approx(mc, rel=1e-3)

    def test_increasing_in_v(self):
        density = mp_atoms(0.5, 1024)
        values = [gamma_asymptotic(density, 0.5, 0.01, v) for v in np.logspace(-4, 1, 40)]
        assert np.all(np.diff(values) > 0)

    def test_rejects_nonpositive_v(self):
        with pytest.raises(ValidationError):
            gamma_asymptotic(POINT_MASS, 1.0, 0.01, 0.0)

    def test_cross_term_diagonal(self):
        # with v_t = v_s = zeta the cross term reduces to gamma(v) and gamma - v = mse_AB
        v = 0.2
        density = mp_atoms(0.5, 1024)
        value = gamma_cross(density, 0.5, 0.01, v, v, v)
        assert value.real == pytest.approx(gamma_asymptotic(density, 0.5, 0.01, v), rel=1e-12)


class TestSeStep:

    def test_single_atom_constant(self):
        prior = BernoulliGaussianPrior(0.1)
        trace = se_run(POINT_MASS, 1.0, 0.01, prior, 10)
        np.testing.assert_allclose(trace.mse_ab, 0.01 * np.ones(10), rtol=1e-12)

    def test_huge_noise_uninformative(self):
        mse_ab, next_ba, _ = se_step(1.0, mp_atoms(0.5, 512), 0.5, 1e6, QpskPrior())
        assert mse_ab > 1e5
        assert next_ba == pytest.approx(1.0, abs=1e-3)

    def test_monotone_decreasing(self):
        trace = se_run(mp_atoms(0.5, 1024), 0.5, 1e-4, BernoulliGaussianPrior(0.1), 50)
        assert np.all(np.diff(trace.mse_ba) <= 1e-15)

    def test_trace_shape_and_start(self):
        prior = QpskPrior()
        trace = se_run(mp_atoms(0.5, 512), 0.5, 0.01, prior, 7)
        assert len(trace) == 7
        assert trace.mse_ba[0] == 1.0
        assert np.all(trace.mse_posterior <= 1.0)
        np.testing.assert_allclose(trace.mse_posterior, [mmse(prior, v) for v in trace.mse_ab])


class TestFixedPoints:

    def test_single_atom_unique(self):
        prior = BernoulliGaussianPrior(0.1)
        report = find_fixed_points(POINT_MASS, 1.0, 1e-4, prior)
        assert report.count == 1
        fp, label = report.fixed_points[0]
        assert label == 'reachable'
        assert all(report.converged)

    def test_residual(self):
        prior = QpskPrior()
        density = mp_atoms(0.7, 512)
        report = find_fixed_points(density, 0.7, 0.01, prior)
        for fp, _ in report.fixed_points:
            assert abs(se_map(fp, density, 0.7, 0.01, prior) - fp) <= 1e-10 * max(1.0, fp)

    def test_uninformative_limit(self):
        report = find_fixed_points(mp_atoms(0.5, 512), 0.5, 1e6, QpskPrior())
        assert report.stable_points[0] == pytest.approx(1.0, abs=1e-6)

    def test_rejects_bad_start(self):
        with pytest.raises(ValidationError):
            find_fixed_points(POINT_MASS, 1.0, 0.01, QpskPrior(), init_grid=[1.5])


class TestThreshold:
    """Bernoulli-Gaussian at low noise has a rate band with several fixed points."""

    prior = BernoulliGaussianPrior(0.1)
    sigma2 = 1e-4

    def family(self):
        return density_family(EnsembleSpec('iid-gaussian'), atoms=256)

    def test_scan_structure(self):
        rows = threshold_scan(self.family(), self.sigma2, self.prior, [0.12, 0.9], init_grid=[1e-8, 1e-3, 1.0])
        assert [r['delta'] for r in rows] == [0.12, 0.9]
        assert rows[-1]['fp_count'] == 1
        assert rows[-1]['fp_values'][0] < 1e-2
        for row in rows:
            assert len(row['labels']) == row['fp_count']

    def test_small_rate_stays_near_one(self):
        rows = threshold_scan(self.family(), self.sigma2, self.prior, [0.02], init_grid=[1.0])
        assert max(rows[0]['fp_values']) > 0.5

    def test_locate_requires_bracket(self):
        with pytest.raises(ValidationError):
            locate_threshold(self.family(), self.sigma2, self.prior, 0.8, 0.9, init_grid=[1e-8, 1.0])

    def test_locate_between_regimes(self):
        grid = [1e-8, 1e-3, 1.0]
        family = self.family()
        deltas = [round(0.1 + 0.02 * i, 2) for i in range(26)]
        rows = threshold_scan(family, self.sigma2, self.prior, deltas, init_grid=grid)
        brackets = [(a['delta'], b['delta']) for a, b in zip(rows, rows[1:])
                    if a['fp_count'] >= 2 and b['fp_count'] == 1]
        assert brackets, [(r['delta'], r['fp_count']) for r in rows]
        lo, hi = brackets[-1]

        tol = 1e-3
        threshold = locate_threshold(family, self.sigma2, self.prior, lo, hi, tol=tol, init_grid=grid)
        assert lo < threshold < hi

        def count(delta):
            return find_fixed_points(family(delta), delta, self.sigma2, self.prior, init_grid=grid).count

        assert count(threshold - tol) >= 2
        assert count(threshold + tol) == 1

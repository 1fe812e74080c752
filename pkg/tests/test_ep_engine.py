"""
EP iteration: LMMSE module, prior module, full runs and restarts.

Known values:
- Single-atom spectrum (all sigma_i = 1, M = N): gamma = sigma2 + v and
  v_AB = sigma2 on every iteration
"""
import numpy as np
import pytest

from ensembles import build_measurement, sample_haar
from ep_engine import (
    EngineOptions, continue_from_history, gamma_finite, lmmse_apply, lmmse_posterior, make_instance,
    module_a_update, module_b_update, run_ep,
)
from models import EnsembleSpec, ExtrinsicMessage, SvdFactors
from priors import BernoulliGaussianPrior, GaussianPrior
from rng import SeededRNG
from state_evolution import gamma_asymptotic, se_run
from validation import NumericalGuardError, ValidationError


def _instance(prior, kind='row-orthogonal', m=32, n=64, sigma2=0.01, seed=0, kappa=1.0):
    stream = SeededRNG(seed)
    model = build_measurement(EnsembleSpec(kind, kappa=kappa), m, n, stream.child(0))
    return make_instance(model, prior, sigma2, stream.child(1))


class TestLmmse:

    def test_isotropic_norm(self):
        f = SvdFactors(left=sample_haar(8, 1), singular=np.ones(8), right=sample_haar(8, 2))
        r = SeededRNG(3).complex_normal(8)
        out = lmmse_apply(f, 0.1, 0.4, r)
        assert np.linalg.norm(out) == pytest.approx(np.linalg.norm(r) / 0.5, rel=1e-12)

    def test_zero_residual(self):
        f = SvdFactors(left=sample_haar(4, 1), singular=np.ones(4), right=sample_haar(8, 2))
        np.testing.assert_array_equal(lmmse_apply(f, 0.1, 1.0, np.zeros(4)), np.zeros(8))

    def test_matches_dense_solve(self, bg_prior):
        inst = _instance(bg_prior, kind='geometric', kappa=10.0, seed=4)
        A = inst.model.factors.matrix()
        sigma2, v = 0.05, 0.3
        r = SeededRNG(5).complex_normal(inst.model.m)
        dense = A.conj().T @ np.linalg.solve(sigma2 * np.eye(inst.model.m) + v * A @ A.conj().T, r)
        out = lmmse_apply(inst.model.factors, sigma2, v, r)
        assert np.linalg.norm(out - dense) / np.linalg.norm(dense) <= 1e-9

    def test_vanishing_denominator(self):
        f = SvdFactors(left=np.eye(2), singular=np.array([1.0, 0.0]), right=np.eye(2))
        with pytest.raises(NumericalGuardError):
            lmmse_apply(f, 0.0, 1.0, np.ones(2))


class TestGamma:

    def test_single_atom(self):
        f = SvdFactors(left=np.eye(4), singular=np.ones(4), right=np.eye(4))
        assert gamma_finite(f, 0.01, 0.7, 4) == pytest.approx(0.71, rel=1e-14)

    def test_large_noise(self):
        f = SvdFactors(left=np.eye(4), singular=np.ones(4), right=np.eye(4))
        assert 1.0 / gamma_finite(f, 1e12, 1.0, 4) <= 1e-11

    def test_equals_asymptotic_on_realized_atoms(self, bg_prior):
        inst = _instance(bg_prior, kind='iid-gaussian', m=512, n=1024, seed=6)
        model = inst.model
        finite = gamma_finite(model.factors, 0.01, 0.1, model.n)
        asymptotic = gamma_asymptotic(model.density, model.delta, 0.01, 0.1)
        assert finite == pytest.approx(asymptotic, rel=1e-12)

    def test_all_zero_spectrum(self):
        f = SvdFactors(left=np.eye(2), singular=np.zeros(2), right=np.eye(2))
        with pytest.raises(NumericalGuardError):
            gamma_finite(f, 0.1, 1.0, 2)


class TestModules:

    def test_first_update_single_atom(self, bg_prior):
        inst = _instance(bg_prior, m=16, n=16)
        start = ExtrinsicMessage(mean=np.zeros(16, dtype=complex), variance=1.0)
        out = module_a_update(start, inst.y, inst.model, inst.sigma2)
        assert out.variance == pytest.approx(inst.sigma2, rel=1e-12)

    def test_zero_residual_keeps_mean(self, bg_prior):
        inst = _instance(bg_prior)
        mean = SeededRNG(9).complex_normal(inst.model.n)
        out = module_a_update(ExtrinsicMessage(mean, 0.5), inst.model.apply(mean), inst.model, inst.sigma2)
        np.testing.assert_allclose(out.mean, mean, atol=1e-12)

    def test_nonpositive_variance_guard(self, bg_prior):
        inst = _instance(bg_prior)
        with pytest.raises(NumericalGuardError) as info:
            module_a_update(ExtrinsicMessage(np.zeros(inst.model.n), 0.5), inst.y, inst.model, inst.sigma2, gamma=0.4)
        assert info.value.diagnostics['v_BA'] == 0.5

    def test_extrinsic_is_posterior_divided_by_prior_message(self, bg_prior):
        inst = _instance(bg_prior, kind='geometric', kappa=5.0, seed=2)
        msg = ExtrinsicMessage(mean=SeededRNG(3).complex_normal(inst.model.n, variance=0.2), variance=0.3)
        x_a, v_a = lmmse_posterior(inst.model, inst.y, inst.sigma2, msg)
        v_div = 1.0 / (1.0 / v_a - 1.0 / msg.variance)
        x_div = v_div * (x_a / v_a - msg.mean / msg.variance)
        out = module_a_update(msg, inst.y, inst.model, inst.sigma2)
        assert v_div == pytest.approx(out.variance, rel=1e-10)
        np.testing.assert_allclose(x_div, out.mean, rtol=1e-10, atol=1e-10)

    def test_module_b_rejects_gaussian(self):
        with pytest.raises(ValidationError):
            module_b_update(ExtrinsicMessage(np.zeros(4), 1.0), GaussianPrior())


class TestRunEp:

    def test_single_atom_v_ab_is_noise(self, bg_prior):
        inst = _instance(bg_prior, m=64, n=64, sigma2=0.01)
        record = run_ep(inst, bg_prior, 8)
        np.testing.assert_allclose(record.v_ab, 0.01 * np.ones(record.iterations), rtol=1e-12)

    def test_uninformative_measurements(self, qpsk_prior):
        inst = _instance(qpsk_prior, n=256, m=128, sigma2=1e6)
        record = run_ep(inst, qpsk_prior, 3)
        for value in record.mse_b_emp:
            assert value == pytest.approx(1.0, rel=0.05)

    def test_record_lengths(self, bg_prior):
        record = run_ep(_instance(bg_prior), bg_prior, 4, EngineOptions(keep_history=True))
        assert record.iterations == 4
        for name in ('v_ba', 'gamma_t', 'mse_b_emp', 'mse_post_emp', 'mse_a_emp', 'h_dot_q', 'b_dot_m', 'hq_cross'):
            assert len(getattr(record, name)) == 4
        assert [len(row) for row in record.hq_cross] == [2, 3, 4, 5]
        hist = record.history
        assert hist.Q.shape == (64, 5) and hist.B.shape == (64, 5)
        assert hist.M.shape == (64, 4) and hist.H.shape == (64, 4)

    def test_history_consistent_with_metrics(self, bg_prior):
        inst = _instance(bg_prior)
        record = run_ep(inst, bg_prior, 3, EngineOptions(keep_history=True))
        hist = record.history
        n = inst.model.n
        for t in range(3):
            assert np.vdot(hist.Q[:, t], hist.Q[:, t]).real / n == pytest.approx(record.mse_b_emp[t], rel=1e-12)
            assert np.vdot(hist.H[:, t], hist.Q[:, t]) / n == pytest.approx(record.h_dot_q[t], rel=1e-10, abs=1e-14)
        np.testing.assert_allclose(hist.B, inst.model.factors.right.conj().T @ hist.Q, atol=1e-12)

    def test_starts_from_prior(self, bg_prior):
        inst = _instance(bg_prior)
        record = run_ep(inst, bg_prior, 1, EngineOptions(keep_history=True))
        assert record.v_ba[0] == 1.0
        np.testing.assert_array_equal(record.history.Q[:, 0], inst.x_true)

    def test_asymptotic_gamma_reproduces_se(self, qpsk_prior):
        inst = _instance(qpsk_prior, kind='geometric', kappa=8.0, m=64, n=128)
        model = inst.model
        record = run_ep(inst, qpsk_prior, 6, EngineOptions(gamma_mode='asymptotic'))
        se = se_run(model.density, model.delta, inst.sigma2, qpsk_prior, 6)
        np.testing.assert_allclose(record.v_ba, se.mse_ba[:record.iterations], rtol=1e-12)
        np.testing.assert_allclose(record.v_ab, se.mse_ab[:record.iterations], rtol=1e-12)

    def test_posterior_below_incoming_variance(self, bg_prior):
        inst = _instance(bg_prior, n=512, m=256, seed=3)
        record = run_ep(inst, bg_prior, 8)
        for post, v_ab, v_ba in zip(record.mse_post_emp, record.v_ab, record.v_ba):
            assert post <= v_ab
            assert v_ba > 0

    def test_early_stop(self, bg_prior):
        inst = _instance(bg_prior, m=64, n=64, sigma2=0.01)
        record = run_ep(inst, bg_prior, 200, EngineOptions(early_stop=True))
        assert record.stop_reason == 'converged'
        assert record.iterations < 200

    def test_damping_range(self, bg_prior):
        with pytest.raises(ValidationError):
            run_ep(_instance(bg_prior), bg_prior, 2, EngineOptions(damping=0.0))

    def test_full_activity_bg_rejected(self):
        prior = BernoulliGaussianPrior(1.0)
        with pytest.raises(ValidationError):
            run_ep(_instance(prior), prior, 2)

    def test_deterministic(self, bg_prior):
        a = run_ep(_instance(bg_prior, seed=5), bg_prior, 4)
        b = run_ep(_instance(bg_prior, seed=5), bg_prior, 4)
        assert a.mse_post_emp == b.mse_post_emp


class TestContinueFromHistory:

    def test_same_factor_reproduces_run(self, bg_prior):
        inst = _instance(bg_prior)
        record = run_ep(inst, bg_prior, 4, EngineOptions(keep_history=True))
        rerun = continue_from_history(inst, bg_prior, record, 2, inst.model.factors.right, steps=2)
        np.testing.assert_allclose(rerun.mse_post_emp, record.mse_post_emp[2:4], rtol=1e-10)
        np.testing.assert_allclose(rerun.v_ab, record.v_ab[2:4], rtol=1e-12)

    def test_requires_history(self, bg_prior):
        inst = _instance(bg_prior)
        record = run_ep(inst, bg_prior, 2)
        with pytest.raises(ValidationError):
            continue_from_history(inst, bg_prior, record, 0, inst.model.factors.right)

    def test_index_out_of_range(self, bg_prior):
        inst = _instance(bg_prior)
        record = run_ep(inst, bg_prior, 2, EngineOptions(keep_history=True))
        with pytest.raises(ValidationError):
            continue_from_history(inst, bg_prior, record, 2, inst.model.factors.right)

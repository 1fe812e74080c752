"""
Full-size acceptance runs. Minutes rather than seconds; deselect with
``pytest -m "not slow"``.
"""
import numpy as np
import pytest

from config import TestingConfig, build_experiment_config
from diagnostics import divergence_free_check, gaussian_degeneracy_check, mmse_oracle_check
from ensembles import build_measurement, mp_atoms
from ep_engine import gamma_finite, make_instance, run_ep
from harness import ExperimentRunner, verify_conditioning
from haar_analysis import moment_check, trace_clt_check
from models import EnsembleSpec
from priors import BernoulliGaussianPrior, QpskPrior
from rng import SeededRNG
from state_evolution import gamma_asymptotic, se_run

pytestmark = pytest.mark.slow

ACCEPTANCE_RUN = {
    'n': '2048', 'delta': '0.5', 'sigma2': '0.01', 't_max': '10', 'trials': '20',
    'ensemble.kind': 'row-orthogonal', 'prior.kind': 'bg', 'prior.p': '0.1',
    'checks': 'se-agreement,orthogonality,variance-bookkeeping',
}


@pytest.fixture(scope='module')
def acceptance_report(tmp_path_factory):
    cfg = build_experiment_config(dict(ACCEPTANCE_RUN, output_dir=str(tmp_path_factory.mktemp('acceptance'))),
                                  runtime=TestingConfig)
    return ExperimentRunner(cfg, TestingConfig).run()


def test_state_evolution_agreement(acceptance_report):
    assert acceptance_report.succeeded == 20
    assert acceptance_report.checks['se-agreement']['passed'], acceptance_report.checks['se-agreement']['rows']


def test_error_orthogonality(acceptance_report):
    assert acceptance_report.checks['orthogonality']['passed']


def test_conditioning_identities(tmp_path):
    cfg = build_experiment_config({'conditioning.n': '64', 'conditioning.t': '3', 'output_dir': str(tmp_path)},
                                  runtime=TestingConfig)
    payload = verify_conditioning(cfg, TestingConfig)
    for report in payload['identities']:
        assert report['passed'], report['residuals']
    for report in payload['residual_haar']:
        assert report['passed'], report['residuals']


@pytest.mark.parametrize('n', [4, 8])
def test_haar_moments(n):
    assert moment_check(n, 100000, SeededRNG(1, n))['passed']


def test_trace_clt():
    assert trace_clt_check(256, 3, 2000, SeededRNG(2))['passed']


@pytest.mark.parametrize('prior', [BernoulliGaussianPrior(0.1), QpskPrior()])
@pytest.mark.parametrize('v', [0.05, 0.5])
def test_denoiser_divergence_free(prior, v):
    assert divergence_free_check(prior, v, 10 ** 6, SeededRNG(3))['passed']


def test_gaussian_degeneracy():
    assert gaussian_degeneracy_check(10 ** 4, SeededRNG(4))['passed']


def test_gamma_consistency():
    stream = SeededRNG(5)
    model = build_measurement(EnsembleSpec('iid-gaussian'), 512, 1024, stream)
    finite = gamma_finite(model.factors, 0.01, 0.1, model.n)
    assert finite == pytest.approx(gamma_asymptotic(model.density, model.delta, 0.01, 0.1), rel=1e-12)
    assert finite == pytest.approx(gamma_asymptotic(mp_atoms(0.5), 0.5, 0.01, 0.1), rel=0.05)


@pytest.mark.parametrize('prior', [BernoulliGaussianPrior(0.1), QpskPrior()])
@pytest.mark.parametrize('v', [0.01, 0.1, 1.0, 10.0])
def test_mmse_oracle(prior, v):
    assert mmse_oracle_check(prior, v, 10 ** 7, SeededRNG(6), sigmas=3)['passed']


def test_single_atom_closed_form():
    prior = BernoulliGaussianPrior(0.1)
    stream = SeededRNG(7)
    model = build_measurement(EnsembleSpec('row-orthogonal'), 256, 256, stream.child(0))
    record = run_ep(make_instance(model, prior, 0.01, stream.child(1)), prior, 10)
    se = se_run(model.density, 1.0, 0.01, prior, 10)
    np.testing.assert_allclose(record.v_ab, 0.01, rtol=1e-12)
    np.testing.assert_allclose(se.mse_ab, 0.01, rtol=1e-12)

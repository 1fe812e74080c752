"""
Run-level checks against state evolution on a handful of live runs.
"""
from dataclasses import replace

import pytest

from diagnostics import (
    CheckContext, fourth_moment, gaussianity, gram_consistency, module_a_mse, orthogonality,
    run_checks, se_agreement, variance_bookkeeping,
)
from ensembles import build_measurement
from ep_engine import EngineOptions, make_instance, run_ep
from models import EnsembleSpec
from priors import QpskPrior
from rng import trial_stream
from state_evolution import se_run
from validation import ValidationError

N, M, SIGMA2, ITERATIONS, TRIALS = 1024, 512, 0.1, 4, 6


@pytest.fixture(scope='module')
def context():
    prior = QpskPrior()
    records, models = [], []
    for trial in range(TRIALS):
        stream = trial_stream(21, trial)
        model = build_measurement(EnsembleSpec('row-orthogonal'), M, N, stream.child(0))
        instance = make_instance(model, prior, SIGMA2, stream.child(1))
        records.append(run_ep(instance, prior, ITERATIONS, EngineOptions(keep_history=True)))
        models.append(model)
    se = se_run(models[0].density, M / N, SIGMA2, prior, ITERATIONS)
    return CheckContext(records=records, models=models, se=se, sigma2=SIGMA2, prior=prior)


def test_se_agreement(context):
    report = se_agreement(context)
    assert report['passed'], report['rows']
    assert len(report['rows']) == ITERATIONS


def test_orthogonality(context):
    assert orthogonality(context)['passed']


def test_gram_consistency(context):
    report = gram_consistency(context)
    assert report['passed'], report['worst_fraction_of_tolerance']
    # h^H h = m^H m holds exactly for unitary V
    assert report['worst_fraction_of_tolerance']['hh'] <= 1e-6


def test_gaussianity(context):
    report = gaussianity(context, t=2)
    assert report['passed'], report
    assert report['samples'] == TRIALS * 4 * 2


def test_variance_bookkeeping(context):
    report = variance_bookkeeping(context)
    assert report['v_ba_positive']
    assert report['worst_fraction_of_tolerance'] <= 1.0


def test_fourth_moment(context):
    report = fourth_moment(context)
    assert report['passed']
    # qpsk errors start at |x|^4 = 1
    assert report['fourth_moments'][0] == pytest.approx(1.0)


def test_module_a_is_flagged(context):
    assert module_a_mse(context)['extrapolated'] is True


def test_history_checks_need_history(context):
    bare = CheckContext(records=[replace(r, history=None) for r in context.records], models=context.models,
                        se=context.se, sigma2=SIGMA2, prior=context.prior)
    with pytest.raises(ValidationError):
        gram_consistency(bare)
    results = run_checks(['gram', 'orthogonality'], bare)
    assert results['gram']['passed'] is False
    assert 'error' in results['gram']
    assert results['orthogonality']['passed']

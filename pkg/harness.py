"""
EP State Evolution Toolkit - Experiment Harness
===============================================
Seeded Monte Carlo orchestration and file emission for every subcommand.

FLOW OF A RUN:
-------------
1. Trial i draws from the Philox stream (seed, i): child 0 builds the
   measurement, child 1 draws signal and noise.
2. Trials run on a thread pool; a trial that raises is recorded as
   {'trial': i, 'success': False, 'error': ...} and the run continues.
3. Results are sorted by trial index before aggregation, so the output does
   not depend on completion order or worker count.
4. State evolution is computed once from the ensemble's target density and
   the enabled checks compare it with the trials.
"""

import csv
import json
import logging
import os
import time
from concurrent.futures import ThreadPoolExecutor
from typing import Dict, List, Optional

import numpy as np

from config import Config, ExperimentConfig
from diagnostics import (
    HISTORY_CHECKS, CheckContext, divergence_free_check, gaussian_degeneracy_check,
    jensen_check, laplacian_check, mmse_bound_check, mmse_oracle_check, run_checks,
)
from ensembles import build_measurement, density_family, target_density
from ep_engine import EngineOptions, make_instance, run_ep
from haar_analysis import (
    biunitary_check, conditional_mean_build, conditioning_identity_check, continued_run_check,
    epsilon_scaling, moment_check, residual_haar_check, snapshot_from_record, strong_law_check,
    trace_clt_check,
)
from models import AggregateReport
from priors import BernoulliGaussianPrior, QpskPrior, describe, make_prior
from rng import SeededRNG, trial_stream
from state_evolution import find_fixed_points, locate_threshold, se_run, threshold_scan
from validation import ConfigError, EpseError, ValidationError, log_check_event

logger = logging.getLogger('epse.harness')

RESULT_COLUMNS = ('trial', 'iter', 'mse_b_emp', 'mse_post_emp', 'v_ab', 'v_ba', 'gamma_t', 'h_dot_q', 'b_dot_m')

# Stream keys that keep the verification suites apart from trial streams
SUITE_STREAMS = {'haar': 1 << 32, 'conditioning': (1 << 32) + 1, 'denoiser': (1 << 32) + 2}

STRONG_LAW_GRID = (64, 256, 1024)
STRONG_LAW_SEEDS = 400
EPSILON_GRID = (64, 128, 256, 512)
EPSILON_SEEDS = 8
CONDITIONING_RESAMPLES = 100
CONTINUED_RUN_RESAMPLES = 50
MMSE_ORACLE_VARIANCES = (0.01, 0.1, 1.0, 10.0)
DEGENERACY_POINTS = 10000
LAPLACIAN_POINTS = 1000


# ==================== FILE OUTPUT ====================

def _jsonable(value):
    if isinstance(value, complex) or isinstance(value, np.complexfloating):
        return {'re': float(value.real), 'im': float(value.imag)}
    if isinstance(value, np.ndarray):
        return value.tolist()
    if isinstance(value, np.integer):
        return int(value)
    if isinstance(value, np.floating):
        return float(value)
    if isinstance(value, np.bool_):
        return bool(value)
    raise TypeError(f"cannot serialize {type(value).__name__}")


def write_json(path: str, payload: Dict) -> str:
    os.makedirs(os.path.dirname(path) or '.', exist_ok=True)
    with open(path, 'w') as f:
        json.dump(payload, f, indent=2, default=_jsonable)
    logger.info(f"wrote {path}")
    return path


def write_csv(path: str, header, rows) -> str:
    os.makedirs(os.path.dirname(path) or '.', exist_ok=True)
    with open(path, 'w', newline='') as f:
        writer = csv.writer(f)
        writer.writerow(header)
        for row in rows:
            writer.writerow([repr(float(v)) if isinstance(v, (float, np.floating)) else v for v in row])
    logger.info(f"wrote {path}")
    return path


def result_rows(results: List[Dict]):
    """Rows of results.csv, sorted by (trial, iter); complex products as modulus."""
    rows = []
    for result in sorted(results, key=lambda r: r['trial']):
        if not result['success']:
            continue
        record = result['record']
        for t in range(record.iterations):
            rows.append((
                result['trial'], t,
                float(record.mse_b_emp[t]), float(record.mse_post_emp[t]),
                float(record.v_ab[t]), float(record.v_ba[t]), float(record.gamma_t[t]),
                float(abs(record.h_dot_q[t])), float(abs(record.b_dot_m[t])),
            ))
    return rows


# ==================== EXPERIMENT RUNNER ====================

class ExperimentRunner:
    """
    Runs the trials of one experiment and aggregates them against SE.
    """

    def __init__(self, cfg: ExperimentConfig, runtime=Config):
        self.cfg = cfg
        self.runtime = runtime
        self.prior = make_prior(cfg.prior_kind, cfg.prior_p)
        self.density = target_density(cfg.ensemble, cfg.m, cfg.n, runtime.MP_ATOMS)
        keep_history = cfg.keep_history or any(c in HISTORY_CHECKS for c in cfg.checks)
        self.options = EngineOptions(
            gamma_mode=cfg.gamma_mode,
            density=self.density if cfg.gamma_mode == 'asymptotic' else None,
            keep_history=keep_history,
            early_stop=cfg.early_stop,
            damping=cfg.damping,
        )

    def run_trial(self, trial: int) -> Dict:
        """One seeded trial; failures come back as a result dict, never raised."""
        try:
            stream = trial_stream(self.cfg.seed, trial)
            model = build_measurement(self.cfg.ensemble, self.cfg.m, self.cfg.n, stream.child(0))
            instance = make_instance(model, self.prior, self.cfg.sigma2, stream.child(1))
            record = run_ep(instance, self.prior, self.cfg.t_max, self.options)
            logger.info(f"trial {trial}: {record.iterations} iterations, stop={record.stop_reason}, "
                        f"final mse={record.mse_post_emp[-1] if record.iterations else float('nan'):.4g}")
            return {'trial': trial, 'success': True, 'record': record, 'model': model}
        except EpseError as e:
            logger.warning(f"trial {trial} failed: {e}")
            return {'trial': trial, 'success': False, 'error': str(e)}

    def run_trials(self) -> List[Dict]:
        trials = range(self.cfg.trials)
        if self.cfg.workers > 1:
            with ThreadPoolExecutor(max_workers=self.cfg.workers) as pool:
                results = list(pool.map(self.run_trial, trials))
        else:
            results = [self.run_trial(i) for i in trials]
        return sorted(results, key=lambda r: r['trial'])

    def se_trace(self):
        return se_run(self.density, self.cfg.m / self.cfg.n, self.cfg.sigma2, self.prior, self.cfg.t_max)

    def aggregate(self, results: List[Dict], se) -> AggregateReport:
        """
        Per-iteration mean and std across successful trials; trials that
        stopped early contribute only to the iterations they completed.
        """
        ok = [r['record'] for r in results if r['success']]
        report = AggregateReport(
            trials=len(results), succeeded=len(ok),
            mse_b_mean=[], mse_b_std=[], mse_post_mean=[], mse_post_std=[],
            se=se,
            failures=[{'trial': r['trial'], 'success': False, 'error': r['error']} for r in results if not r['success']],
        )
        longest = max((rec.iterations for rec in ok), default=0)
        for t in range(longest):
            b = [rec.mse_b_emp[t] for rec in ok if rec.iterations > t]
            post = [rec.mse_post_emp[t] for rec in ok if rec.iterations > t]
            report.mse_b_mean.append(float(np.mean(b)))
            report.mse_b_std.append(float(np.std(b, ddof=1)) if len(b) > 1 else 0.0)
            report.mse_post_mean.append(float(np.mean(post)))
            report.mse_post_std.append(float(np.std(post, ddof=1)) if len(post) > 1 else 0.0)
        return report

    def run(self, out_dir: Optional[str] = None) -> AggregateReport:
        """
        Run every trial, check, and write results.csv and summary.json.

        Raises:
            EpseError: no trial succeeded
        """
        out_dir = out_dir or self.cfg.output_dir
        started = time.perf_counter()
        logger.info(f"experiment: N={self.cfg.n} M={self.cfg.m} {self.cfg.ensemble.kind} "
                    f"{describe(self.prior)} sigma2={self.cfg.sigma2:g} trials={self.cfg.trials}")

        results = self.run_trials()
        se = self.se_trace()
        report = self.aggregate(results, se)
        if report.succeeded == 0:
            raise EpseError(f"all {report.trials} trials failed; first error: {report.failures[0]['error']}")

        ok = [r for r in results if r['success']]
        ctx = CheckContext(records=[r['record'] for r in ok], models=[r['model'] for r in ok],
                           se=se, sigma2=self.cfg.sigma2, prior=self.prior)
        report.checks = run_checks(self.cfg.checks, ctx)
        report.wall_time = time.perf_counter() - started

        write_csv(os.path.join(out_dir, 'results.csv'), RESULT_COLUMNS, result_rows(results))
        write_json(os.path.join(out_dir, 'summary.json'), self.summary(report))
        logger.info(f"experiment finished in {report.wall_time:.1f}s: "
                    f"{report.succeeded}/{report.trials} trials, checks passed={report.all_checks_passed}")
        return report

    def summary(self, report: AggregateReport) -> Dict:
        se = report.se
        return {
            'config': self.cfg.to_dict(),
            'prior': describe(self.prior),
            'se': {
                'mse_ab': se.mse_ab.tolist(),
                'mse_ba': se.mse_ba.tolist(),
                'mse_posterior': se.mse_posterior.tolist(),
            },
            'aggregate': {
                'trials': report.trials,
                'succeeded': report.succeeded,
                'mse_b_mean': report.mse_b_mean,
                'mse_b_std': report.mse_b_std,
                'mse_post_mean': report.mse_post_mean,
                'mse_post_std': report.mse_post_std,
            },
            'failures': report.failures,
            'checks': report.checks,
            'all_checks_passed': report.all_checks_passed,
            'wall_time': report.wall_time,
        }


def run_experiment(cfg: ExperimentConfig, runtime=Config, out_dir: Optional[str] = None) -> AggregateReport:
    return ExperimentRunner(cfg, runtime).run(out_dir)


# ==================== SUBCOMMAND DRIVERS ====================

def run_se(cfg: ExperimentConfig, runtime=Config, out_dir: Optional[str] = None) -> Dict:
    """SE trajectory and fixed points for the configured ensemble and prior."""
    out_dir = out_dir or cfg.output_dir
    prior = make_prior(cfg.prior_kind, cfg.prior_p)
    density = target_density(cfg.ensemble, cfg.m, cfg.n, runtime.MP_ATOMS)
    delta = cfg.m / cfg.n
    trace = se_run(density, delta, cfg.sigma2, prior, cfg.t_max)
    report = find_fixed_points(density, delta, cfg.sigma2, prior)

    write_csv(os.path.join(out_dir, 'se_trace.csv'), ('iter', 'mse_ab', 'mse_ba', 'mse_post'),
              [(t, float(trace.mse_ab[t]), float(trace.mse_ba[t]), float(trace.mse_posterior[t]))
               for t in range(len(trace))])
    payload = {
        'config': cfg.to_dict(),
        'fixed_points': [{'mse_ba': fp, 'label': label} for fp, label in report.fixed_points],
        'starts': report.starts,
        'converged': report.converged,
        'iterations_to_converge': report.iterations_to_converge,
        'passed': True,
    }
    write_json(os.path.join(out_dir, 'se.json'), payload)
    return payload


def run_threshold_scan(cfg: ExperimentConfig, runtime=Config, out_dir: Optional[str] = None) -> Dict:
    """
    Count SE fixed points along a delta grid and, when the count drops from
    several to one, bisect for the threshold between the two grid points.
    """
    out_dir = out_dir or cfg.output_dir
    prior = make_prior(cfg.prior_kind, cfg.prior_p)
    family = density_family(cfg.ensemble, runtime.MP_ATOMS)
    deltas = np.linspace(cfg.scan_delta_min, cfg.scan_delta_max, cfg.scan_points)
    rows = threshold_scan(family, cfg.sigma2, prior, deltas)

    threshold = None
    for lower, upper in zip(rows, rows[1:]):
        if lower['fp_count'] > 1 and upper['fp_count'] == 1:
            threshold = locate_threshold(family, cfg.sigma2, prior, lower['delta'], upper['delta'])
    write_csv(os.path.join(out_dir, 'threshold_scan.csv'), ('delta', 'fp_count', 'fp_values'),
              [(float(r['delta']), r['fp_count'], ' '.join(repr(float(v)) for v in r['fp_values'])) for r in rows])
    payload = {'config': cfg.to_dict(), 'rows': rows, 'threshold': threshold, 'passed': True}
    write_json(os.path.join(out_dir, 'threshold_scan.json'), payload)
    return payload


def verify_haar(cfg: ExperimentConfig, runtime=Config, out_dir: Optional[str] = None) -> Dict:
    """Entry moments, bi-unitary invariance, trace CLT and strong-law checks."""
    out_dir = out_dir or cfg.output_dir
    rng = SeededRNG(cfg.seed, SUITE_STREAMS['haar'])
    moments = [moment_check(n, cfg.haar_samples, rng.child(0).child(n)) for n in cfg.haar_sizes]
    rotated = [biunitary_check(n, cfg.haar_samples, rng.child(1).child(n)) for n in cfg.haar_sizes]
    clt = trace_clt_check(cfg.clt_n, cfg.clt_k, cfg.clt_repeats, rng.child(2))
    control = trace_clt_check(2, 1, cfg.clt_repeats, rng.child(3))
    control_passed = control['ks_distance'] > clt['ks_distance']
    log_check_event('trace-clt-control', f"KS at n=2: {control['ks_distance']:.3f} vs n={cfg.clt_n}: {clt['ks_distance']:.3f}",
                    control_passed)
    strong = strong_law_check(STRONG_LAW_GRID, STRONG_LAW_SEEDS, rng.child(4))

    passed = (all(r['passed'] for r in moments + rotated)
              and clt['passed'] and control_passed and strong['passed'])
    payload = {
        'moments': moments, 'biunitary': rotated, 'trace_clt': clt,
        'trace_clt_control': {'ks_distance': control['ks_distance'], 'passed': control_passed},
        'strong_law': strong, 'passed': passed,
    }
    write_json(os.path.join(out_dir, 'haar.json'), payload)
    return payload


def verify_conditioning(cfg: ExperimentConfig, runtime=Config, out_dir: Optional[str] = None) -> Dict:
    """
    Exact conditioning identities on a live run at N = conditioning.n for
    every (t, t') with t <= conditioning.t, then the random-block checks.
    """
    out_dir = out_dir or cfg.output_dir
    n = cfg.conditioning_n
    m = max(1, int(round(cfg.delta * n)))
    if cfg.ensemble.kind == 'custom-spectrum-haar' and len(cfg.ensemble.singulars) != m:
        raise ConfigError(f"custom spectrum has {len(cfg.ensemble.singulars)} values; conditioning.n needs {m}")
    prior = make_prior(cfg.prior_kind, cfg.prior_p)
    rng = SeededRNG(cfg.seed, SUITE_STREAMS['conditioning'])
    model = build_measurement(cfg.ensemble, m, n, rng.child(0))
    instance = make_instance(model, prior, cfg.sigma2, rng.child(1))
    record = run_ep(instance, prior, cfg.conditioning_t + 1, EngineOptions(keep_history=True))

    identity_reports, residual_reports, table = [], [], []
    for t in range(cfg.conditioning_t + 1):
        for t_prime in (t, t + 1):
            try:
                snap = snapshot_from_record(record, model, t, t_prime)
            except ValidationError as e:
                logger.info(f"skipping (t, t')=({t}, {t_prime}): {e}")
                continue
            factors = conditional_mean_build(snap)
            identities = conditioning_identity_check(snap, factors)
            residual = residual_haar_check(snap, factors, rng.child(2).child(t).child(t_prime),
                                           resamples=CONDITIONING_RESAMPLES)
            identity_reports.append(identities)
            residual_reports.append(residual)
            for name, value in identities['residuals'].items():
                table.append((t, t_prime, name, float(value)))
            for name, value in residual['residuals'].items():
                table.append((t, t_prime, name, float(value)))

    continued = None
    if record.iterations > 1:
        continued = continued_run_check(instance, prior, record, 1, CONTINUED_RUN_RESAMPLES, rng.child(3))
    scaling = epsilon_scaling(cfg.ensemble, prior, cfg.delta, cfg.sigma2,
                              EPSILON_GRID, EPSILON_SEEDS, cfg.seed) \
        if cfg.ensemble.kind != 'custom-spectrum-haar' else None

    passed = (bool(identity_reports)
              and all(r['passed'] for r in identity_reports + residual_reports)
              and (continued is None or continued['passed'])
              and (scaling is None or scaling['passed']))
    write_csv(os.path.join(out_dir, 'conditioning_residuals.csv'), ('t', 't_prime', 'identity', 'residual'), table)
    payload = {'n': n, 'm': m, 'identities': identity_reports, 'residual_haar': residual_reports,
               'continued_run': continued, 'epsilon_scaling': scaling, 'passed': passed}
    write_json(os.path.join(out_dir, 'conditioning.json'), payload)
    return payload


def verify_denoiser(cfg: ExperimentConfig, runtime=Config, out_dir: Optional[str] = None) -> Dict:
    """Denoiser checks for the Bernoulli-Gaussian (prior.p) and QPSK priors."""
    out_dir = out_dir or cfg.output_dir
    rng = SeededRNG(cfg.seed, SUITE_STREAMS['denoiser'])
    priors = [BernoulliGaussianPrior(cfg.prior_p), QpskPrior()]
    checks: Dict[str, List[Dict]] = {'divergence_free': [], 'jensen': [], 'laplacian': [],
                                     'mmse_oracle': [], 'mmse_bound': []}
    for i, prior in enumerate(priors):
        stream = rng.child(i)
        for j, v in enumerate(cfg.denoiser_variances):
            checks['divergence_free'].append(divergence_free_check(prior, v, cfg.denoiser_samples, stream.child(0).child(j)))
            checks['jensen'].append(jensen_check(prior, v, cfg.denoiser_samples, stream.child(1).child(j)))
            checks['laplacian'].append(laplacian_check(prior, v, LAPLACIAN_POINTS, stream.child(2).child(j)))
        for j, v in enumerate(MMSE_ORACLE_VARIANCES):
            checks['mmse_oracle'].append(mmse_oracle_check(prior, v, cfg.denoiser_samples, stream.child(3).child(j)))
        checks['mmse_bound'].append(mmse_bound_check(prior, MMSE_ORACLE_VARIANCES))
    degeneracy = gaussian_degeneracy_check(DEGENERACY_POINTS, rng.child(len(priors)))

    passed = degeneracy['passed'] and all(r['passed'] for rows in checks.values() for r in rows)
    payload = {**checks, 'gaussian_degeneracy': degeneracy, 'passed': passed}
    write_json(os.path.join(out_dir, 'denoiser.json'), payload)
    return payload


SUBCOMMANDS = {
    'se': run_se,
    'threshold-scan': run_threshold_scan,
    'verify-haar': verify_haar,
    'verify-conditioning': verify_conditioning,
    'verify-denoiser': verify_denoiser,
}

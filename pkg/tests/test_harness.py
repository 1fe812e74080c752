"""
Experiment runner, output files and the command-line entry point.
"""
import csv
import json

import pytest

import harness
from app import EXIT_CONFIG_ERROR, EXIT_OK, create_app, main
from config import TestingConfig, build_experiment_config
from harness import RESULT_COLUMNS, ExperimentRunner, run_experiment, run_se, write_csv
from validation import EpseError, NumericalGuardError


def _config(tmp_path, **raw):
    base = {'n': '32', 'delta': '0.5', 'trials': '2', 't_max': '3', 'checks': 'fourth-moment',
            'output_dir': str(tmp_path)}
    base.update({k: str(v) for k, v in raw.items()})
    return build_experiment_config(base, runtime=TestingConfig)


class TestRunner:

    def test_smoke_outputs(self, tmp_path):
        report = run_experiment(_config(tmp_path), TestingConfig)
        assert report.succeeded == 2
        with open(tmp_path / 'results.csv') as f:
            rows = list(csv.reader(f))
        assert tuple(rows[0]) == RESULT_COLUMNS
        assert len(rows) == 1 + 2 * 3
        summary = json.loads((tmp_path / 'summary.json').read_text())
        assert summary['config']['n'] == 32
        assert len(summary['se']['mse_posterior']) == 3
        assert summary['checks']['fourth-moment']['passed']

    def test_deterministic_across_workers(self, tmp_path):
        one, three = tmp_path / 'one', tmp_path / 'three'
        run_experiment(_config(one, trials=4, workers=1), TestingConfig)
        run_experiment(_config(three, trials=4, workers=3), TestingConfig)
        assert (one / 'results.csv').read_bytes() == (three / 'results.csv').read_bytes()

    def test_aggregate_is_trial_mean(self, tmp_path):
        runner = ExperimentRunner(_config(tmp_path, trials=3), TestingConfig)
        results = runner.run_trials()
        report = runner.aggregate(results, runner.se_trace())
        expected = sum(r['record'].mse_post_emp[0] for r in results) / 3
        assert report.mse_post_mean[0] == pytest.approx(expected, rel=1e-12)
        assert len(report.mse_b_std) == 3

    def test_failed_trial_is_recorded(self, tmp_path, monkeypatch):
        real_run_ep = harness.run_ep

        def flaky(instance, prior, t_max, options=None):
            if flaky.calls == 0:
                flaky.calls += 1
                raise NumericalGuardError("nonpositive v_BA", {'t': 0})
            return real_run_ep(instance, prior, t_max, options)
        flaky.calls = 0
        monkeypatch.setattr(harness, 'run_ep', flaky)

        report = run_experiment(_config(tmp_path, workers=1), TestingConfig)
        assert report.succeeded == 1
        assert report.failures[0]['success'] is False
        assert 'v_BA' in report.failures[0]['error']

    def test_all_trials_failing_raises(self, tmp_path, monkeypatch):
        def broken(*args, **kwargs):
            raise NumericalGuardError("broken")
        monkeypatch.setattr(harness, 'run_ep', broken)
        with pytest.raises(EpseError):
            run_experiment(_config(tmp_path), TestingConfig)

    def test_se_driver(self, tmp_path):
        payload = run_se(_config(tmp_path, t_max=5), TestingConfig)
        assert payload['fixed_points']
        with open(tmp_path / 'se_trace.csv') as f:
            assert len(list(csv.reader(f))) == 6


class TestCsv:

    def test_floats_round_trip_exactly(self, tmp_path):
        path = tmp_path / 'out.csv'
        write_csv(str(path), ('a', 'b'), [(1, 0.1 + 0.2)])
        with open(path) as f:
            rows = list(csv.reader(f))
        assert float(rows[1][1]) == 0.1 + 0.2


class TestCli:

    def test_parser_subcommands(self):
        parser = create_app('testing')
        args = parser.parse_args(['verify-haar', '--set', 'haar.samples=10', '--out', 'x'])
        assert args.command == 'verify-haar'
        assert args.overrides == ['haar.samples=10']
        assert parser.runtime is TestingConfig

    def test_se_exit_ok(self, tmp_path):
        code = main(['se', '--set', 'n=32', '--out', str(tmp_path)], config_name='testing')
        assert code == EXIT_OK
        assert (tmp_path / 'se.json').exists()

    def test_run_exit_ok(self, tmp_path):
        argv = ['run', '--set', 'n=32', '--set', 'trials=2', '--set', 't_max=2',
                '--set', 'checks=fourth-moment', '--workers', '2', '--out', str(tmp_path)]
        assert main(argv, config_name='testing') == EXIT_OK

    def test_unknown_key_is_config_error(self, tmp_path):
        code = main(['run', '--set', 'prior.rho=0.1', '--out', str(tmp_path)], config_name='testing')
        assert code == EXIT_CONFIG_ERROR

    def test_missing_config_file(self, tmp_path):
        code = main(['se', '--config', str(tmp_path / 'nope.env')], config_name='testing')
        assert code == EXIT_CONFIG_ERROR

    def test_bad_workers(self, tmp_path):
        assert main(['se', '--workers', '0', '--out', str(tmp_path)], config_name='testing') == EXIT_CONFIG_ERROR

    def test_usage_error(self):
        assert main([], config_name='testing') == 2

    def test_unknown_profile(self):
        assert main(['se'], config_name='staging') == EXIT_CONFIG_ERROR

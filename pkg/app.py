"""
EP State Evolution Toolkit - Main Application
=============================================
Command-line factory and entry point.

ARCHITECTURE:
-------------
1. Application factory builds the argument parser for a runtime profile
2. Logging is initialised once from that profile
3. Each subcommand loads the experiment config (file + --set overrides)
   and delegates to the harness

EXIT STATUS:
-----------
- 0 every enabled check passed
- 1 a check failed or no trial succeeded
- 2 configuration or usage error
"""

import argparse
import logging
import sys
from dataclasses import replace

from dotenv import load_dotenv

# Load environment variables
load_dotenv()

EXIT_OK = 0
EXIT_CHECK_FAILED = 1
EXIT_CONFIG_ERROR = 2

logger = logging.getLogger('epse.app')


def create_app(config_name=None):
    """
    Application factory function.

    Args:
        config_name: Runtime profile ('development', 'acceptance', 'testing');
            EPSE_ENV or 'default' when None

    Returns:
        argparse.ArgumentParser with the runtime profile attached as
        ``parser.runtime``
    """
    from config import get_runtime_config
    from validation import init_logging

    runtime = get_runtime_config(config_name)
    init_logging(runtime)

    parser = argparse.ArgumentParser(
        prog='epse',
        description='EP signal recovery, state evolution and Haar-matrix verification'
    )
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument('--config', metavar='PATH', help='experiment file (key=value lines)')
    common.add_argument('--set', metavar='KEY=VALUE', action='append', default=[], dest='overrides',
                        help='override one experiment key; repeatable')
    common.add_argument('--workers', type=int, help='concurrent trials')
    common.add_argument('--out', metavar='DIR', help='output directory')

    sub = parser.add_subparsers(dest='command', required=True)
    sub.add_parser('run', parents=[common], help='Monte Carlo EP trials against state evolution')
    sub.add_parser('se', parents=[common], help='state-evolution trajectory and fixed points')
    sub.add_parser('threshold-scan', parents=[common], help='fixed-point count along a delta grid')
    sub.add_parser('verify-haar', parents=[common], help='Haar moment, trace-CLT and strong-law checks')
    sub.add_parser('verify-conditioning', parents=[common], help='conditional-law identities on a live run')
    sub.add_parser('verify-denoiser', parents=[common], help='denoiser Monte Carlo checks')

    parser.runtime = runtime
    return parser


def dispatch(args, runtime) -> int:
    """Run one parsed subcommand and map its outcome to an exit status."""
    from config import load_experiment_config
    from harness import SUBCOMMANDS, run_experiment

    cfg = load_experiment_config(args.config, args.overrides, runtime=runtime)
    if args.workers is not None:
        if args.workers < 1:
            from validation import ConfigError
            raise ConfigError(f"--workers must be >= 1, got {args.workers}")
        cfg = replace(cfg, workers=args.workers)
    if args.out:
        cfg = replace(cfg, output_dir=args.out)

    if args.command == 'run':
        report = run_experiment(cfg, runtime)
        return EXIT_OK if report.all_checks_passed else EXIT_CHECK_FAILED

    payload = SUBCOMMANDS[args.command](cfg, runtime)
    return EXIT_OK if payload['passed'] else EXIT_CHECK_FAILED


def main(argv=None, config_name=None) -> int:
    from validation import ConfigError, EpseError

    try:
        parser = create_app(config_name)
    except ConfigError as e:
        print(f"epse: {e}", file=sys.stderr)
        return EXIT_CONFIG_ERROR

    try:
        args = parser.parse_args(argv)
    except SystemExit as e:
        # argparse exits 2 on usage errors and 0 on --help
        return int(e.code or 0)

    try:
        return dispatch(args, parser.runtime)
    except ConfigError as e:
        logger.error(f"configuration error: {e}")
        return EXIT_CONFIG_ERROR
    except EpseError as e:
        logger.error(f"{args.command} failed: {e}")
        return EXIT_CHECK_FAILED


if __name__ == '__main__':
    sys.exit(main())

"""
EP State Evolution Toolkit - Configuration Module
=================================================
Runtime settings come from environment variables (a .env file is honoured).
Experiment parameters come from a flat key-value file in the same dotenv
format, parsed strictly so a misspelt key fails loudly instead of silently
falling back to a default.

Example experiment file:

    n=2048
    delta=0.5
    sigma2=0.01
    ensemble.kind=row-orthogonal
    prior.kind=bg
    prior.p=0.1
    checks=se-agreement,orthogonality
"""

import io
import os
from dataclasses import asdict, dataclass, field
from typing import Dict, Iterable, Optional, Tuple

from dotenv import dotenv_values, load_dotenv

from models import EnsembleSpec
from validation import ConfigError, ParameterValidator, ValidationError

# Load environment variables from .env file
load_dotenv()


class Config:
    """Base runtime configuration."""

    # Logging
    LOG_LEVEL = os.environ.get('EPSE_LOG_LEVEL') or 'INFO'
    LOG_FILE = os.environ.get('EPSE_LOG_FILE', 'epse.log')

    # Trial fan-out and output location
    WORKERS = int(os.environ.get('EPSE_WORKERS') or 1)
    OUTPUT_DIR = os.environ.get('EPSE_OUTPUT_DIR') or 'results'

    # Quantile atoms used when a smooth law is discretized
    MP_ATOMS = int(os.environ.get('EPSE_ATOMS') or 4096)

    # Tolerances
    RANK_TOL = 1e-10
    IDENTITY_TOL = 1e-8
    STAT_SIGMAS = 5.0

    DEBUG = False
    TESTING = False


class DevelopmentConfig(Config):
    """Development configuration."""
    DEBUG = True
    LOG_LEVEL = os.environ.get('EPSE_LOG_LEVEL') or 'DEBUG'


class AcceptanceConfig(Config):
    """Full-size acceptance runs; logs to its own file."""
    LOG_FILE = os.environ.get('EPSE_LOG_FILE', 'epse-acceptance.log')
    WORKERS = int(os.environ.get('EPSE_WORKERS') or os.cpu_count() or 1)


class TestingConfig(Config):
    """Testing configuration."""
    TESTING = True
    LOG_LEVEL = 'WARNING'
    LOG_FILE = ''
    MP_ATOMS = 1024


# Configuration dictionary for easy access
config = {
    'development': DevelopmentConfig,
    'acceptance': AcceptanceConfig,
    'testing': TestingConfig,
    'default': Config
}


def get_runtime_config(name: Optional[str] = None):
    """Resolve a profile by name, falling back to EPSE_ENV and then 'default'."""
    name = name or os.environ.get('EPSE_ENV') or 'default'
    if name not in config:
        raise ConfigError(f"Unknown runtime profile '{name}'. Choose from: {', '.join(sorted(config))}")
    return config[name]


# ==================== KIND ALIASES ====================

ENSEMBLE_KINDS = {
    'iid-gaussian': 'iid-gaussian',
    'row-orthogonal-haar': 'row-orthogonal-haar',
    'row-orthogonal': 'row-orthogonal-haar',
    'geometric-spectrum-haar': 'geometric-spectrum-haar',
    'geometric': 'geometric-spectrum-haar',
    'custom-spectrum-haar': 'custom-spectrum-haar',
    'custom': 'custom-spectrum-haar',
}

PRIOR_KINDS = {
    'bernoulli-gaussian': 'bernoulli-gaussian',
    'bg': 'bernoulli-gaussian',
    'qpsk': 'qpsk',
    'gaussian-test-only': 'gaussian-test-only',
    'gaussian': 'gaussian-test-only',
}

CHECK_SUITES = (
    'se-agreement',
    'orthogonality',
    'gram',
    'gaussianity',
    'variance-bookkeeping',
    'fourth-moment',
    'module-a-mse',
)

GAMMA_MODES = ('finite', 'asymptotic')


def canonical_ensemble_kind(name: str) -> str:
    kind = ENSEMBLE_KINDS.get(str(name).strip().lower())
    if kind is None:
        raise ValidationError(f"Unknown ensemble kind '{name}'")
    return kind


def canonical_prior_kind(name: str) -> str:
    kind = PRIOR_KINDS.get(str(name).strip().lower())
    if kind is None:
        raise ValidationError(f"Unknown prior kind '{name}'")
    return kind


# ==================== EXPERIMENT CONFIG ====================

@dataclass(frozen=True)
class ExperimentConfig:
    """Parameters of one experiment; every subcommand reads the fields it needs."""
    n: int = 256
    delta: float = 0.5
    ensemble: EnsembleSpec = field(default_factory=lambda: EnsembleSpec('row-orthogonal-haar'))
    prior_kind: str = 'bernoulli-gaussian'
    prior_p: float = 0.1
    sigma2: float = 0.01
    t_max: int = 10
    trials: int = 4
    seed: int = 0
    keep_history: bool = False
    checks: Tuple[str, ...] = ('se-agreement', 'orthogonality')
    output_dir: str = Config.OUTPUT_DIR
    workers: int = Config.WORKERS
    gamma_mode: str = 'finite'
    early_stop: bool = False
    damping: float = 1.0
    # verification suites
    haar_sizes: Tuple[int, ...] = (4, 8)
    haar_samples: int = 100000
    clt_n: int = 256
    clt_k: int = 3
    clt_repeats: int = 2000
    conditioning_n: int = 64
    conditioning_t: int = 3
    denoiser_samples: int = 1000000
    denoiser_variances: Tuple[float, ...] = (0.05, 0.5)
    scan_delta_min: float = 0.05
    scan_delta_max: float = 1.0
    scan_points: int = 20

    @property
    def m(self) -> int:
        return int(round(self.delta * self.n))

    def to_dict(self) -> Dict:
        """JSON-friendly echo of every parameter."""
        data = asdict(self)
        data['ensemble'] = {
            'kind': self.ensemble.kind,
            'kappa': self.ensemble.kappa,
            'singulars': list(self.ensemble.singulars),
        }
        data['m'] = self.m
        return data


def _parse_bool(text):
    value = text.strip().lower()
    if value in ('1', 'true', 'yes', 'on'):
        return True
    if value in ('0', 'false', 'no', 'off'):
        return False
    raise ValueError(f"not a boolean: {text!r}")


def _parse_list(item_parser):
    def parse(text):
        return tuple(item_parser(part.strip()) for part in text.split(',') if part.strip())
    return parse


def _parse_int(text):
    return int(text.strip())


def _parse_float(text):
    return float(text.strip())


def _parse_str(text):
    return text.strip()


# file key -> (dataclass field, parser)
CONFIG_KEYS = {
    'n': ('n', _parse_int),
    'delta': ('delta', _parse_float),
    'sigma2': ('sigma2', _parse_float),
    't_max': ('t_max', _parse_int),
    'trials': ('trials', _parse_int),
    'seed': ('seed', _parse_int),
    'keep_history': ('keep_history', _parse_bool),
    'checks': ('checks', _parse_list(_parse_str)),
    'output_dir': ('output_dir', _parse_str),
    'workers': ('workers', _parse_int),
    'gamma_mode': ('gamma_mode', _parse_str),
    'early_stop': ('early_stop', _parse_bool),
    'damping': ('damping', _parse_float),
    'ensemble.kind': ('ensemble_kind', _parse_str),
    'ensemble.kappa': ('ensemble_kappa', _parse_float),
    'ensemble.singulars': ('ensemble_singulars', _parse_list(_parse_float)),
    'prior.kind': ('prior_kind', _parse_str),
    'prior.p': ('prior_p', _parse_float),
    'haar.sizes': ('haar_sizes', _parse_list(_parse_int)),
    'haar.samples': ('haar_samples', _parse_int),
    'clt.n': ('clt_n', _parse_int),
    'clt.k': ('clt_k', _parse_int),
    'clt.repeats': ('clt_repeats', _parse_int),
    'conditioning.n': ('conditioning_n', _parse_int),
    'conditioning.t': ('conditioning_t', _parse_int),
    'denoiser.samples': ('denoiser_samples', _parse_int),
    'denoiser.variances': ('denoiser_variances', _parse_list(_parse_float)),
    'scan.delta_min': ('scan_delta_min', _parse_float),
    'scan.delta_max': ('scan_delta_max', _parse_float),
    'scan.points': ('scan_points', _parse_int),
}


def parse_overrides(pairs: Iterable[str]) -> Dict[str, str]:
    """
    Parse ``key=value`` strings with the same dotenv parser used for files.

    Raises:
        ConfigError: an entry without '='
    """
    pairs = list(pairs or ())
    for pair in pairs:
        if '=' not in pair:
            raise ConfigError(f"Override '{pair}' is not of the form key=value")
    return dict(dotenv_values(stream=io.StringIO('\n'.join(pairs))))


def _convert(raw: Dict[str, Optional[str]]) -> Dict:
    """Strictly convert raw strings to typed values keyed by field name."""
    values = {}
    for key, text in raw.items():
        if key not in CONFIG_KEYS:
            raise ConfigError(f"Unknown configuration key '{key}'")
        if text is None or text.strip() == '':
            raise ConfigError(f"Configuration key '{key}' has no value")
        name, parser = CONFIG_KEYS[key]
        try:
            values[name] = parser(text)
        except ValueError as e:
            raise ConfigError(f"Invalid value for '{key}': {e}")
    return values


def build_experiment_config(raw: Dict[str, Optional[str]], runtime=Config) -> ExperimentConfig:
    """
    Turn raw key-value pairs into a validated ExperimentConfig.

    Args:
        raw: Mapping from file keys (e.g. 'prior.p') to unparsed strings
        runtime: Config profile supplying the workers/output_dir defaults

    Raises:
        ConfigError: unknown key, unparsable value or out-of-domain value
    """
    values = _convert(raw)
    values.setdefault('workers', runtime.WORKERS)
    values.setdefault('output_dir', runtime.OUTPUT_DIR)

    try:
        kind = canonical_ensemble_kind(values.pop('ensemble_kind', 'row-orthogonal-haar'))
        ensemble = EnsembleSpec(
            kind=kind,
            kappa=values.pop('ensemble_kappa', 1.0),
            singulars=values.pop('ensemble_singulars', ()),
        )
        values['prior_kind'] = canonical_prior_kind(values.get('prior_kind', 'bernoulli-gaussian'))
        cfg = ExperimentConfig(ensemble=ensemble, **values)
        validate_experiment_config(cfg)
    except ValidationError as e:
        raise ConfigError(str(e))
    return cfg


def validate_experiment_config(cfg: ExperimentConfig) -> ExperimentConfig:
    """Check every field against its domain; raises ValidationError."""
    v = ParameterValidator
    v.count(cfg.n, 'n', minimum=2)
    v.probability(cfg.delta, 'delta')
    if cfg.m < 1:
        raise ValidationError(f"round(delta*n) must be >= 1, got delta={cfg.delta}, n={cfg.n}")
    v.positive(cfg.sigma2, 'sigma2')
    v.count(cfg.t_max, 't_max')
    v.count(cfg.trials, 'trials')
    v.count(cfg.workers, 'workers')
    if not (0 <= cfg.seed < 2 ** 64):
        raise ValidationError(f"seed must be a 64-bit unsigned integer, got {cfg.seed}")
    if cfg.gamma_mode not in GAMMA_MODES:
        raise ValidationError(f"gamma_mode must be one of {GAMMA_MODES}, got '{cfg.gamma_mode}'")
    if not (0.0 < cfg.damping <= 1.0):
        raise ValidationError(f"damping must lie in (0, 1], got {cfg.damping}")

    unknown = [c for c in cfg.checks if c not in CHECK_SUITES]
    if unknown:
        raise ValidationError(f"Unknown check suite(s): {', '.join(unknown)}")

    if cfg.ensemble.kind == 'geometric-spectrum-haar' and cfg.ensemble.kappa < 1.0:
        raise ValidationError(f"ensemble.kappa must be >= 1, got {cfg.ensemble.kappa}")
    if cfg.ensemble.kind == 'custom-spectrum-haar':
        if len(cfg.ensemble.singulars) != cfg.m:
            raise ValidationError(
                f"ensemble.singulars needs m={cfg.m} values, got {len(cfg.ensemble.singulars)}"
            )
        if any(s < 0 for s in cfg.ensemble.singulars):
            raise ValidationError("ensemble.singulars must be nonnegative")

    # EP needs a non-Gaussian prior; the Gaussian one only serves the denoiser checks
    if cfg.prior_kind == 'gaussian-test-only':
        raise ValidationError("prior.kind 'gaussian' is test-only and cannot drive an experiment")
    if cfg.prior_kind == 'bernoulli-gaussian':
        v.probability(cfg.prior_p, 'prior.p')
        if cfg.prior_p == 1.0:
            raise ValidationError("prior.p = 1 is the Gaussian prior; use p < 1")

    for size in cfg.haar_sizes:
        v.count(size, 'haar.sizes', minimum=2)
    v.count(cfg.haar_samples, 'haar.samples', minimum=2)
    v.count(cfg.clt_n, 'clt.n', minimum=2)
    v.count(cfg.clt_k, 'clt.k')
    v.count(cfg.clt_repeats, 'clt.repeats', minimum=2)
    v.count(cfg.conditioning_n, 'conditioning.n', minimum=2)
    v.count(cfg.conditioning_t, 'conditioning.t', minimum=0)
    v.count(cfg.denoiser_samples, 'denoiser.samples', minimum=2)
    for variance in cfg.denoiser_variances:
        v.positive(variance, 'denoiser.variances')
    v.probability(cfg.scan_delta_min, 'scan.delta_min')
    v.probability(cfg.scan_delta_max, 'scan.delta_max')
    if cfg.scan_delta_min >= cfg.scan_delta_max:
        raise ValidationError("scan.delta_min must be below scan.delta_max")
    v.count(cfg.scan_points, 'scan.points', minimum=2)
    return cfg


def load_experiment_config(path: Optional[str] = None, overrides: Iterable[str] = (),
                           runtime=Config) -> ExperimentConfig:
    """
    Load an experiment file and apply ``--set key=value`` overrides.

    Args:
        path: dotenv-format file, or None to start from defaults
        overrides: 'key=value' strings applied after the file
        runtime: Config profile for defaults

    Returns:
        Validated ExperimentConfig

    Raises:
        ConfigError: missing file, unknown key, or invalid value
    """
    raw = {}
    if path is not None:
        if not os.path.isfile(path):
            raise ConfigError(f"Config file not found: {path}")
        raw.update(dotenv_values(path))
    raw.update(parse_overrides(overrides))
    return build_experiment_config(raw, runtime=runtime)

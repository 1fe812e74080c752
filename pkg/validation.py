"""
EP State Evolution Toolkit - Validation Module
==============================================
Exceptions, parameter validation and logging setup shared by every module.

HOW ERRORS FLOW:
---------------
1. Library functions validate their inputs with ParameterValidator and raise
   a subclass of EpseError when something is wrong.
2. Numerical guards (rank checks, extrinsic-variance positivity) raise
   NumericalGuardError carrying a diagnostics dict.
3. The harness catches errors per trial and records them as result dicts,
   so one failed trial never aborts a whole experiment.
"""

import logging
import math
from typing import Optional

import numpy as np

# Format shared by every handler the toolkit installs
LOG_FORMAT = '%(asctime)s - %(levelname)s - %(message)s'

check_logger = logging.getLogger('epse.checks')


class EpseError(Exception):
    """Base class for every error raised by the toolkit."""


class ConfigError(EpseError):
    """Invalid or unknown configuration keys and values."""


class ValidationError(EpseError):
    """A parameter is outside its documented domain."""


class RankDeficientError(EpseError):
    """A matrix that must be full rank is (numerically) rank deficient."""

    def __init__(self, message, shape=None, smallest=None, largest=None):
        super().__init__(message)
        self.shape = shape
        self.smallest = smallest
        self.largest = largest


class SvdConvergenceError(EpseError):
    """LAPACK failed to converge on an SVD."""

    def __init__(self, rows, cols):
        super().__init__(f"SVD did not converge for a {rows}x{cols} matrix")
        self.rows = rows
        self.cols = cols


class NumericalGuardError(EpseError):
    """A quantity that is positive in exact arithmetic came out nonpositive."""

    def __init__(self, message, diagnostics: Optional[dict] = None):
        super().__init__(message)
        self.diagnostics = diagnostics or {}


class DegenerateMessageError(NumericalGuardError):
    """
    The extrinsic precision 1/mmse(v) - 1/v fell below the guard.

    The engine treats this as convergence to an uninformative message.
    """


class ParameterValidator:
    """
    Input validation for numerical parameters.

    Every method returns the (converted) value so calls can be inlined:
    ``v = ParameterValidator.positive(v, 'v')``.
    """

    @classmethod
    def finite(cls, value, name):
        """Reject NaN and infinities in scalars and arrays."""
        arr = np.asarray(value)
        if not np.all(np.isfinite(arr)):
            raise ValidationError(f"{name} must be finite")
        return value

    @classmethod
    def positive(cls, value, name):
        """Require a finite real scalar > 0."""
        value = float(value)
        if not math.isfinite(value) or value <= 0.0:
            raise ValidationError(f"{name} must be a positive finite number, got {value!r}")
        return value

    @classmethod
    def nonnegative(cls, value, name):
        """Require a finite real scalar >= 0."""
        value = float(value)
        if not math.isfinite(value) or value < 0.0:
            raise ValidationError(f"{name} must be nonnegative, got {value!r}")
        return value

    @classmethod
    def probability(cls, value, name):
        """Require 0 < value <= 1."""
        value = float(value)
        if not (0.0 < value <= 1.0):
            raise ValidationError(f"{name} must lie in (0, 1], got {value!r}")
        return value

    @classmethod
    def count(cls, value, name, minimum=1):
        """Require an integer >= minimum."""
        if isinstance(value, bool) or int(value) != value:
            raise ValidationError(f"{name} must be an integer, got {value!r}")
        value = int(value)
        if value < minimum:
            raise ValidationError(f"{name} must be >= {minimum}, got {value}")
        return value

    @classmethod
    def dimensions(cls, m, n):
        """Require 1 <= m <= n, the compressed-sensing regime."""
        m = cls.count(m, 'm')
        n = cls.count(n, 'n')
        if m > n:
            raise ValidationError(f"m must not exceed n (got m={m}, n={n})")
        return m, n


def init_logging(cfg) -> logging.Logger:
    """
    Configure the 'epse' logger hierarchy from a Config object.

    Args:
        cfg: Config class or instance exposing LOG_LEVEL and LOG_FILE

    Returns:
        The root 'epse' logger
    """
    logger = logging.getLogger('epse')
    logger.setLevel(getattr(logging, str(cfg.LOG_LEVEL).upper(), logging.INFO))

    # Re-initialising (tests, repeated create_app calls) must not stack handlers
    for handler in list(logger.handlers):
        logger.removeHandler(handler)
        handler.close()

    stream = logging.StreamHandler()
    stream.setFormatter(logging.Formatter(LOG_FORMAT))
    logger.addHandler(stream)

    if cfg.LOG_FILE:
        file_handler = logging.FileHandler(cfg.LOG_FILE)
        file_handler.setFormatter(logging.Formatter(LOG_FORMAT))
        logger.addHandler(file_handler)

    return logger


def log_check_event(suite, details, passed=True):
    """
    Log the outcome of a verification suite.

    Args:
        suite: Name of the verification suite
        details: Short human-readable summary
        passed: Failed checks are logged at WARNING level
    """
    message = f"[{suite}] {'PASS' if passed else 'FAIL'} - {details}"
    if passed:
        check_logger.info(message)
    else:
        check_logger.warning(message)

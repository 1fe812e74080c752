"""
EP State Evolution Toolkit - Signal Priors
==========================================
Unit-variance complex signal priors and their scalar denoisers under the
AWGN observation r = x + z, z ~ CN(0, v):

- posterior mean (the MMSE denoiser)
- posterior variance Var[x | r]
- mmse(v) = E|x - E[x | r]|^2
- the extrinsic decision function of the prior module, whose output is
  uncorrelated with the observation noise

Gaussian denoising is separable per coordinate, so every denoiser accepts
arrays of any shape.
"""

import logging
from abc import ABC, abstractmethod
from dataclasses import dataclass
from functools import lru_cache

import numpy as np
import scipy.integrate
import scipy.special

from config import canonical_prior_kind
from models import ExtrinsicMessage
from rng import as_rng
from validation import DegenerateMessageError, NumericalGuardError, ParameterValidator, ValidationError

logger = logging.getLogger('epse.priors')

# Smallest extrinsic precision 1/mmse(v) - 1/v accepted before the message is
# declared uninformative
PRECISION_GUARD = 1e-12

GAUSS_HERMITE_NODES = 64


class Prior(ABC):
    """Zero-mean, unit-variance i.i.d. prior on complex signal entries."""

    kind = 'abstract'

    @abstractmethod
    def posterior_mean(self, r, v):
        """E[x | r] for r = x + CN(0, v) noise."""

    @abstractmethod
    def posterior_variance(self, r, v):
        """Var[x | r] = E[|x - E[x | r]|^2 | r]."""

    @abstractmethod
    def mmse(self, v):
        """Average posterior variance over the joint law of (x, r)."""

    @abstractmethod
    def sample(self, size, rng):
        """i.i.d. draws from the prior."""

    @property
    @abstractmethod
    def fourth_moment(self):
        """E|x|^4."""

    @property
    def is_gaussian(self):
        return False


@dataclass(frozen=True)
class GaussianPrior(Prior):
    """CN(0, 1); only used to check that the decision function vanishes."""

    kind = 'gaussian-test-only'

    def posterior_mean(self, r, v):
        return np.asarray(r) / (1.0 + v)

    def posterior_variance(self, r, v):
        return np.full(np.shape(r), v / (1.0 + v))

    def mmse(self, v):
        return v / (1.0 + v)

    def sample(self, size, rng):
        return as_rng(rng).complex_normal(size)

    @property
    def fourth_moment(self):
        return 2.0

    @property
    def is_gaussian(self):
        return True


def _sech2(z):
    """1 - tanh(z)^2 without cancellation for large |z|."""
    e = np.exp(-2.0 * np.abs(z))
    return 4.0 * e / (1.0 + e) ** 2


@lru_cache(maxsize=4096)
def _qpsk_mmse(v: float) -> float:
    # Each quadrature is BPSK with amplitude a = 1/sqrt(2) in real noise of
    # variance v/2; conditioning on x = a gives tanh argument (1 + sqrt(2v) u)/v
    # with u from the Gauss-Hermite weight exp(-u^2).
    nodes, weights = np.polynomial.hermite.hermgauss(GAUSS_HERMITE_NODES)
    values = _sech2((1.0 + np.sqrt(2.0 * v) * nodes) / v)
    return float(np.dot(weights, values) / np.sqrt(np.pi))


@dataclass(frozen=True)
class QpskPrior(Prior):
    """Equiprobable symbols (+-1 +- i)/sqrt(2)."""

    kind = 'qpsk'

    AMPLITUDE = 1.0 / np.sqrt(2.0)

    def _tanh_args(self, r, v):
        r = np.asarray(r, dtype=complex)
        scale = 2.0 * self.AMPLITUDE / v
        return scale * r.real, scale * r.imag

    def posterior_mean(self, r, v):
        re, im = self._tanh_args(r, v)
        return self.AMPLITUDE * (np.tanh(re) + 1j * np.tanh(im))

    def posterior_variance(self, r, v):
        re, im = self._tanh_args(r, v)
        return self.AMPLITUDE ** 2 * (_sech2(re) + _sech2(im))

    def mmse(self, v):
        return _qpsk_mmse(float(v))

    def sample(self, size, rng):
        g = as_rng(rng).generator
        re = g.choice([-1.0, 1.0], size=size)
        im = g.choice([-1.0, 1.0], size=size)
        return self.AMPLITUDE * (re + 1j * im)

    @property
    def fourth_moment(self):
        return 1.0


@lru_cache(maxsize=4096)
def _bg_mmse(p: float, v: float) -> float:
    prior = BernoulliGaussianPrior(p)
    active_var = 1.0 / p + v

    def conditional_variance(rho):
        return prior.posterior_variance(np.sqrt(rho), v)

    # |r|^2 is exponential with mean `scale` given the support state
    total = 0.0
    for weight, scale in ((p, active_var), (1.0 - p, v)):
        integrand = lambda u, s=scale: float(conditional_variance(s * u)) * np.exp(-u)
        # split where the responsibility crosses 1/2 so quad sees the transition
        crossing = prior.responsibility_crossing(v) / scale
        if 0.0 < crossing < np.inf:
            head, _ = scipy.integrate.quad(integrand, 0.0, crossing, epsabs=1e-14, epsrel=1e-11, limit=200)
            tail, _ = scipy.integrate.quad(integrand, crossing, np.inf, epsabs=1e-14, epsrel=1e-11, limit=200)
            value = head + tail
        else:
            value, _ = scipy.integrate.quad(integrand, 0.0, np.inf, epsabs=1e-14, epsrel=1e-11, limit=200)
        total += weight * value
    return total


@dataclass(frozen=True)
class BernoulliGaussianPrior(Prior):
    """x = 0 with probability 1 - p, otherwise CN(0, 1/p)."""

    p: float = 0.1
    kind = 'bernoulli-gaussian'

    def __post_init__(self):
        ParameterValidator.probability(self.p, 'p')

    def _log_odds(self, r, v):
        active_var = 1.0 / self.p + v
        r2 = np.abs(np.asarray(r)) ** 2
        return (np.log(self.p / (1.0 - self.p)) + np.log(v / active_var)
                + r2 * (1.0 / v - 1.0 / active_var))

    def responsibility(self, r, v):
        """Posterior probability that the entry is nonzero."""
        if self.p == 1.0:
            return np.ones(np.shape(r))
        return scipy.special.expit(self._log_odds(r, v))

    def responsibility_crossing(self, v):
        """|r|^2 at which the responsibility equals 1/2 (0 if it never does)."""
        if self.p == 1.0:
            return 0.0
        active_var = 1.0 / self.p + v
        offset = np.log(self.p / (1.0 - self.p)) + np.log(v / active_var)
        slope = 1.0 / v - 1.0 / active_var
        return max(0.0, -offset / slope)

    def posterior_mean(self, r, v):
        r = np.asarray(r, dtype=complex)
        return self.responsibility(r, v) * r / (1.0 + self.p * v)

    def posterior_variance(self, r, v):
        r = np.asarray(r, dtype=complex)
        pi = self.responsibility(r, v)
        shrunk_var = v / (1.0 + self.p * v)
        m1_sq = np.abs(r / (1.0 + self.p * v)) ** 2
        return pi * shrunk_var + pi * (1.0 - pi) * m1_sq

    def mmse(self, v):
        return _bg_mmse(float(self.p), float(v))

    def sample(self, size, rng):
        rng = as_rng(rng)
        support = rng.uniform(size) < self.p
        return np.where(support, rng.complex_normal(size, variance=1.0 / self.p), 0.0)

    @property
    def fourth_moment(self):
        return 2.0 / self.p

    @property
    def is_gaussian(self):
        # p = 1 is CN(0, 1)
        return self.p == 1.0


def make_prior(kind: str, p: float = 0.1) -> Prior:
    """Build a prior from a (possibly aliased) kind name."""
    kind = canonical_prior_kind(kind)
    if kind == 'bernoulli-gaussian':
        return BernoulliGaussianPrior(p)
    if kind == 'qpsk':
        return QpskPrior()
    return GaussianPrior()


# ==================== DENOISER OPERATIONS ====================

def posterior_mean(prior: Prior, r, v):
    v = ParameterValidator.positive(v, 'v')
    return prior.posterior_mean(r, v)


def posterior_variance(prior: Prior, r, v):
    v = ParameterValidator.positive(v, 'v')
    return prior.posterior_variance(r, v)


def mmse(prior: Prior, v) -> float:
    v = ParameterValidator.positive(v, 'v')
    return float(prior.mmse(v))


def extrinsic_variance(prior: Prior, v) -> float:
    """
    Extrinsic variance of the prior module: 1/v_out = 1/mmse(v) - 1/v.

    Raises:
        NumericalGuardError: mmse(v) >= v
        DegenerateMessageError: extrinsic precision below PRECISION_GUARD
    """
    v = ParameterValidator.positive(v, 'v')
    mm = float(prior.mmse(v))
    diagnostics = {'prior': prior.kind, 'v': v, 'mmse': mm}
    if not np.isfinite(mm) or mm <= 0.0 or mm >= v:
        raise NumericalGuardError(f"mmse({v:.6g}) = {mm!r} for the {prior.kind} prior is not in (0, v)", diagnostics)
    precision = 1.0 / mm - 1.0 / v
    if precision < PRECISION_GUARD:
        raise DegenerateMessageError(
            f"extrinsic precision {precision:.3e} below guard for the {prior.kind} prior at v={v:.6g}",
            diagnostics
        )
    return 1.0 / precision


def decision_function(prior: Prior, r, v):
    """
    eta(r) = v_out (E[x | r] / mmse(v) - r / v).

    For the Gaussian prior this is identically zero.
    """
    v_out = extrinsic_variance(prior, v)
    mm = mmse(prior, v)
    r = np.asarray(r, dtype=complex)
    return v_out * (prior.posterior_mean(r, v) / mm - r / v)


def extrinsic_denoise(prior: Prior, msg: ExtrinsicMessage) -> ExtrinsicMessage:
    """Prior-module extrinsic message from an incoming Gaussian message."""
    v_in = ParameterValidator.positive(msg.variance, 'msg.variance')
    v_out = extrinsic_variance(prior, v_in)
    mean = decision_function(prior, msg.mean, v_in)
    return ExtrinsicMessage(mean=mean, variance=v_out)


def sample_signal(prior: Prior, n: int, rng) -> np.ndarray:
    n = ParameterValidator.count(n, 'n')
    return prior.sample(n, rng)


def describe(prior: Prior) -> str:
    if isinstance(prior, BernoulliGaussianPrior):
        return f'bernoulli-gaussian(p={prior.p:g})'
    return prior.kind


def require_non_gaussian(prior: Prior) -> Prior:
    """EP needs a non-Gaussian prior; the Gaussian one degenerates."""
    if prior.is_gaussian:
        raise ValidationError("the gaussian-test-only prior cannot drive EP")
    return prior

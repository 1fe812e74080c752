"""
EP State Evolution Toolkit - Measurement Ensembles
==================================================
Right-unitarily invariant measurement matrices A = U Sigma V^H with V Haar,
their eigenvalue laws, and the Marchenko-Pastur law used as the smooth
target for the i.i.d. Gaussian ensemble.

NORMALIZATION:
-------------
Every ensemble is scaled so that M^-1 sum_i sigma_i^2 = 1, i.e. the
eigenvalue law of A A^H has mean one.
"""

import logging
from dataclasses import replace
from functools import lru_cache

import numpy as np
import scipy.integrate
import scipy.linalg
import scipy.stats

from config import canonical_ensemble_kind
from linalg_utils import svd
from models import EnsembleSpec, MeasurementModel, SpectralDensity, SvdFactors
from rng import as_rng
from validation import ParameterValidator, ValidationError

logger = logging.getLogger('epse.ensembles')

# Points on the angular grid used to integrate the MP law
MP_GRID = 20001


# ==================== HAAR SAMPLING ====================

def unit_phases(d: np.ndarray) -> np.ndarray:
    """d / |d| elementwise, with phase one where d vanishes."""
    d = np.asarray(d, dtype=complex)
    mag = np.abs(d)
    return np.divide(d, mag, out=np.ones_like(d), where=mag > 0)


def sample_haar(n: int, rng) -> np.ndarray:
    """
    Draw an n x n Haar unitary.

    QR of a complex Ginibre matrix, then each column of Q is multiplied by
    the phase of the matching diagonal entry of R so that R has a positive
    diagonal. Without this step the law of Q is not Haar.
    """
    n = ParameterValidator.count(n, 'n')
    z = as_rng(rng).complex_normal((n, n))
    q, r = scipy.linalg.qr(z)
    d = np.diag(r)
    return q * unit_phases(d)


def sample_haar_columns(n: int, k: int, rng) -> np.ndarray:
    """
    First k columns of an n x n Haar unitary, shape (n, k).

    V E has this law for any fixed orthonormal E, so products V a and V b
    can be sampled without drawing all of V.
    """
    n = ParameterValidator.count(n, 'n')
    k = ParameterValidator.count(k, 'k')
    if k > n:
        raise ValidationError(f"cannot draw {k} orthonormal columns in dimension {n}")
    z = as_rng(rng).complex_normal((n, k))
    q, r = scipy.linalg.qr(z, mode='economic')
    d = np.diag(r)
    return q * unit_phases(d)


def sample_haar_batch(n: int, count: int, rng) -> np.ndarray:
    """Stack of `count` independent n x n Haar unitaries, shape (count, n, n)."""
    n = ParameterValidator.count(n, 'n')
    count = ParameterValidator.count(count, 'count')
    z = as_rng(rng).complex_normal((count, n, n))
    q, r = np.linalg.qr(z)
    d = np.diagonal(r, axis1=-2, axis2=-1)
    return q * unit_phases(d)[..., None, :]


# ==================== SPECTRA ====================

def make_density(eigenvalues, weights=None) -> SpectralDensity:
    """
    Build a SpectralDensity, merging repeated eigenvalues.

    Raises:
        ValidationError: negative eigenvalues, nonpositive weights, or
            weights that do not sum to one
    """
    lam = np.asarray(eigenvalues, dtype=float).ravel()
    if lam.size == 0:
        raise ValidationError("a spectral density needs at least one atom")
    w = np.full(lam.size, 1.0 / lam.size) if weights is None else np.asarray(weights, dtype=float).ravel()
    ParameterValidator.finite(lam, 'eigenvalues')
    if np.any(lam < 0):
        raise ValidationError("eigenvalues must be nonnegative")
    if np.any(w <= 0):
        raise ValidationError("atom weights must be positive")
    if abs(w.sum() - 1.0) > 1e-12:
        raise ValidationError(f"atom weights must sum to 1, got {w.sum()!r}")

    values, inverse = np.unique(lam, return_inverse=True)
    merged = np.zeros(values.size)
    np.add.at(merged, inverse, w)
    return SpectralDensity(eigenvalues=values, weights=merged)


def eigen_density(factors: SvdFactors, m: int) -> SpectralDensity:
    """Empirical law of A A^H: atoms sigma_i^2 with weight 1/m each."""
    sigma = np.asarray(factors.singular[:m], dtype=float)
    return make_density(sigma ** 2)


def _normalized(singulars: np.ndarray) -> np.ndarray:
    power = np.mean(singulars ** 2)
    if power <= 0:
        raise ValidationError("at least one singular value must be positive")
    return np.sort(singulars * np.sqrt(1.0 / power))[::-1]


def spectrum_for(spec: EnsembleSpec, m: int) -> np.ndarray:
    """
    Deterministic singular values of the Haar-based ensembles, descending
    and normalized to mean power one.
    """
    kind = canonical_ensemble_kind(spec.kind)
    if kind == 'row-orthogonal-haar':
        return np.ones(m)
    if kind == 'geometric-spectrum-haar':
        if spec.kappa < 1.0:
            raise ValidationError(f"condition number kappa must be >= 1, got {spec.kappa}")
        if m == 1:
            return np.ones(1)
        power = spec.kappa ** (-np.arange(m) / (m - 1))
        return _normalized(np.sqrt(power))
    if kind == 'custom-spectrum-haar':
        values = np.asarray(spec.singulars, dtype=float)
        if values.size != m:
            raise ValidationError(f"custom spectrum needs {m} singular values, got {values.size}")
        if np.any(values < 0):
            raise ValidationError("custom singular values must be nonnegative")
        return _normalized(values)
    raise ValidationError(f"ensemble '{kind}' has no deterministic spectrum")


def build_measurement(spec: EnsembleSpec, m: int, n: int, rng) -> MeasurementModel:
    """
    Sample A from the ensemble and keep it in factored form.

    The left factor and the spectrum come from child stream 0 and the
    right factor from child stream 1, so the right factor can be redrawn
    without touching the others.

    Args:
        spec: Ensemble kind and parameters
        m, n: Dimensions with 1 <= m <= n
        rng: SeededRNG or integer seed

    Returns:
        MeasurementModel whose density is the realized spectrum
    """
    m, n = ParameterValidator.dimensions(m, n)
    rng = as_rng(rng)
    kind = canonical_ensemble_kind(spec.kind)

    if kind == 'iid-gaussian':
        g = rng.child(0).complex_normal((m, n), variance=1.0 / n)
        f = svd(g)
        sigma = _normalized(f.singular)
        factors = SvdFactors(left=f.left, singular=sigma, right=f.right)
    else:
        sigma = spectrum_for(spec, m)
        factors = SvdFactors(
            left=sample_haar(m, rng.child(0)),
            singular=sigma,
            right=sample_haar(n, rng.child(1)),
        )

    model = MeasurementModel(factors=factors, density=eigen_density(factors, m), m=m, n=n)
    logger.debug(f"Built {kind} measurement {m}x{n}, sigma_max={sigma[0]:.4g}, sigma_min={sigma[-1]:.4g}")
    return model


def replace_right(model: MeasurementModel, right: np.ndarray) -> MeasurementModel:
    """Same left factor and spectrum, new right factor."""
    if right.shape != (model.n, model.n):
        raise ValidationError(f"right factor must be {model.n}x{model.n}, got {right.shape}")
    return replace(model, factors=replace(model.factors, right=right))


def resample_right(model: MeasurementModel, rng) -> MeasurementModel:
    """Redraw only the Haar right factor."""
    return replace_right(model, sample_haar(model.n, rng))


# ==================== MARCHENKO-PASTUR ====================

def mp_support(delta: float):
    """Edges (a, b) of the MP(delta) law of A A^H with unit mean."""
    delta = ParameterValidator.probability(delta, 'delta')
    root = np.sqrt(delta)
    return (1.0 - root) ** 2, (1.0 + root) ** 2


def mp_density(lam, delta: float) -> np.ndarray:
    """sqrt((b - lam)(lam - a)) / (2 pi delta lam) on [a, b], zero elsewhere."""
    a, b = mp_support(delta)
    lam = np.asarray(lam, dtype=float)
    inside = (lam > a) & (lam < b) & (lam > 0)
    out = np.zeros_like(lam)
    li = lam[inside]
    out[inside] = np.sqrt((b - li) * (li - a)) / (2.0 * np.pi * delta * li)
    return out


@lru_cache(maxsize=32)
def _mp_angular_cdf(delta: float, points: int = MP_GRID):
    """
    CDF of MP(delta) on the angle grid lam = a + (b - a)(1 - cos t)/2.

    The substitution removes the square-root edge singularities so the
    trapezoid rule converges quickly.
    """
    a, b = mp_support(delta)
    theta = np.linspace(0.0, np.pi, points)
    lam = a + (b - a) * (1.0 - np.cos(theta)) / 2.0
    half = (b - a) / 2.0
    with np.errstate(divide='ignore', invalid='ignore'):
        integrand = half ** 2 * np.sin(theta) ** 2 / (2.0 * np.pi * delta * lam)
    # a = 0 (delta = 1): the integrand tends to half (1 + cos t) / (2 pi delta)
    integrand = np.where(lam > 0, integrand, half * (1.0 + np.cos(theta)) / (2.0 * np.pi * delta))
    cdf = scipy.integrate.cumulative_trapezoid(integrand, theta, initial=0.0)
    total = cdf[-1]
    if abs(total - 1.0) > 1e-6:
        logger.warning(f"MP(delta={delta}) integrates to {total:.8f} on the angular grid")
    return theta, lam, cdf / total


def mp_cdf(lam, delta: float) -> np.ndarray:
    """Cumulative distribution function of MP(delta)."""
    a, b = mp_support(delta)
    theta_grid, _, cdf = _mp_angular_cdf(float(delta))
    lam = np.asarray(lam, dtype=float)
    clipped = np.clip(lam, a, b)
    theta = np.arccos(np.clip(1.0 - 2.0 * (clipped - a) / (b - a), -1.0, 1.0))
    return np.interp(theta, theta_grid, cdf)


def mp_atoms(delta: float, atoms: int = 4096) -> SpectralDensity:
    """Atomize MP(delta) at equal-probability quantile midpoints."""
    atoms = ParameterValidator.count(atoms, 'atoms')
    theta_grid, _, cdf = _mp_angular_cdf(float(delta))
    a, b = mp_support(delta)
    targets = (np.arange(atoms) + 0.5) / atoms
    theta = np.interp(targets, cdf, theta_grid)
    lam = a + (b - a) * (1.0 - np.cos(theta)) / 2.0
    return SpectralDensity(eigenvalues=lam, weights=np.full(atoms, 1.0 / atoms))


def kolmogorov_distance(eigenvalues, delta: float) -> float:
    """Kolmogorov-Smirnov distance between an empirical spectrum and MP(delta)."""
    eigenvalues = np.asarray(eigenvalues, dtype=float)
    result = scipy.stats.kstest(eigenvalues, lambda x: mp_cdf(x, delta))
    return float(result.statistic)


def target_density(spec: EnsembleSpec, m: int, n: int, atoms: int = 4096) -> SpectralDensity:
    """
    Large-system eigenvalue law of A A^H used by state evolution.

    Haar-based kinds have a deterministic spectrum, so their target equals
    the realized one; the i.i.d. Gaussian kind uses MP(m/n).
    """
    m, n = ParameterValidator.dimensions(m, n)
    kind = canonical_ensemble_kind(spec.kind)
    if kind == 'iid-gaussian':
        return mp_atoms(m / n, atoms)
    return make_density(spectrum_for(spec, m) ** 2)


def density_family(spec: EnsembleSpec, atoms: int = 4096):
    """
    Map delta -> target density, for sweeps over the compression rate.

    The Haar-based spectra do not depend on delta: row-orthogonal is a point
    mass at one, geometric is sampled at `atoms` points and custom keeps its
    explicit list.
    """
    kind = canonical_ensemble_kind(spec.kind)
    if kind == 'iid-gaussian':
        return lambda delta: mp_atoms(delta, atoms)
    if kind == 'custom-spectrum-haar':
        fixed = make_density(spectrum_for(spec, len(spec.singulars)) ** 2)
    else:
        fixed = make_density(spectrum_for(spec, atoms) ** 2)
    return lambda delta: fixed

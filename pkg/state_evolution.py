"""
EP State Evolution Toolkit - State Evolution
============================================
Deterministic scalar recursion that predicts the per-iteration MSE of the
EP iteration in the large-system limit:

    mse_AB^t   = gamma(mse_BA^t) - mse_BA^t
    1/mse_BA^{t+1} = 1/mmse(mse_AB^t) - 1/mse_AB^t
    mse^t      = mmse(mse_AB^t)

starting from mse_BA^0 = 1, plus fixed-point analysis of that map.
"""

import logging
from typing import Callable, Iterable, List, Optional, Sequence

import numpy as np
import scipy.optimize

from models import FixedPointReport, SeTrace, SpectralDensity
from priors import Prior, extrinsic_variance, mmse
from validation import NumericalGuardError, ParameterValidator, ValidationError

logger = logging.getLogger('epse.se')

FP_TOL = 1e-12
FP_MAX_ITER = 10000
FP_DEDUP = 1e-8
DEFAULT_INIT_GRID = tuple(np.logspace(-10, 0, 6))


def gamma_asymptotic(density: SpectralDensity, delta: float, sigma2: float, v: float) -> float:
    """
    [sum_k w_k delta lam_k / (sigma2 + v lam_k)]^-1.

    The engine calls this same function when it runs with the asymptotic
    normalization, so both produce identical variances.

    Raises:
        ValidationError: v <= 0, sigma2 < 0 or a vanishing denominator
        NumericalGuardError: the sum is zero or not finite
    """
    v = ParameterValidator.positive(v, 'v')
    sigma2 = ParameterValidator.nonnegative(sigma2, 'sigma2')
    lam = density.eigenvalues
    denominators = sigma2 + v * lam
    if np.any(denominators <= 0):
        raise ValidationError("sigma2 + v*lambda must be positive on every atom")
    total = float(np.sum(density.weights * delta * lam / denominators))
    if not np.isfinite(total) or total <= 0:
        raise NumericalGuardError(
            f"normalization sum {total!r} is not positive",
            {'delta': delta, 'sigma2': sigma2, 'v': v}
        )
    return 1.0 / total


def gamma_cross(density: SpectralDensity, delta: float, sigma2: float,
                v_t: float, v_s: float, zeta: complex,
                gamma_t: Optional[float] = None, gamma_s: Optional[float] = None) -> complex:
    """
    Limit of N^-1 m_s^H m_t + zeta, i.e. the cross term

        gamma_t gamma_s sum_k w_k delta lam_k (sigma2 + zeta lam_k)
                              / ((sigma2 + v_t lam_k)(sigma2 + v_s lam_k))

    with zeta = N^-1 q_s^H q_t. gamma_t and gamma_s default to the
    asymptotic normalizations at v_t and v_s.
    """
    if gamma_t is None:
        gamma_t = gamma_asymptotic(density, delta, sigma2, v_t)
    if gamma_s is None:
        gamma_s = gamma_asymptotic(density, delta, sigma2, v_s)
    lam = density.eigenvalues
    terms = delta * lam * (sigma2 + zeta * lam) / ((sigma2 + v_t * lam) * (sigma2 + v_s * lam))
    return complex(gamma_t * gamma_s * np.sum(density.weights * terms))


def se_step(mse_ba: float, density: SpectralDensity, delta: float, sigma2: float, prior: Prior):
    """
    One SE update.

    Returns:
        (mse_ab, next mse_ba, posterior mse)
    """
    mse_ba = ParameterValidator.positive(mse_ba, 'mse_ba')
    mse_ab = gamma_asymptotic(density, delta, sigma2, mse_ba) - mse_ba
    if mse_ab <= 0:
        raise NumericalGuardError(
            f"SE produced nonpositive mse_AB={mse_ab!r}",
            {'mse_ba': mse_ba, 'sigma2': sigma2, 'delta': delta}
        )
    next_ba = extrinsic_variance(prior, mse_ab)
    return mse_ab, next_ba, mmse(prior, mse_ab)


def se_map(mse_ba: float, density: SpectralDensity, delta: float, sigma2: float, prior: Prior) -> float:
    """mse_BA^t -> mse_BA^{t+1}."""
    return se_step(mse_ba, density, delta, sigma2, prior)[1]


def se_run(density: SpectralDensity, delta: float, sigma2: float, prior: Prior,
           t_max: int, start: float = 1.0) -> SeTrace:
    """Iterate se_step t_max times from mse_BA^0 = start."""
    t_max = ParameterValidator.count(t_max, 't_max')
    mse_ab = np.empty(t_max)
    mse_ba = np.empty(t_max)
    mse_post = np.empty(t_max)

    current = start
    for t in range(t_max):
        mse_ba[t] = current
        mse_ab[t], current, mse_post[t] = se_step(current, density, delta, sigma2, prior)

    logger.info(f"SE: {t_max} iterations, final mse_BA={mse_ba[-1]:.6g}, final mse={mse_post[-1]:.6g}")
    return SeTrace(mse_ab=mse_ab, mse_ba=mse_ba, mse_posterior=mse_post)


# ==================== FIXED POINTS ====================

def _iterate_to_fixed_point(start, step, tol, max_iter):
    v = start
    for iteration in range(1, max_iter + 1):
        nxt = step(v)
        if abs(nxt - v) <= tol * max(v, np.finfo(float).tiny):
            return nxt, iteration, True
        v = nxt
    return v, max_iter, False


def _is_duplicate(value, known, tol):
    return any(abs(value - k) <= tol * max(1.0, abs(k)) for k in known)


def find_fixed_points(density: SpectralDensity, delta: float, sigma2: float, prior: Prior,
                      init_grid: Optional[Iterable[float]] = None,
                      tol: float = FP_TOL, max_iter: int = FP_MAX_ITER,
                      dedup: float = FP_DEDUP, scan_points: int = 80) -> FixedPointReport:
    """
    Stable fixed points by iterating the SE map from every start, plus
    unstable ones bracketed on a log grid and refined with Brent's method.

    Labels:
        'reachable'  the attractor reached from mse_BA^0 = 1
        'attractor'  another stable fixed point
        'unstable'   a repelling fixed point between two attractors

    A start that does not converge within max_iter iterations is reported
    in `converged` and contributes no fixed point.
    """
    starts = [float(s) for s in (init_grid if init_grid is not None else DEFAULT_INIT_GRID)]
    for s in starts:
        if not (0.0 < s <= 1.0):
            raise ValidationError(f"init_grid values must lie in (0, 1], got {s}")

    def step(v):
        return se_map(v, density, delta, sigma2, prior)

    reachable, _, reachable_ok = _iterate_to_fixed_point(1.0, step, tol, max_iter)

    stable: List[float] = []
    iterations, converged = [], []
    for s in starts:
        fp, count, ok = _iterate_to_fixed_point(s, step, tol, max_iter)
        iterations.append(count)
        converged.append(ok)
        if not ok:
            logger.warning(f"SE from mse_BA={s:.3g} did not converge in {max_iter} iterations")
            continue
        if not _is_duplicate(fp, stable, dedup):
            stable.append(fp)
    if reachable_ok and not _is_duplicate(reachable, stable, dedup):
        stable.append(reachable)

    # Repelling points: the map crosses the diagonal from below
    lo = max(min(starts + stable) * 0.1, 1e-14)
    grid = np.logspace(np.log10(lo), 0.0, scan_points)
    gap = np.array([step(v) - v for v in grid])
    unstable: List[float] = []
    for i in range(len(grid) - 1):
        if gap[i] < 0.0 < gap[i + 1]:
            root = scipy.optimize.brentq(lambda v: step(v) - v, grid[i], grid[i + 1],
                                         xtol=1e-15, rtol=1e-13)
            if not _is_duplicate(root, stable + unstable, dedup):
                unstable.append(root)

    labelled = []
    for fp in sorted(stable):
        label = 'reachable' if reachable_ok and _is_duplicate(fp, [reachable], dedup) else 'attractor'
        labelled.append((fp, label))
    labelled.extend((fp, 'unstable') for fp in unstable)
    labelled.sort(key=lambda item: item[0])

    logger.debug(f"delta={delta:.4g}: fixed points {[(f'{v:.4g}', l) for v, l in labelled]}")
    return FixedPointReport(fixed_points=labelled, iterations_to_converge=iterations,
                            converged=converged, starts=starts)


def threshold_scan(family: Callable[[float], SpectralDensity], sigma2: float, prior: Prior,
                   deltas: Sequence[float], init_grid: Optional[Iterable[float]] = None):
    """
    Sweep the compression rate and count fixed points at each value.

    Returns:
        list of dicts with keys delta, fp_count, fp_values, labels
    """
    rows = []
    for delta in deltas:
        delta = ParameterValidator.probability(delta, 'delta')
        report = find_fixed_points(family(delta), delta, sigma2, prior, init_grid=init_grid)
        rows.append({
            'delta': delta,
            'fp_count': report.count,
            'fp_values': [fp for fp, _ in report.fixed_points],
            'labels': [label for _, label in report.fixed_points],
        })
        logger.info(f"threshold scan: delta={delta:.4g} -> {report.count} fixed point(s)")
    return rows


def locate_threshold(family: Callable[[float], SpectralDensity], sigma2: float, prior: Prior,
                     delta_low: float, delta_high: float, tol: float = 1e-3,
                     init_grid: Optional[Iterable[float]] = None) -> float:
    """
    Bisection on delta for the point above which the SE map has a single
    fixed point.

    Raises:
        ValidationError: delta_low does not have several fixed points or
            delta_high does not have a single one
    """
    def multiple(delta):
        return find_fixed_points(family(delta), delta, sigma2, prior, init_grid=init_grid).count > 1

    if not multiple(delta_low):
        raise ValidationError(f"delta={delta_low} has a unique fixed point; lower end must be below the threshold")
    if multiple(delta_high):
        raise ValidationError(f"delta={delta_high} has several fixed points; upper end must be above the threshold")

    lo, hi = delta_low, delta_high
    while hi - lo > tol:
        mid = 0.5 * (lo + hi)
        if multiple(mid):
            lo = mid
        else:
            hi = mid
    threshold = 0.5 * (lo + hi)
    logger.info(f"SE threshold located at delta={threshold:.4f} (+-{tol / 2:.1e})")
    return threshold

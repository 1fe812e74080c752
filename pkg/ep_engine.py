"""
EP State Evolution Toolkit - EP Engine
======================================
Two-module expectation propagation for y = A x + w.

Module A (LMMSE):
    x_AB = x_BA + gamma_t W_t (y - A x_BA),  W_t = A^H (sigma2 I + v_BA A A^H)^-1
    v_AB = gamma_t - v_BA
Module B (prior):
    x_BA' = eta(x_AB),  1/v_BA' = 1/mmse(v_AB) - 1/v_AB

The run also tracks the error recursion q_t = x - x_BA^t, h_t = x - x_AB^t,
b_t = V^H q_t, m_t = V^H h_t used by the diagnostics and the Haar analysis.
"""

import logging
from dataclasses import dataclass, replace
from typing import Optional, Tuple

import numpy as np

from ensembles import replace_right
from models import ErrorHistory, ExtrinsicMessage, MeasurementModel, ProblemInstance, RunRecord, SpectralDensity, SvdFactors
from priors import Prior, extrinsic_denoise, require_non_gaussian
from rng import as_rng
from state_evolution import gamma_asymptotic
from validation import DegenerateMessageError, NumericalGuardError, ParameterValidator, ValidationError

logger = logging.getLogger('epse.engine')

DENOMINATOR_FLOOR = 1e-300


@dataclass(frozen=True)
class EngineOptions:
    """
    Knobs of run_ep.

    gamma_mode: 'finite' uses the realized N^-1 Tr(W_t A); 'asymptotic'
        evaluates the normalization on `density` (the realized spectrum when
        None), which reproduces state evolution exactly.
    early_stop: stop once |v_BA^{t+1} - v_BA^t| < early_stop_tol v_BA^t.
    damping: convex weight of the new B->A message; 1.0 is undamped.
    """
    gamma_mode: str = 'finite'
    density: Optional[SpectralDensity] = None
    keep_history: bool = False
    early_stop: bool = False
    early_stop_tol: float = 1e-8
    damping: float = 1.0


def lmmse_apply(factors: SvdFactors, sigma2: float, v: float, residual: np.ndarray) -> np.ndarray:
    """
    A^H (sigma2 I + v A A^H)^-1 residual, evaluated through the SVD as
    V [Sigma (sigma2 I + v Sigma^2)^-1 U^H residual ; 0].
    """
    v = ParameterValidator.positive(v, 'v')
    sigma2 = ParameterValidator.nonnegative(sigma2, 'sigma2')
    s = factors.singular
    m = len(s)
    denominators = sigma2 + v * s ** 2
    if np.any(denominators < DENOMINATOR_FLOOR):
        raise NumericalGuardError("LMMSE denominator vanished", {'sigma2': sigma2, 'v': v})
    inner = s / denominators * (factors.left.conj().T @ residual)
    return factors.right[:, :m] @ inner


def gamma_finite(factors: SvdFactors, sigma2: float, v: float, n: int) -> float:
    """[N^-1 sum_i sigma_i^2 / (sigma2 + v sigma_i^2)]^-1."""
    v = ParameterValidator.positive(v, 'v')
    s2 = factors.singular ** 2
    denominators = sigma2 + v * s2
    if np.any(denominators < DENOMINATOR_FLOOR):
        raise NumericalGuardError("LMMSE denominator vanished", {'sigma2': sigma2, 'v': v})
    trace = float(np.sum(s2 / denominators)) / n
    if trace <= 0:
        raise NumericalGuardError("N^-1 Tr(W A) is zero; every singular value vanished", {'n': n})
    return 1.0 / trace


def normalization(model: MeasurementModel, sigma2: float, v: float, options: EngineOptions) -> float:
    """gamma_t under the configured mode."""
    if options.gamma_mode == 'finite':
        return gamma_finite(model.factors, sigma2, v, model.n)
    if options.gamma_mode == 'asymptotic':
        density = options.density if options.density is not None else model.density
        return gamma_asymptotic(density, model.delta, sigma2, v)
    raise ValidationError(f"unknown gamma_mode '{options.gamma_mode}'")


def lmmse_posterior(model: MeasurementModel, y: np.ndarray, sigma2: float,
                    msg: ExtrinsicMessage) -> Tuple[np.ndarray, float]:
    """
    Gaussian posterior of x under the prior CN(msg.mean, msg.variance I).

    Returns:
        (x_A, v_A) with v_A the average posterior variance v - v^2/gamma;
        dividing out the incoming message gives module A's extrinsic output.
    """
    v = msg.variance
    gamma = gamma_finite(model.factors, sigma2, v, model.n)
    x_a = msg.mean + v * lmmse_apply(model.factors, sigma2, v, y - model.apply(msg.mean))
    return x_a, v - v * v / gamma


def module_a_update(msg: ExtrinsicMessage, y: np.ndarray, model: MeasurementModel, sigma2: float,
                    gamma: Optional[float] = None) -> ExtrinsicMessage:
    """
    A->B extrinsic message.

    Raises:
        NumericalGuardError: gamma_t - v_BA <= 0
    """
    v = ParameterValidator.positive(msg.variance, 'v_BA')
    if gamma is None:
        gamma = gamma_finite(model.factors, sigma2, v, model.n)
    variance = gamma - v
    if not variance > 0:
        raise NumericalGuardError(
            f"module A produced nonpositive variance {variance!r}",
            {'gamma': gamma, 'v_BA': v, 'sigma2': sigma2}
        )
    mean = msg.mean + gamma * lmmse_apply(model.factors, sigma2, v, y - model.apply(msg.mean))
    return ExtrinsicMessage(mean=mean, variance=variance)


def module_b_update(msg: ExtrinsicMessage, prior: Prior) -> Tuple[ExtrinsicMessage, np.ndarray]:
    """
    B->A extrinsic message and the posterior-mean estimate of x.

    Raises:
        ValidationError: Gaussian prior
        DegenerateMessageError: extrinsic precision below guard
    """
    require_non_gaussian(prior)
    estimate = prior.posterior_mean(msg.mean, msg.variance)
    return extrinsic_denoise(prior, msg), estimate


def make_instance(model: MeasurementModel, prior: Prior, sigma2: float, rng) -> ProblemInstance:
    """Draw x from the prior and w ~ CN(0, sigma2 I); y = A x + w."""
    sigma2 = ParameterValidator.positive(sigma2, 'sigma2')
    rng = as_rng(rng)
    x = prior.sample(model.n, rng.child(0))
    noise = rng.child(1).complex_normal(model.m, variance=sigma2)
    return ProblemInstance(model=model, x_true=x, y=model.apply(x) + noise, sigma2=sigma2, noise=noise)


def _inner(a, b, n):
    """N^-1 a^H b."""
    return complex(np.vdot(a, b) / n)


def run_ep(instance: ProblemInstance, prior: Prior, t_max: int,
           options: Optional[EngineOptions] = None,
           start: Optional[ExtrinsicMessage] = None) -> RunRecord:
    """
    Run EP for up to t_max iterations.

    Args:
        instance: Measurement, signal and noise
        prior: Non-Gaussian prior of the signal
        t_max: Iteration cap
        options: EngineOptions; defaults are undamped with finite-N gamma
        start: Initial B->A message; x = 0, v = 1 when None

    Returns:
        RunRecord with one entry per completed iteration
    """
    options = options or EngineOptions()
    t_max = ParameterValidator.count(t_max, 't_max')
    if not (0.0 < options.damping <= 1.0):
        raise ValidationError(f"damping must lie in (0, 1], got {options.damping}")
    require_non_gaussian(prior)

    model = instance.model
    x = instance.x_true
    n = model.n
    V = model.factors.right
    sigma2 = instance.sigma2

    msg_ba = start or ExtrinsicMessage(mean=np.zeros(n, dtype=complex), variance=1.0)
    record = RunRecord()
    qs = [x - msg_ba.mean]
    hs = []

    for t in range(t_max):
        q = qs[t]
        gamma = normalization(model, sigma2, msg_ba.variance, options)
        msg_ab = module_a_update(msg_ba, instance.y, model, sigma2, gamma=gamma)
        try:
            next_ba, estimate = module_b_update(msg_ab, prior)
        except DegenerateMessageError as e:
            record.stop_reason = 'uninformative'
            logger.warning(f"iteration {t}: {e}; stopping")
            break

        if options.damping < 1.0:
            d = options.damping
            next_ba = ExtrinsicMessage(
                mean=d * next_ba.mean + (1.0 - d) * msg_ba.mean,
                variance=d * next_ba.variance + (1.0 - d) * msg_ba.variance,
            )

        h = x - msg_ab.mean
        q_next = x - next_ba.mean
        b = V.conj().T @ q
        m = V.conj().T @ h
        hs.append(h)
        qs.append(q_next)

        record.v_ba.append(msg_ba.variance)
        record.v_ab.append(msg_ab.variance)
        record.gamma_t.append(gamma)
        record.mse_b_emp.append(float(np.vdot(q, q).real) / n)
        record.mse_a_emp.append(float(np.vdot(h, h).real) / n)
        record.mse_post_emp.append(float(np.sum(np.abs(x - estimate) ** 2)) / n)
        record.h_dot_q.append(_inner(h, q, n))
        record.b_dot_m.append(_inner(b, m, n))
        record.hq_cross.append([_inner(h, qs[s], n) for s in range(t + 2)])
        record.estimate = estimate

        logger.debug(
            f"t={t}: v_BA={msg_ba.variance:.6g} gamma={gamma:.6g} v_AB={msg_ab.variance:.6g} "
            f"mse_B={record.mse_b_emp[-1]:.6g} mse={record.mse_post_emp[-1]:.6g}"
        )

        converged = abs(next_ba.variance - msg_ba.variance) < options.early_stop_tol * msg_ba.variance
        msg_ba = next_ba
        if options.early_stop and converged:
            record.stop_reason = 'converged'
            break

    if options.keep_history:
        Q = np.column_stack(qs[:len(hs) + 1])
        H = np.column_stack(hs) if hs else np.zeros((n, 0), dtype=complex)
        record.history = ErrorHistory(Q=Q, B=V.conj().T @ Q, M=V.conj().T @ H, H=H)
    return record


def continue_from_history(instance: ProblemInstance, prior: Prior, record: RunRecord, t: int,
                          right: np.ndarray, steps: int = 1,
                          options: Optional[EngineOptions] = None) -> RunRecord:
    """
    Restart a recorded run at iteration t with the right factor replaced.

    The measurement is rebuilt as y' = A' x + w with A' = U Sigma right^H and
    the same signal and noise; the run resumes from the recorded B->A
    message of iteration t.

    Raises:
        ValidationError: the record has no history or t is out of range
    """
    if record.history is None:
        raise ValidationError("continue_from_history needs a run recorded with keep_history")
    if not 0 <= t < len(record.v_ba):
        raise ValidationError(f"iteration {t} is not available in the recorded history")

    model = replace_right(instance.model, right)
    rebuilt = replace(instance, model=model, y=model.apply(instance.x_true) + instance.noise)
    start = ExtrinsicMessage(mean=instance.x_true - record.history.Q[:, t], variance=record.v_ba[t])
    opts = replace(options or EngineOptions(), keep_history=False)
    return run_ep(rebuilt, prior, steps, opts, start=start)

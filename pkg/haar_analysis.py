"""
EP State Evolution Toolkit - Haar Analysis
==========================================
Numerical checks of the random-matrix facts behind state evolution:

1. Entry moments of Haar unitaries and their bi-unitary invariance
2. Gaussian limit of (Tr(V W_1), ..., Tr(V W_k))
3. Strong-law behaviour of N^-1 b^H V a and N^-1 b^H V^H D V a,
   including the exact finite-N variance of the quadratic form
4. The conditional law of V given the error history of an EP run:
   conditional mean blocks, the exact identities they satisfy, and
   resampling of the random residual block

The conditioning identities are exact linear algebra, so they are checked
against a tight relative tolerance rather than statistically.
"""

import logging
from typing import Dict, Iterable, List, Optional, Sequence

import numpy as np
import scipy.linalg
import scipy.stats

from ensembles import build_measurement, sample_haar, sample_haar_batch, sample_haar_columns
from ep_engine import EngineOptions, continue_from_history, make_instance, run_ep
from linalg_utils import left_bases, proj_parallel, proj_perp, pseudo_inverse, relative_residual, right_bases
from models import ConditionalMeanFactors, ConditioningSnapshot, EnsembleSpec, MeasurementModel, ProblemInstance, RunRecord
from priors import Prior
from rng import SeededRNG, as_rng
from validation import ParameterValidator, ValidationError, log_check_event

logger = logging.getLogger('epse.haar')

IDENTITY_TOL = 1e-8
CONSTRAINT_TOL = 1e-9
STAT_SIGMAS = 5.0
MOMENT_CHUNK = 10000


# ==================== ENTRY MOMENTS ====================

def moment_theory(n: int) -> Dict[str, float]:
    """Closed-form moments of the entries of an n x n Haar unitary."""
    return {
        'E|V00|^2': 1.0 / n,
        'E|V00|^4': 2.0 / (n * (n + 1)),
        'E|V00|^2|V11|^2': 1.0 / (n * n - 1),
        'E|V00|^2|V01|^2': 1.0 / (n * (n + 1)),
        'E|V00|^2|V10|^2': 1.0 / (n * (n + 1)),
        'Re E[V00 V11 V01* V10*]': -1.0 / (n * (n * n - 1)),
        'Im E[V00 V11 V01* V10*]': 0.0,
    }


def _moment_samples(batch: np.ndarray) -> Dict[str, np.ndarray]:
    v00, v01 = batch[:, 0, 0], batch[:, 0, 1]
    v10, v11 = batch[:, 1, 0], batch[:, 1, 1]
    p00, p01, p10, p11 = (np.abs(v) ** 2 for v in (v00, v01, v10, v11))
    cross = v00 * v11 * np.conj(v01) * np.conj(v10)
    return {
        'E|V00|^2': p00,
        'E|V00|^4': p00 ** 2,
        'E|V00|^2|V11|^2': p00 * p11,
        'E|V00|^2|V01|^2': p00 * p01,
        'E|V00|^2|V10|^2': p00 * p10,
        'Re E[V00 V11 V01* V10*]': cross.real,
        'Im E[V00 V11 V01* V10*]': cross.imag,
    }


def _moment_report(n, samples, rng, transform=None, suite='haar-moments'):
    n = ParameterValidator.count(n, 'n', minimum=2)
    samples = ParameterValidator.count(samples, 'samples', minimum=2)
    rng = as_rng(rng)

    sums: Dict[str, float] = {}
    squares: Dict[str, float] = {}
    done, chunk_index = 0, 0
    while done < samples:
        size = min(MOMENT_CHUNK, samples - done)
        batch = sample_haar_batch(n, size, rng.child(chunk_index))
        if transform is not None:
            batch = transform(batch)
        for name, values in _moment_samples(batch).items():
            sums[name] = sums.get(name, 0.0) + float(values.sum())
            squares[name] = squares.get(name, 0.0) + float((values ** 2).sum())
        done += size
        chunk_index += 1

    rows = []
    for name, theory in moment_theory(n).items():
        mean = sums[name] / samples
        variance = max(squares[name] / samples - mean ** 2, 0.0) * samples / (samples - 1)
        stderr = np.sqrt(variance / samples)
        z = abs(mean - theory) / stderr if stderr > 0 else 0.0
        rows.append({'statistic': name, 'estimate': mean, 'theory': theory,
                     'stderr': stderr, 'z': z, 'passed': z <= STAT_SIGMAS})

    passed = all(row['passed'] for row in rows)
    log_check_event(suite, f"n={n}, samples={samples}, max z={max(r['z'] for r in rows):.2f}", passed)
    return {'n': n, 'samples': samples, 'statistics': rows, 'passed': passed}


def moment_check(n: int, samples: int, rng) -> Dict:
    """
    Monte Carlo estimates of entry moments against their closed forms.

    Returns:
        dict with 'statistics' rows (statistic, estimate, theory, stderr, z,
        passed) and an overall 'passed' flag (every |z| <= 5)
    """
    return _moment_report(n, samples, rng)


def biunitary_check(n: int, samples: int, rng, left: Optional[np.ndarray] = None,
                    right: Optional[np.ndarray] = None) -> Dict:
    """
    Moments of P V Q for fixed unitaries P, Q match the Haar values.

    P defaults to the unitary DFT and Q to a phased cyclic shift.
    """
    n = ParameterValidator.count(n, 'n', minimum=2)
    if left is None:
        left = scipy.linalg.dft(n, scale='sqrtn')
    if right is None:
        right = np.roll(np.eye(n), 1, axis=0) * np.exp(1j * np.arange(n))
    for name, mat in (('left', left), ('right', right)):
        if relative_residual(mat.conj().T @ mat, np.eye(n)) > 1e-10:
            raise ValidationError(f"{name} rotation is not unitary")
    return _moment_report(n, samples, rng, transform=lambda batch: left @ batch @ right,
                          suite='haar-biunitary')


# ==================== TRACE CLT ====================

def trace_family(n: int, k: int, kind: str = 'shift') -> List[np.ndarray]:
    """
    k matrices with Tr(W_i W_j^H) = n delta_ij.

    'shift': powers of the cyclic shift, starting with the identity.
    'elementary': sqrt(n) e_i e_{i+1}^T.
    """
    n = ParameterValidator.count(n, 'n')
    k = ParameterValidator.count(k, 'k')
    if k > n:
        raise ValidationError(f"at most {n} trace-orthonormal matrices of this family exist, asked for {k}")
    if kind == 'shift':
        shift = np.roll(np.eye(n), 1, axis=1)
        return [np.linalg.matrix_power(shift, i).astype(complex) for i in range(k)]
    if kind == 'elementary':
        family = []
        for i in range(k):
            w = np.zeros((n, n), dtype=complex)
            w[i, (i + 1) % n] = np.sqrt(n)
            family.append(w)
        return family
    raise ValidationError(f"unknown trace family '{kind}'")


def validate_trace_family(family: Sequence[np.ndarray], n: int):
    gram = np.array([[np.trace(wi @ wj.conj().T) for wj in family] for wi in family])
    if np.max(np.abs(gram - n * np.eye(len(family)))) > 1e-9 * n:
        raise ValidationError("trace family is not orthonormal: Tr(W_i W_j^H) != N delta_ij")


def trace_clt_check(n: int, k: int, repeats: int, rng, family: Optional[Sequence[np.ndarray]] = None,
                    chunk: int = 50) -> Dict:
    """
    Sample a = (Tr(V W_1), ..., Tr(V W_k)) and test it against CN(0, I_k).

    Each real and imaginary part must have variance 1/2 and every cross
    moment E[a_i a_j^*] (i < j) and pseudo-moment E[a_i a_j] must vanish,
    all within 5 standard errors. The KS distance of the standardized
    real parts against N(0, 1) is reported for finite-N comparisons.
    """
    n = ParameterValidator.count(n, 'n')
    repeats = ParameterValidator.count(repeats, 'repeats', minimum=2)
    family = list(family) if family is not None else trace_family(n, k)
    validate_trace_family(family, n)
    k = len(family)
    rng = as_rng(rng)

    coords = np.empty((repeats, k), dtype=complex)
    done, index = 0, 0
    while done < repeats:
        size = min(chunk, repeats - done)
        batch = sample_haar_batch(n, size, rng.child(index))
        for i, w in enumerate(family):
            coords[done:done + size, i] = np.einsum('rjk,kj->r', batch, w)
        done += size
        index += 1

    checks = []

    def record(name, values, target):
        mean = float(np.mean(values))
        stderr = float(np.std(values, ddof=1) / np.sqrt(len(values)))
        z = abs(mean - target) / stderr if stderr > 0 else 0.0
        checks.append({'statistic': name, 'estimate': mean, 'theory': target,
                       'stderr': stderr, 'z': z, 'passed': z <= STAT_SIGMAS})

    for i in range(k):
        a = coords[:, i]
        record(f'Var Re a{i}', (a.real - a.real.mean()) ** 2, 0.5)
        record(f'Var Im a{i}', (a.imag - a.imag.mean()) ** 2, 0.5)
        pseudo = a * a
        record(f'Re E[a{i}^2]', pseudo.real, 0.0)
        record(f'Im E[a{i}^2]', pseudo.imag, 0.0)
        for j in range(i + 1, k):
            cross = a * np.conj(coords[:, j])
            record(f'Re E[a{i} a{j}*]', cross.real, 0.0)
            record(f'Im E[a{i} a{j}*]', cross.imag, 0.0)
            pseudo = a * coords[:, j]
            record(f'Re E[a{i} a{j}]', pseudo.real, 0.0)
            record(f'Im E[a{i} a{j}]', pseudo.imag, 0.0)

    ks = [float(scipy.stats.kstest(coords[:, i].real / np.sqrt(0.5), 'norm').statistic) for i in range(k)]
    passed = all(c['passed'] for c in checks)
    log_check_event('trace-clt', f"n={n}, k={k}, repeats={repeats}, max KS={max(ks):.3f}", passed)
    return {'n': n, 'k': k, 'repeats': repeats, 'statistics': checks,
            'ks_distance': max(ks), 'passed': passed}


# ==================== STRONG LAW ====================

def quadratic_form_variance(a: np.ndarray, b: np.ndarray, d: np.ndarray) -> float:
    """
    Exact variance over Haar V of S = b^H V^H D V a, D = diag(d):

        |a|^2 |b|^2 (Tr D^2 - Tr^2 D / N) / (N^2 - 1)
        - |b^H a|^2 Tr D^2 / (N (N^2 - 1)) + |E S|^2 / (N^2 - 1)

    with E S = N^-1 Tr(D) b^H a.
    """
    n = len(a)
    tr_d = float(np.sum(d))
    tr_d2 = float(np.sum(d ** 2))
    ba = np.vdot(b, a)
    mean = tr_d / n * ba
    na2 = float(np.vdot(a, a).real)
    nb2 = float(np.vdot(b, b).real)
    return (na2 * nb2 * (tr_d2 - tr_d ** 2 / n) / (n * n - 1)
            - abs(ba) ** 2 * tr_d2 / (n * (n * n - 1))
            + abs(mean) ** 2 / (n * n - 1))


def strong_law_check(n_grid: Iterable[int], seeds: int, rng, trace_mean: float = 0.3) -> Dict:
    """
    Strong-law statements for fixed vectors a, b and diagonal D.

    With |a|^2 = N:
    - median |N^-1 a^H V a| decays like N^-1/2 (fitted log-log slope)
    - N^-1 |V a|^2 = 1 for every sample
    - N^-1 (V b)^H V a = 0 for b orthogonal to a
    - N^-1 (V a)^H D (V a) -> N^-1 Tr D = trace_mean, with Monte Carlo
      spread matching the exact variance of the quadratic form
    """
    grid = sorted(ParameterValidator.count(n, 'n', minimum=2) for n in n_grid)
    seeds = ParameterValidator.count(seeds, 'seeds', minimum=2)
    rng = as_rng(rng)

    rows = []
    for n in grid:
        stream = rng.child(n)
        a = stream.child(0).complex_normal(n)
        a *= np.sqrt(n) / np.linalg.norm(a)
        b = stream.child(1).complex_normal(n)
        b -= np.vdot(a, b) / np.vdot(a, a) * a
        b *= np.sqrt(n) / np.linalg.norm(b)
        d = trace_mean + 0.2 * np.cos(2.0 * np.pi * np.arange(n) / n)

        linear, identity, orthogonal, quadratic = [], [], [], []
        for s in range(seeds):
            # two Haar columns have the law of V applied to [a, b] / sqrt(N)
            frame = sample_haar_columns(n, 2, stream.child(2).child(s))
            va, vb = np.sqrt(n) * frame[:, 0], np.sqrt(n) * frame[:, 1]
            linear.append(abs(np.vdot(a, va)) / n)
            identity.append(abs(np.vdot(va, va).real / n - 1.0))
            orthogonal.append(abs(np.vdot(vb, va)) / n)
            quadratic.append(float(np.vdot(va, d * va).real) / n)

        quadratic = np.asarray(quadratic)
        theory_var = quadratic_form_variance(a, a, d) / n ** 2
        rows.append({
            'n': n,
            'median_linear': float(np.median(linear)),
            'max_identity_error': float(np.max(identity)),
            'max_orthogonal': float(np.max(orthogonal)),
            'quadratic_mean': float(quadratic.mean()),
            'quadratic_var': float(quadratic.var(ddof=1)),
            'quadratic_theory_var': theory_var,
        })

    checks = {}
    if len(grid) >= 2:
        slope = float(np.polyfit(np.log(grid), np.log([r['median_linear'] for r in rows]), 1)[0])
        checks['linear_decay_slope'] = {'value': slope, 'passed': -0.75 <= slope <= -0.25}
    checks['identity'] = {'value': max(r['max_identity_error'] for r in rows),
                          'passed': max(r['max_identity_error'] for r in rows) <= 1e-10}
    checks['orthogonal'] = {'value': max(r['max_orthogonal'] for r in rows),
                            'passed': max(r['max_orthogonal'] for r in rows) <= 1e-10}
    last = rows[-1]
    stderr = np.sqrt(last['quadratic_theory_var'] / seeds)
    checks['quadratic_limit'] = {'value': last['quadratic_mean'], 'theory': trace_mean, 'stderr': stderr,
                                 'passed': abs(last['quadratic_mean'] - trace_mean) <= STAT_SIGMAS * stderr}
    ratio = last['quadratic_var'] / last['quadratic_theory_var']
    # sample variance of ~normal data has relative stderr sqrt(2/(seeds-1))
    checks['quadratic_variance'] = {'value': ratio, 'theory': 1.0,
                                    'passed': abs(ratio - 1.0) <= STAT_SIGMAS * np.sqrt(2.0 / (seeds - 1))}

    passed = all(c['passed'] for c in checks.values())
    log_check_event('strong-law', f"grid={grid}, seeds={seeds}", passed)
    return {'rows': rows, 'checks': checks, 'passed': passed}


# ==================== CONDITIONING ====================

def snapshot_from_record(record: RunRecord, model: MeasurementModel, t: int, t_prime: int) -> ConditioningSnapshot:
    """
    Freeze the error history of a run at (t, t').

    Raises:
        ValidationError: no history, (t, t') out of range, N - t - t' <= 0,
            or the history violates B^H M = Q^H H
    """
    hist = record.history
    if hist is None:
        raise ValidationError("snapshot needs a run recorded with keep_history")
    if t_prime not in (t, t + 1) or t_prime < 1 or t < 0:
        raise ValidationError(f"(t, t') must satisfy t' in {{t, t+1}} and t' >= 1, got ({t}, {t_prime})")
    iterations = hist.M.shape[1]
    if t_prime > hist.Q.shape[1] or t > iterations:
        raise ValidationError(f"history has {iterations} iterations, cannot freeze at ({t}, {t_prime})")
    n = model.n
    if n - t - t_prime <= 0:
        raise ValidationError(f"N - t - t' must be positive, got N={n}, t={t}, t'={t_prime}")

    snap = ConditioningSnapshot(
        t=t, t_prime=t_prime,
        Q=hist.Q[:, :t_prime], B=hist.B[:, :t_prime],
        M=hist.M[:, :t], H=hist.H[:, :t],
        V=model.factors.right,
        q_next=hist.Q[:, t],
        m_next=hist.M[:, t] if t < iterations else None,
    )
    if t > 0:
        residual = relative_residual(snap.B.conj().T @ snap.M, snap.Q.conj().T @ snap.H)
        if residual > CONSTRAINT_TOL:
            raise ValidationError(f"history violates B^H M = Q^H H (relative residual {residual:.2e})")
    return snap


def conditional_mean_build(snap: ConditioningSnapshot) -> ConditionalMeanFactors:
    """
    Blocks of E[V | history] in the singular bases of Q and M.

    V00 and the lower-right block are built two ways each so the two
    expressions can be compared. With t = 0 the M basis is the identity, the
    lower-right block vanishes and the mean reduces to q_0 b_0^H / |q_0|^2.

    Raises:
        RankDeficientError: Q or M is not full rank
    """
    Q, B, M, H = snap.Q, snap.B, snap.M, snap.H
    Phi_Q, PhiQ_par, PhiQ_perp = left_bases(Q)
    Phi_M, PhiM_par, PhiM_perp = left_bases(M)

    row_side = (pseudo_inverse(Q) @ PhiQ_par).conj().T @ B.conj().T
    col_side = H @ pseudo_inverse(M)

    V00 = row_side @ PhiM_par
    V00_alt = PhiQ_par.conj().T @ col_side @ PhiM_par
    V01 = row_side @ PhiM_perp
    V10 = PhiQ_perp.conj().T @ col_side @ PhiM_par
    V11bar = -V10 @ (pseudo_inverse(V01) @ V00).conj().T
    V11bar_alt = -(V00 @ pseudo_inverse(V10)).conj().T @ V01

    Vbar = Phi_Q @ np.block([[V00, V01], [V10, V11bar]]) @ Phi_M.conj().T
    _, _, Phi_V10_perp = left_bases(V10)
    _, _, Psi_V01_perp = right_bases(V01)
    return ConditionalMeanFactors(
        V00=V00, V00_alt=V00_alt, V01=V01, V10=V10,
        V11bar=V11bar, V11bar_alt=V11bar_alt,
        Phi_Q=Phi_Q, Phi_M=Phi_M,
        Phi_V10_perp=Phi_V10_perp, Psi_V01_perp=Psi_V01_perp,
        Vbar=Vbar,
    )


def projection_remainders(snap: ConditioningSnapshot):
    """
    Remainder vectors of the projected updates.

    eps1 (t' = t > 0): Gamma^H H^H q_t_perp with
        Gamma = M^+ - M^+ B (B^H P_M_perp B)^-1 B^H P_M_perp
    eps2 (t' = t + 1): Delta^H B^H m_t_perp with
        Delta = Q^+ - Q^+ H (H^H P_Q_perp H)^-1 H^H P_Q_perp

    Returns:
        (eps1 or None, eps2 or None)
    """
    Q, B, M, H = snap.Q, snap.B, snap.M, snap.H
    eps1 = eps2 = None
    if snap.t_prime == snap.t and snap.t > 0:
        M_pinv = pseudo_inverse(M)
        P_M = proj_perp(M)
        Gamma = M_pinv - M_pinv @ B @ np.linalg.solve(B.conj().T @ P_M @ B, B.conj().T @ P_M)
        q_perp = proj_perp(Q) @ snap.q_next
        eps1 = Gamma.conj().T @ (H.conj().T @ q_perp)
    if snap.t_prime == snap.t + 1 and snap.m_next is not None:
        Q_pinv = pseudo_inverse(Q)
        P_Q = proj_perp(Q)
        if H.shape[1]:
            Delta = Q_pinv - Q_pinv @ H @ np.linalg.solve(H.conj().T @ P_Q @ H, H.conj().T @ P_Q)
        else:
            Delta = Q_pinv
        m_perp = proj_perp(M) @ snap.m_next
        eps2 = Delta.conj().T @ (B.conj().T @ m_perp)
    return eps1, eps2


def conditioning_identity_check(snap: ConditioningSnapshot, factors: ConditionalMeanFactors,
                                tol: float = IDENTITY_TOL) -> Dict:
    """
    Evaluate every exact identity of the conditional mean on a snapshot.

    Returns:
        dict with per-identity relative residuals, the epsilon norms and
        an overall 'passed' flag (all residuals <= tol)
    """
    Q, B, M, H = snap.Q, snap.B, snap.M, snap.H
    n = snap.n
    Vbar = factors.Vbar
    residuals = {
        'V00_two_way': relative_residual(factors.V00, factors.V00_alt),
        'V11_row_vs_column': relative_residual(factors.V11bar, factors.V11bar_alt),
        'Vq_tau': relative_residual(Vbar.conj().T @ Q, B),
    }

    eps1, eps2 = projection_remainders(snap)
    if eps1 is not None:
        q = snap.q_next
        beta = pseudo_inverse(Q) @ q
        residuals['Vq'] = relative_residual(Vbar.conj().T @ q, B @ beta + eps1)
        residuals['beta_projection'] = relative_residual(Q @ beta, proj_parallel(Q) @ q)
    if eps2 is not None:
        m = snap.m_next
        alpha = pseudo_inverse(M) @ m
        residuals['Vm'] = relative_residual(Vbar @ m, H @ alpha + eps2)

    t, t_prime = snap.t, snap.t_prime
    PhiM_perp = factors.Phi_M[:, t:]
    PhiQ_perp = factors.Phi_Q[:, t_prime:]
    lhs01 = PhiM_perp @ (np.eye(n - t) - proj_parallel(factors.V01)) @ PhiM_perp.conj().T
    P_M = proj_perp(M)
    residuals['PV01'] = relative_residual(lhs01, P_M - proj_parallel(P_M @ B))
    lhs10 = PhiQ_perp @ (np.eye(n - t_prime) - proj_parallel(factors.V10)) @ PhiQ_perp.conj().T
    P_Q = proj_perp(Q)
    residuals['PV10'] = relative_residual(lhs10, P_Q - proj_parallel(P_Q @ H))

    if t == 0:
        q0, b0 = Q[:, 0], B[:, 0]
        residuals['t0_closed_form'] = relative_residual(Vbar, np.outer(q0, b0.conj()) / np.vdot(q0, q0).real)

    passed = all(r <= tol for r in residuals.values())
    worst = max(residuals, key=residuals.get)
    log_check_event('conditioning', f"(t, t')=({t}, {t_prime}) N={n}: worst {worst}={residuals[worst]:.2e}", passed)
    return {
        't': t, 't_prime': t_prime, 'n': n,
        'residuals': residuals,
        'eps1_norm': None if eps1 is None else float(np.linalg.norm(eps1) / np.sqrt(n)),
        'eps2_norm': None if eps2 is None else float(np.linalg.norm(eps2) / np.sqrt(n)),
        'passed': passed,
    }


def resample_conditional(factors: ConditionalMeanFactors, rng) -> np.ndarray:
    """V' = Vbar + L Vtilde R^H with a fresh Haar Vtilde."""
    left, right = factors.residual_left, factors.residual_right
    vtilde = sample_haar(left.shape[1], rng)
    return factors.Vbar + left @ vtilde @ right.conj().T


def residual_haar_check(snap: ConditioningSnapshot, factors: ConditionalMeanFactors, rng,
                        resamples: int = 100, tol: float = IDENTITY_TOL) -> Dict:
    """
    Check the random part of the conditional law.

    - the true residual block L^H V R is unitary and rebuilds V exactly
    - every resample V' is unitary and satisfies V'^H Q = B and V' M = H
    """
    rng = as_rng(rng)
    n = snap.n
    left, right = factors.residual_left, factors.residual_right
    true_block = left.conj().T @ snap.V @ right
    k = true_block.shape[0]
    rebuilt = factors.Vbar + left @ true_block @ right.conj().T

    results = {
        'true_block_unitary': float(np.max(np.abs(true_block.conj().T @ true_block - np.eye(k)))),
        'reconstruction': relative_residual(rebuilt, snap.V),
    }
    unitary, row_constraint, col_constraint = [], [], []
    for i in range(resamples):
        v_new = resample_conditional(factors, rng.child(i))
        unitary.append(float(np.max(np.abs(v_new.conj().T @ v_new - np.eye(n)))))
        row_constraint.append(relative_residual(v_new.conj().T @ snap.Q, snap.B))
        if snap.M.shape[1]:
            col_constraint.append(relative_residual(v_new @ snap.M, snap.H))
    results['max_unitarity_error'] = max(unitary) if unitary else 0.0
    results['max_row_constraint'] = max(row_constraint) if row_constraint else 0.0
    results['max_column_constraint'] = max(col_constraint) if col_constraint else 0.0

    passed = all(value <= tol for value in results.values())
    log_check_event('residual-haar', f"(t, t')=({snap.t}, {snap.t_prime}) resamples={resamples}", passed)
    return {'t': snap.t, 't_prime': snap.t_prime, 'resamples': resamples, 'residuals': results, 'passed': passed}


def continued_run_check(instance: ProblemInstance, prior: Prior, record: RunRecord, t: int,
                        resamples: int, rng, options: Optional[EngineOptions] = None) -> Dict:
    """
    Redraw V from its conditional law at (t, t+1) and rerun iteration t.

    The recorded posterior MSE of iteration t is one draw from the same
    conditional law, so it must lie within the spread of the resampled runs.
    """
    rng = as_rng(rng)
    snap = snapshot_from_record(record, instance.model, t, t + 1)
    factors = conditional_mean_build(snap)
    values = []
    for i in range(resamples):
        v_new = resample_conditional(factors, rng.child(i))
        rerun = continue_from_history(instance, prior, record, t, v_new, steps=1, options=options)
        if rerun.iterations:
            values.append(rerun.mse_post_emp[0])
    values = np.asarray(values)
    original = record.mse_post_emp[t]
    spread = float(values.std(ddof=1)) if len(values) > 1 else 0.0
    z = abs(original - values.mean()) / spread if spread > 0 else 0.0
    passed = len(values) > 1 and z <= STAT_SIGMAS
    log_check_event('continued-run', f"t={t}: original={original:.4g}, resampled mean={values.mean():.4g}, z={z:.2f}", passed)
    return {'t': t, 'original': original, 'resampled_mean': float(values.mean()),
            'resampled_std': spread, 'z': z, 'passed': passed}


def epsilon_scaling(spec: EnsembleSpec, prior: Prior, delta: float, sigma2: float,
                    n_grid: Iterable[int], seeds: int, seed: int, t: int = 1) -> Dict:
    """
    Median |eps1|/sqrt(N) and |eps2|/sqrt(N) over seeds for each N.

    Both remainders vanish in the large-system limit, so the medians should
    shrink along an increasing grid.
    """
    t = ParameterValidator.count(t, 't')
    grid = sorted(ParameterValidator.count(n, 'n', minimum=2) for n in n_grid)
    rows = []
    for n in grid:
        m = max(1, int(round(delta * n)))
        eps1, eps2 = [], []
        for s in range(seeds):
            stream = SeededRNG(seed, n, s)
            model = build_measurement(spec, m, n, stream.child(0))
            instance = make_instance(model, prior, sigma2, stream.child(1))
            record = run_ep(instance, prior, t + 1, EngineOptions(keep_history=True))
            if record.iterations < t + 1:
                logger.warning(f"N={n} seed {s}: run stopped after {record.iterations} iterations; skipped")
                continue
            e1, _ = projection_remainders(snapshot_from_record(record, model, t, t))
            _, e2 = projection_remainders(snapshot_from_record(record, model, t, t + 1))
            eps1.append(np.linalg.norm(e1) / np.sqrt(n))
            eps2.append(np.linalg.norm(e2) / np.sqrt(n))
        rows.append({'n': n, 'eps1_median': float(np.median(eps1)), 'eps2_median': float(np.median(eps2))})

    decreasing = all(
        later['eps1_median'] < earlier['eps1_median'] and later['eps2_median'] < earlier['eps2_median']
        for earlier, later in zip(rows, rows[1:])
    )
    log_check_event('epsilon-scaling', f"grid={grid}, t={t}", decreasing)
    return {'t': t, 'rows': rows, 'passed': decreasing}

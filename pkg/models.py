"""
EP State Evolution Toolkit - Data Models
========================================
Immutable value objects passed between the numerical modules.

Arrays are numpy complex128/float64; every model is a frozen dataclass so a
model built by one trial can be shared with other threads without copying.
"""

from dataclasses import dataclass, field
from typing import Dict, List, Optional, Tuple

import numpy as np


@dataclass(frozen=True)
class SvdFactors:
    """SVD of an M x N matrix: A = left (diag(singular), 0) right^H."""
    left: np.ndarray
    singular: np.ndarray
    right: np.ndarray

    @property
    def m(self):
        return self.left.shape[0]

    @property
    def n(self):
        return self.right.shape[0]

    def matrix(self) -> np.ndarray:
        """Reassemble the dense matrix."""
        k = len(self.singular)
        return (self.left[:, :k] * self.singular) @ self.right[:, :k].conj().T

    def __repr__(self):
        return f'<SvdFactors {self.m}x{self.n}>'


@dataclass(frozen=True)
class SpectralDensity:
    """Eigenvalue law of A A^H as weighted atoms (eigenvalue, weight)."""
    eigenvalues: np.ndarray
    weights: np.ndarray

    def moment(self, order: int) -> float:
        return float(np.sum(self.weights * self.eigenvalues ** order))

    @property
    def size(self):
        return len(self.eigenvalues)

    def __repr__(self):
        return f'<SpectralDensity {self.size} atoms, mean={self.moment(1):.6g}>'


@dataclass(frozen=True)
class EnsembleSpec:
    """Generative law of the measurement matrix."""
    kind: str
    kappa: float = 1.0
    singulars: Tuple[float, ...] = ()

    def __repr__(self):
        return f'<EnsembleSpec {self.kind}>'


@dataclass(frozen=True)
class MeasurementModel:
    """A measurement matrix kept in factored form with its realized spectrum."""
    factors: SvdFactors
    density: SpectralDensity
    m: int
    n: int

    @property
    def delta(self):
        return self.m / self.n

    def apply(self, x: np.ndarray) -> np.ndarray:
        """A x using the stored factors."""
        f = self.factors
        return f.left @ (f.singular * (f.right[:, :self.m].conj().T @ x))

    def apply_adjoint(self, r: np.ndarray) -> np.ndarray:
        """A^H r using the stored factors."""
        f = self.factors
        return f.right[:, :self.m] @ (f.singular * (f.left.conj().T @ r))

    def __repr__(self):
        return f'<MeasurementModel {self.m}x{self.n}>'


@dataclass(frozen=True)
class ExtrinsicMessage:
    """Gaussian message: mean vector plus one scalar variance."""
    mean: np.ndarray
    variance: float

    def __repr__(self):
        return f'<ExtrinsicMessage N={len(self.mean)} v={self.variance:.6g}>'


@dataclass(frozen=True)
class ProblemInstance:
    """y = A x_true + w with w ~ CN(0, sigma2 I)."""
    model: MeasurementModel
    x_true: np.ndarray
    y: np.ndarray
    sigma2: float
    noise: np.ndarray

    def __repr__(self):
        return f'<ProblemInstance {self.model.m}x{self.model.n} sigma2={self.sigma2:g}>'


@dataclass
class ErrorHistory:
    """
    Columns of the error recursion after T iterations.

    Q = (q_0 .. q_T) and B = V^H Q have T + 1 columns; H = (h_0 .. h_{T-1})
    and M = V^H H have T.
    """
    Q: np.ndarray
    B: np.ndarray
    M: np.ndarray
    H: np.ndarray


@dataclass
class RunRecord:
    """Per-iteration trace of one EP run."""
    v_ab: List[float] = field(default_factory=list)
    v_ba: List[float] = field(default_factory=list)
    gamma_t: List[float] = field(default_factory=list)
    mse_b_emp: List[float] = field(default_factory=list)
    mse_post_emp: List[float] = field(default_factory=list)
    mse_a_emp: List[float] = field(default_factory=list)
    h_dot_q: List[complex] = field(default_factory=list)
    b_dot_m: List[complex] = field(default_factory=list)
    # hq_cross[t][s] = N^-1 h_t^H q_s for s <= t+1
    hq_cross: List[List[complex]] = field(default_factory=list)
    stop_reason: str = 'max_iterations'
    history: Optional[ErrorHistory] = None
    estimate: Optional[np.ndarray] = None

    @property
    def iterations(self):
        return len(self.v_ab)

    def __repr__(self):
        return f'<RunRecord {self.iterations} iterations, stop={self.stop_reason}>'


@dataclass(frozen=True)
class SeTrace:
    """Deterministic state-evolution sequences, index t = 0 .. T-1."""
    mse_ab: np.ndarray
    mse_ba: np.ndarray
    mse_posterior: np.ndarray

    def __len__(self):
        return len(self.mse_ab)

    def __repr__(self):
        return f'<SeTrace T={len(self)} final mse={self.mse_posterior[-1]:.6g}>'


@dataclass(frozen=True)
class FixedPointReport:
    """Fixed points of the SE map found from a grid of starting points."""
    fixed_points: List[Tuple[float, str]]
    iterations_to_converge: List[int]
    converged: List[bool]
    starts: List[float]

    @property
    def stable_points(self):
        return [fp for fp, label in self.fixed_points if label != 'unstable']

    @property
    def count(self):
        return len(self.fixed_points)

    def __repr__(self):
        return f'<FixedPointReport {self.count} fixed points>'


@dataclass(frozen=True)
class ConditioningSnapshot:
    """
    History of an EP run frozen at (t, t').

    Q, B hold t_prime columns, M, H hold t columns; q_next = q_t and
    m_next = m_t are the vectors the next half-iteration acts on.
    """
    t: int
    t_prime: int
    Q: np.ndarray
    B: np.ndarray
    M: np.ndarray
    H: np.ndarray
    V: np.ndarray
    q_next: Optional[np.ndarray] = None
    m_next: Optional[np.ndarray] = None

    @property
    def n(self):
        return self.V.shape[0]

    def __repr__(self):
        return f'<ConditioningSnapshot t={self.t} t_prime={self.t_prime} N={self.n}>'


@dataclass(frozen=True)
class ConditionalMeanFactors:
    """Blocks of the conditional mean of V given the snapshot."""
    V00: np.ndarray
    V00_alt: np.ndarray
    V01: np.ndarray
    V10: np.ndarray
    V11bar: np.ndarray
    V11bar_alt: np.ndarray
    Phi_Q: np.ndarray
    Phi_M: np.ndarray
    Phi_V10_perp: np.ndarray
    Psi_V01_perp: np.ndarray
    Vbar: np.ndarray

    @property
    def residual_left(self):
        """Phi_Q^perp Phi_V10^perp: left factor of the random part."""
        t_prime = self.V01.shape[0]
        return self.Phi_Q[:, t_prime:] @ self.Phi_V10_perp

    @property
    def residual_right(self):
        """Phi_M^perp Psi_V01^perp: right factor of the random part."""
        t = self.V10.shape[1]
        return self.Phi_M[:, t:] @ self.Psi_V01_perp


@dataclass
class AggregateReport:
    """Trial-averaged traces next to the SE prediction."""
    trials: int
    succeeded: int
    mse_b_mean: List[float]
    mse_b_std: List[float]
    mse_post_mean: List[float]
    mse_post_std: List[float]
    se: Optional[SeTrace] = None
    failures: List[Dict] = field(default_factory=list)
    checks: Dict[str, Dict] = field(default_factory=dict)
    wall_time: float = 0.0

    @property
    def all_checks_passed(self):
        return all(result.get('passed', False) for result in self.checks.values())

    def __repr__(self):
        return f'<AggregateReport {self.succeeded}/{self.trials} trials>'

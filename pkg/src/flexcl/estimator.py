"""Two-term and importance-sampled (ISD) gradient estimators.

A two-term contrastive gradient is ``g_pos - g_neg``.  The ISD estimator
flips a Bernoulli(b) coin, runs only the selected phase, and reweights its
gradient term by ``1/b`` or ``-1/(1-b)``.  The variance helpers below work on
traces and mean inner products only, which is all the downstream analysis
(variance curves, the variance-optimal ``b``) needs.
"""
from __future__ import annotations

import enum
from dataclasses import dataclass

import numpy as np

__all__ = [
    "PhaseKind",
    "PhaseMoments",
    "DomainError",
    "InsufficientDataError",
    "as_gradient",
    "two_term_gradient",
    "sample_phase",
    "isd_gradient",
    "isd_expectation_oracle",
    "estimator_variance_trace",
    "two_term_variance_trace",
    "optimal_positive_probability",
    "empirical_moments",
]

# below this relative gap between the two phase second moments the closed
# form for b_min is a 0/0 and its limit 0.5 is returned
B_MIN_RTOL = 1e-12


class DomainError(ValueError):
    """An argument lies outside the domain where the formula is defined."""


class InsufficientDataError(ValueError):
    """Too few samples to form the requested statistic."""


class PhaseKind(enum.Enum):
    POSITIVE = "+"
    NEGATIVE = "-"

    def __str__(self):
        return self.value


def as_gradient(values) -> np.ndarray:
    g = np.asarray(values, dtype=float)
    if g.ndim == 0:
        g = g.reshape(1)
    if g.ndim != 1 or g.size == 0:
        raise ValueError(f"gradient must be a non-empty 1-d vector, got shape {g.shape}")
    if not np.all(np.isfinite(g)):
        raise ValueError("gradient has non-finite entries")
    return g


def _check_b(b: float) -> float:
    b = float(b)
    if not 0.0 < b < 1.0:
        raise DomainError(f"positive-phase probability must lie in (0, 1), got {b}")
    return b


def _check_same_shape(a: np.ndarray, c: np.ndarray) -> None:
    if a.shape != c.shape:
        raise ValueError(f"dimension mismatch: {a.shape} vs {c.shape}")


def two_term_gradient(g_pos, g_neg) -> np.ndarray:
    g_pos, g_neg = as_gradient(g_pos), as_gradient(g_neg)
    _check_same_shape(g_pos, g_neg)
    return g_pos - g_neg


def sample_phase(b: float, rng: np.random.Generator) -> PhaseKind:
    """Draw the next phase kind; consumes exactly one uniform from ``rng``."""
    b = _check_b(b)
    return PhaseKind.POSITIVE if rng.random() < b else PhaseKind.NEGATIVE


def isd_gradient(phase: PhaseKind, term, b: float) -> np.ndarray:
    """Reweight the single phase term that was actually computed.

    ``term`` is ``g_pos`` for a positive phase and ``g_neg`` for a negative
    one; the other phase's term is never needed.
    """
    b = _check_b(b)
    term = as_gradient(term)
    if phase is PhaseKind.POSITIVE:
        return term / b
    return -term / (1.0 - b)


def isd_expectation_oracle(g_pos, g_neg, b: float) -> np.ndarray:
    """Exact mean of the ISD estimator, summed over both coin outcomes."""
    g_pos, g_neg = as_gradient(g_pos), as_gradient(g_neg)
    _check_same_shape(g_pos, g_neg)
    b = _check_b(b)
    return b * isd_gradient(PhaseKind.POSITIVE, g_pos, b) + (1.0 - b) * isd_gradient(
        PhaseKind.NEGATIVE, g_neg, b
    )


@dataclass(frozen=True)
class PhaseMoments:
    """First and second moment summary of the two phase gradient terms.

    ``trace_cross`` is the trace of the cross-covariance between paired
    positive and negative terms; it only enters the two-term baseline and is
    zero when the phases are sampled independently.
    """

    mean_pos: np.ndarray
    mean_neg: np.ndarray
    trace_cov_pos: float
    trace_cov_neg: float
    trace_cross: float = 0.0
    cross_observed: bool = True

    def __post_init__(self):
        mp = as_gradient(self.mean_pos)
        mn = as_gradient(self.mean_neg)
        _check_same_shape(mp, mn)
        if self.trace_cov_pos < 0 or self.trace_cov_neg < 0:
            raise DomainError("covariance traces must be non-negative")
        object.__setattr__(self, "mean_pos", mp)
        object.__setattr__(self, "mean_neg", mn)
        object.__setattr__(self, "trace_cov_pos", float(self.trace_cov_pos))
        object.__setattr__(self, "trace_cov_neg", float(self.trace_cov_neg))
        object.__setattr__(self, "trace_cross", float(self.trace_cross))

    @classmethod
    def from_scalars(cls, trace_cov_pos, trace_cov_neg, mean_sq_pos=0.0,
                     mean_sq_neg=0.0, mean_dot=0.0, trace_cross=0.0):
        """Build moments realising the given norms and inner product in 2-d.

        Handy for scanning variance curves where only the scalar summaries
        matter.  Requires ``mean_dot**2 <= mean_sq_pos * mean_sq_neg``.
        """
        np_, nn_ = np.sqrt(mean_sq_pos), np.sqrt(mean_sq_neg)
        if mean_dot * mean_dot > mean_sq_pos * mean_sq_neg * (1 + 1e-12):
            raise DomainError("inner product exceeds the Cauchy-Schwarz bound")
        mu_pos = np.array([np_, 0.0])
        if nn_ > 0:
            cos = np.clip(mean_dot / (np_ * nn_), -1.0, 1.0) if np_ > 0 else 0.0
            mu_neg = nn_ * np.array([cos, np.sqrt(max(0.0, 1 - cos * cos))])
        else:
            mu_neg = np.zeros(2)
        return cls(mu_pos, mu_neg, trace_cov_pos, trace_cov_neg, trace_cross)

    @property
    def second_moment_pos(self) -> float:
        """Tr(cov + mu mu^T) for the positive term."""
        return self.trace_cov_pos + float(self.mean_pos @ self.mean_pos)

    @property
    def second_moment_neg(self) -> float:
        return self.trace_cov_neg + float(self.mean_neg @ self.mean_neg)


def estimator_variance_trace(m: PhaseMoments, b) -> float | np.ndarray:
    """Trace of the ISD estimator covariance as a function of ``b``.

    Accepts a scalar or an array of probabilities.
    """
    b_arr = np.asarray(b, dtype=float)
    if np.any((b_arr <= 0) | (b_arr >= 1)):
        raise DomainError("positive-phase probability must lie in (0, 1)")
    pp = float(m.mean_pos @ m.mean_pos)
    nn = float(m.mean_neg @ m.mean_neg)
    pn = float(m.mean_pos @ m.mean_neg)
    out = (
        m.trace_cov_pos / b_arr
        + m.trace_cov_neg / (1.0 - b_arr)
        + (1.0 - b_arr) / b_arr * pp
        + b_arr / (1.0 - b_arr) * nn
        + 2.0 * pn
    )
    return float(out) if out.ndim == 0 else out


def two_term_variance_trace(m: PhaseMoments) -> float:
    return m.trace_cov_pos + m.trace_cov_neg - 2.0 * m.trace_cross


def optimal_positive_probability(m: PhaseMoments) -> float:
    """The ``b`` minimising :func:`estimator_variance_trace`."""
    a = m.second_moment_pos
    c = m.second_moment_neg
    if a <= 0 or c <= 0:
        raise DomainError("both phase second moments must be positive")
    if abs(a - c) <= B_MIN_RTOL * max(a, c):
        return 0.5
    return (a - np.sqrt(a * c)) / (a - c)


def empirical_moments(samples_pos, samples_neg) -> PhaseMoments:
    """Sample means and unbiased covariance traces of the two phase terms.

    The cross trace is estimated from index-paired samples when both phases
    have the same number of draws; otherwise it is set to 0 and
    ``cross_observed`` is False.
    """
    sp = np.atleast_2d(np.asarray(samples_pos, dtype=float))
    sn = np.atleast_2d(np.asarray(samples_neg, dtype=float))
    if sp.shape[0] < 2 or sn.shape[0] < 2:
        raise InsufficientDataError("need at least 2 samples per phase")
    if sp.shape[1] != sn.shape[1]:
        raise ValueError(f"dimension mismatch: {sp.shape[1]} vs {sn.shape[1]}")
    mp, mn = sp.mean(axis=0), sn.mean(axis=0)
    tr_p = float(np.sum(sp.var(axis=0, ddof=1)))
    tr_n = float(np.sum(sn.var(axis=0, ddof=1)))
    if sp.shape[0] == sn.shape[0]:
        cross = float(np.sum((sp - mp) * (sn - mn)) / (sp.shape[0] - 1))
        observed = True
    else:
        cross, observed = 0.0, False
    return PhaseMoments(mp, mn, tr_p, tr_n, cross, observed)

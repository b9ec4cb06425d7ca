"""Bias of always-on learning on scalar toy systems with known equilibria.

Both toys have a scalar parameter ``theta`` and a state ``z`` whose
equilibrium mean is ``sigmoid(theta)``:

* stochastic: binary ``z`` with ``P(z' = 1 | z) = (1 - alpha) z + alpha sigmoid(theta)``
* deterministic: ``z' = (1 - alpha) z + alpha sigmoid(theta)``

The gradient estimate is ``z - target``.  One phase of always-on learning
applies ``theta -= (eta / tau) (z_t - target)`` after every step; the summed
update ``G`` is compared with the end-of-phase update at equilibrium,
``eta (sigmoid(theta0) - target)``.  Simulations are vectorised over
independent trials.
"""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
from scipy.special import expit

from .estimator import DomainError
from .phases import PhaseLengthLaw

__all__ = [
    "ToyMarkovSpec",
    "ToyDeterministicSpec",
    "BiasMeasurement",
    "simulate_phases",
    "run_always_on_phase",
    "run_end_of_phase",
    "measure_bias",
    "chain_marginal",
    "scaling_fit",
    "slope_interval",
    "tau_for_eta",
]


@dataclass(frozen=True)
class ToyMarkovSpec:
    """Binary Markov chain toy.

    ``z0`` is the initial state; ``None`` draws it from the equilibrium law at
    ``theta0``.  ``m`` sets the split point ``s = tau**m`` used by the bias envelope.
    """

    alpha: float = 0.5
    theta0: float = 0.0
    target: float = 0.2
    eta: float = 0.05
    tau: int = 20
    m: float = 0.5
    z0: float | None = None

    stochastic = True

    def __post_init__(self):
        if not 0.0 < self.alpha <= 1.0:
            raise ValueError("alpha must lie in (0, 1]")
        if self.tau < 1:
            raise ValueError("tau must be >= 1")
        if not 0.0 < self.m < 1.0:
            raise ValueError("m must lie in (0, 1)")

    @property
    def s(self) -> float:
        return float(self.tau) ** self.m

    @property
    def equilibrium_mean(self) -> float:
        return float(expit(self.theta0))

    @property
    def truth(self) -> float:
        """End-of-phase update at equilibrium, ``eta * E[z - target]``."""
        return self.eta * (self.equilibrium_mean - self.target)

    def envelope(self) -> float:
        """Order-of-magnitude bias bound with unit constants."""
        return self.eta * self.s / self.tau + self.eta**2 * self.tau

    def with_(self, **kw):
        fields = {k: getattr(self, k) for k in self.__dataclass_fields__}
        fields.update(kw)
        return type(self)(**fields)


@dataclass(frozen=True)
class ToyDeterministicSpec(ToyMarkovSpec):
    """Contraction toy; ``z0 = None`` starts at the fixed point ``sigmoid(theta0)``."""

    stochastic = False

    def envelope(self) -> float:
        return self.eta * self.s / self.tau + self.eta**2


@dataclass(frozen=True)
class BiasMeasurement:
    eta: float
    tau: int
    s: float
    n_trials: int
    mean_G: float
    stderr: float
    truth: float

    @property
    def bias(self) -> float:
        return abs(self.mean_G - self.truth)

    def interval(self, z: float = 1.96) -> tuple[float, float]:
        """Confidence interval for the absolute bias."""
        d = self.mean_G - self.truth
        lo, hi = d - z * self.stderr, d + z * self.stderr
        if lo <= 0.0 <= hi:
            return 0.0, max(abs(lo), abs(hi))
        return min(abs(lo), abs(hi)), max(abs(lo), abs(hi))


def _initial_state(spec, n, rng):
    if spec.z0 is not None:
        return np.full(n, float(spec.z0))
    if spec.stochastic:
        return (rng.random(n) < spec.equilibrium_mean).astype(float)
    return np.full(n, spec.equilibrium_mean)


def _lengths(law: PhaseLengthLaw, n, rng):
    if law.kind == "deterministic":
        return np.full(n, int(law.tau))
    return rng.geometric(1.0 / law.tau, n)


def simulate_phases(spec, law: PhaseLengthLaw, n_trials: int, rng, *, freeze_theta=False,
                    end_of_phase=False) -> np.ndarray:
    """Summed parameter change ``G`` of ``n_trials`` independent phases.

    ``freeze_theta`` runs the dynamics at ``theta0`` throughout.  With
    ``end_of_phase`` the result is instead ``eta * (z_T - target)``, the single
    update a learner would make once the phase is over.
    """
    z = _initial_state(spec, n_trials, rng)
    lengths = _lengths(law, n_trials, rng)
    theta = np.full(n_trials, float(spec.theta0))
    total = np.zeros(n_trials)
    lr = spec.eta / spec.tau
    for t in range(int(lengths.max())):
        active = t < lengths
        if not end_of_phase:
            upd = np.where(active, lr * (z - spec.target), 0.0)
            total += upd
            if not freeze_theta:
                theta -= upd
        drive = (1.0 - spec.alpha) * z + spec.alpha * expit(theta if not freeze_theta else spec.theta0)
        if spec.stochastic:
            nxt = (rng.random(n_trials) < drive).astype(float)
        else:
            nxt = drive
        z = np.where(active, nxt, z)
    if end_of_phase:
        return spec.eta * (z - spec.target)
    return total


def run_always_on_phase(spec, law: PhaseLengthLaw, rng) -> float:
    """Summed always-on update ``G`` over one phase."""
    return float(simulate_phases(spec, law, 1, rng)[0])


def run_end_of_phase(spec, law: PhaseLengthLaw, rng) -> float:
    return float(simulate_phases(spec, law, 1, rng, freeze_theta=True, end_of_phase=True)[0])


def measure_bias(spec, law: PhaseLengthLaw, n_trials: int, rng, *, chunk: int = 100_000) -> BiasMeasurement:
    """Monte-Carlo estimate of ``E[G]`` and its distance from ``spec.truth``."""
    if spec.stochastic and n_trials < 1000:
        raise ValueError("stochastic toy needs at least 1000 trials")
    total, total_sq, done = 0.0, 0.0, 0
    while done < n_trials:
        n = min(chunk, n_trials - done)
        g = simulate_phases(spec, law, n, rng)
        total += float(g.sum())
        total_sq += float(np.dot(g, g))
        done += n
    mean = total / n_trials
    var = max(total_sq / n_trials - mean * mean, 0.0) * n_trials / max(n_trials - 1, 1)
    return BiasMeasurement(spec.eta, spec.tau, spec.s, n_trials, mean,
                           math.sqrt(var / n_trials), spec.truth)


def chain_marginal(spec, steps: int, n_chains: int, rng) -> float:
    """Fraction of chains in state 1 after ``steps`` transitions at fixed ``theta0``."""
    z = _initial_state(spec, n_chains, rng)
    p_eq = spec.equilibrium_mean
    for _ in range(steps):
        drive = (1.0 - spec.alpha) * z + spec.alpha * p_eq
        z = (rng.random(n_chains) < drive).astype(float) if spec.stochastic else drive
    return float(z.mean())


def tau_for_eta(eta: float) -> int:
    """Phase length ``ceil(eta ** -1/2)`` that balances the two bias terms."""
    return int(math.ceil(eta ** -0.5 - 1e-12))


def scaling_fit(points) -> tuple[float, float, float]:
    """Least-squares line through ``(ln x, ln y)``; returns slope, intercept, r^2."""
    pts = np.asarray(points, dtype=float)
    if pts.ndim != 2 or pts.shape[1] != 2 or pts.shape[0] < 3:
        raise DomainError("need at least 3 (x, y) points")
    if np.any(pts <= 0):
        raise DomainError("log-log fit needs strictly positive values")
    lx, ly = np.log(pts[:, 0]), np.log(pts[:, 1])
    design = np.column_stack([lx, np.ones_like(lx)])
    coef, _, rank, _ = np.linalg.lstsq(design, ly, rcond=None)
    if rank < 2:
        raise np.linalg.LinAlgError("x values are all equal; slope is undetermined")
    resid = ly - design @ coef
    ss_tot = float(np.sum((ly - ly.mean()) ** 2))
    r2 = 1.0 - float(resid @ resid) / ss_tot if ss_tot > 0 else 1.0
    return float(coef[0]), float(coef[1]), r2


def slope_interval(measurements, x_of=lambda m: m.eta, n_boot: int = 2000, seed: int = 0,
                   level: float = 0.95) -> tuple[float, float]:
    """Parametric-bootstrap interval for the log-log slope of bias versus ``x``.

    Each bias is resampled from a normal with its Monte-Carlo standard error;
    draws that come out non-positive are floored at a tiny value.
    """
    rng = np.random.default_rng(seed)
    xs = np.array([x_of(m) for m in measurements])
    d = np.array([m.mean_G - m.truth for m in measurements])
    se = np.array([m.stderr for m in measurements])
    slopes = []
    for _ in range(n_boot):
        y = np.abs(d + se * rng.standard_normal(len(d)))
        y = np.maximum(y, 1e-300)
        slopes.append(scaling_fit(np.column_stack([xs, y]))[0])
    lo, hi = np.quantile(slopes, [(1 - level) / 2, (1 + level) / 2])
    return float(lo), float(hi)

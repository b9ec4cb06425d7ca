"""Phase-dynamics engine for contrastive training.

Four schedules are supported:

``two-term-cdk``
    positive phase of K steps, negative phase of K steps, then a single
    update with ``g_pos - g_neg``; the positive term has to be held in memory
    across the negative phase.
``isd-end-of-phase``
    one phase kind drawn per phase, ``tau`` steps of dynamics, then a single
    ISD update at rate ``eta``.
``isd-aol-fixed``
    always-on learning: an ISD update at rate ``eta / tau`` after every
    dynamics step, phases of exactly ``tau`` steps.
``isd-aol-random``
    as above, but phases end with probability ``1/tau`` at each step, so
    their length is geometric with mean ``tau``.

Models plug in through :class:`ModelHooks`.  Gradients follow the descent
convention: ``apply_update(d, lr)`` moves parameters to ``theta - lr * d``.
"""
from __future__ import annotations

import enum
import math
from dataclasses import dataclass
from typing import Any, Callable, Protocol

import numpy as np

from .estimator import PhaseKind, isd_gradient, sample_phase, two_term_gradient

__all__ = [
    "Mode",
    "BudgetUnit",
    "ScheduleConfig",
    "PhaseLengthLaw",
    "TrialRecord",
    "ModelHooks",
    "RunResult",
    "NoViableRateError",
    "sample_phase_length",
    "phase_length_moments",
    "flipped_third_moment",
    "third_moment_series",
    "run_training",
    "learning_rate_grid",
    "learning_rate_line_search",
]

DIVERGED = "DIVERGED"


class Mode(str, enum.Enum):
    TWO_TERM_CDK = "two-term-cdk"
    ISD_END_OF_PHASE = "isd-end-of-phase"
    ISD_AOL_FIXED_T = "isd-aol-fixed"
    ISD_AOL_RANDOM_T = "isd-aol-random"

    def __str__(self):
        return self.value

    @property
    def always_on(self) -> bool:
        return self in (Mode.ISD_AOL_FIXED_T, Mode.ISD_AOL_RANDOM_T)


class BudgetUnit(str, enum.Enum):
    PHASES = "phases"
    GRADIENT_STEPS = "gradient_steps"
    TIME_STEPS = "time_steps"

    def __str__(self):
        return self.value


@dataclass(frozen=True)
class ScheduleConfig:
    mode: Mode
    b: float = 0.5
    tau: int = 100
    eta: float = 0.01
    total_budget: int = 100_000
    budget_unit: BudgetUnit = BudgetUnit.PHASES
    k: int = 100
    record_every: int = 100

    def __post_init__(self):
        object.__setattr__(self, "mode", Mode(self.mode))
        object.__setattr__(self, "budget_unit", BudgetUnit(self.budget_unit))
        if self.mode is not Mode.TWO_TERM_CDK and not 0.0 < self.b < 1.0:
            raise ValueError(f"b must lie in (0, 1) for ISD modes, got {self.b}")
        if self.tau < 1:
            raise ValueError(f"tau must be >= 1, got {self.tau}")
        if self.k < 1:
            raise ValueError(f"k must be >= 1, got {self.k}")
        if not self.eta >= 0.0:
            raise ValueError(f"eta must be non-negative, got {self.eta}")
        if self.total_budget <= 0:
            raise ValueError(f"total_budget must be > 0, got {self.total_budget}")
        if self.record_every <= 0:
            raise ValueError(f"record_every must be > 0, got {self.record_every}")

    @property
    def length_law(self) -> "PhaseLengthLaw":
        if self.mode is Mode.ISD_AOL_RANDOM_T:
            return PhaseLengthLaw("geometric", self.tau)
        return PhaseLengthLaw("deterministic", self.tau)


@dataclass(frozen=True)
class PhaseLengthLaw:
    kind: str  # "deterministic" or "geometric"
    tau: int

    def __post_init__(self):
        if self.kind not in ("deterministic", "geometric"):
            raise ValueError(f"unknown phase length law {self.kind!r}")
        if self.tau < 1:
            raise ValueError("tau must be >= 1")


def sample_phase_length(law: PhaseLengthLaw, rng: np.random.Generator) -> int:
    """Phase length in time steps; geometric draws have support {1, 2, ...}.

    A geometric length is the waiting time for the first success of an
    end-of-phase coin flipped with probability ``1/tau`` at every step.
    """
    if law.kind == "deterministic":
        return int(law.tau)
    return int(rng.geometric(1.0 / law.tau))


def phase_length_moments(tau) -> tuple[float, float, float]:
    """E[T], E[T^2], E[T^3] of the geometric phase length with mean ``tau``."""
    if tau < 1:
        raise ValueError("tau must be >= 1")
    t = float(tau)
    return t, 2 * t**2 - t, 6 * t**3 - 6 * t**2 + t


def flipped_third_moment(tau) -> float:
    """``6 tau^3 - 6 tau^2 - tau``: E[T^3] with the sign of the linear term flipped.

    A tempting slip when deriving the third moment; kept so it can be checked
    against the series.
    """
    t = float(tau)
    return 6 * t**3 - 6 * t**2 - t


def third_moment_series(tau, tail: float = 1e-15) -> float:
    """E[T^3] by direct summation of t^3 P(T = t) until the tail mass is below ``tail``."""
    mu = 1.0 / tau
    if mu >= 1.0:
        return 1.0
    total = 0.0
    t = 1
    survival = 1.0  # P(T >= t)
    while survival > tail:
        pt = survival * mu
        total += t**3 * pt
        survival -= pt
        t += 1
    return total


@dataclass(frozen=True)
class TrialRecord:
    step: int
    unit: str
    metric_name: str
    metric_value: float
    b: float
    eta: float
    tau: int
    mode: str
    seed: int | None

    FIELDS = ("step", "unit", "metric_name", "metric_value", "b", "eta", "tau", "mode", "seed")

    def row(self) -> list:
        return [getattr(self, f) for f in self.FIELDS]


class ModelHooks(Protocol):
    """What a model must provide to be trained by :func:`run_training`.

    A model may additionally define ``run_phase(kind, x, length, step_lr,
    end_lr, weight, rng)``; when present it replaces the step-by-step loop
    of :func:`_run_phase_stepwise` and must be equivalent to it.
    """

    def draw_positive_input(self, rng: np.random.Generator) -> Any: ...

    def draw_negative_context(self, rng: np.random.Generator) -> Any: ...

    def dynamics_step(self, kind: PhaseKind, x: Any, rng: np.random.Generator) -> None: ...

    def phase_gradient(self, kind: PhaseKind) -> np.ndarray: ...

    def apply_update(self, direction: np.ndarray, lr: float) -> None: ...

    def metric(self) -> float: ...


def _run_phase_stepwise(hooks, kind, x, length, step_lr, end_lr, weight, rng):
    # weight is the ISD factor: 1/b for positive phases, -1/(1-b) for negative
    for _ in range(length):
        hooks.dynamics_step(kind, x, rng)
        if step_lr:
            hooks.apply_update(weight * hooks.phase_gradient(kind), step_lr)
    if end_lr:
        hooks.apply_update(weight * hooks.phase_gradient(kind), end_lr)


@dataclass
class RunResult:
    records: list[TrialRecord]
    phases: int
    gradient_steps: int
    time_steps: int
    positive_phases: int
    phase_lengths: list[int]
    diverged: bool

    def metric_series(self, unit: str = "phase", name: str | None = None):
        """``(steps, values)`` of the recorded metric in the requested unit."""
        rows = [r for r in self.records if r.unit == unit and r.metric_name != DIVERGED]
        if name is not None:
            rows = [r for r in rows if r.metric_name == name]
        return (np.array([r.step for r in rows]), np.array([r.metric_value for r in rows]))

    @property
    def final_metric(self) -> float:
        rows = [r for r in self.records if r.unit == "phase"]
        if not rows or rows[-1].metric_name == DIVERGED:
            return math.nan
        return rows[-1].metric_value


def run_training(hooks, sched: ScheduleConfig, rng: np.random.Generator, *,
                 seed: int | None = None, metric_name: str = "metric",
                 fast: bool = True) -> RunResult:
    """Train ``hooks`` under ``sched`` and return the recorded metric trace.

    ``rng`` is split into an independent schedule stream (phase kinds and
    lengths) and a model stream (data draws and dynamics).  The metric is
    recorded every ``sched.record_every`` budget units and at the end, once
    per counting unit (phase, gradient_step, time_step).  A non-finite metric
    writes a ``DIVERGED`` row and stops the run.
    """
    sched_rng, model_rng = rng.spawn(2)
    runner = getattr(hooks, "run_phase", None) if fast else None

    def phase(kind, x, length, step_lr, end_lr, weight):
        if runner is not None:
            runner(kind, x, length, step_lr, end_lr, weight, model_rng)
        else:
            _run_phase_stepwise(hooks, kind, x, length, step_lr, end_lr, weight, model_rng)

    counts = {"phase": 0, "gradient_step": 0, "time_step": 0}
    unit_key = {
        BudgetUnit.PHASES: "phase",
        BudgetUnit.GRADIENT_STEPS: "gradient_step",
        BudgetUnit.TIME_STEPS: "time_step",
    }[sched.budget_unit]
    records: list[TrialRecord] = []
    positive = 0
    lengths: list[int] = []
    next_record = 0
    diverged = False

    def record():
        nonlocal diverged
        value = float(hooks.metric())
        name = metric_name
        if not math.isfinite(value):
            name, diverged = DIVERGED, True
        for unit in ("phase", "gradient_step", "time_step"):
            records.append(TrialRecord(counts[unit], unit, name, value, sched.b, sched.eta,
                                       sched.tau, str(sched.mode), seed))

    def remaining():
        return sched.total_budget - counts[unit_key]

    def clip_length(length):
        # only time-step and gradient-step budgets can run out mid-phase
        if unit_key == "time_step" or (unit_key == "gradient_step" and sched.mode.always_on):
            return max(1, min(length, remaining()))
        return length

    record()
    next_record += sched.record_every
    while not diverged and remaining() > 0:
        if sched.mode is Mode.TWO_TERM_CDK:
            k = sched.k
            if unit_key == "time_step":
                k = max(1, min(k, remaining() // 2))
            x = hooks.draw_positive_input(model_rng)
            phase(PhaseKind.POSITIVE, x, k, 0.0, 0.0, 1.0)
            g_pos = hooks.phase_gradient(PhaseKind.POSITIVE)
            c = hooks.draw_negative_context(model_rng)
            phase(PhaseKind.NEGATIVE, c, k, 0.0, 0.0, 1.0)
            g_neg = hooks.phase_gradient(PhaseKind.NEGATIVE)
            if sched.eta:
                hooks.apply_update(two_term_gradient(g_pos, g_neg), sched.eta)
            counts["phase"] += 2
            counts["gradient_step"] += 1
            counts["time_step"] += 2 * k
            positive += 1
            lengths += [k, k]
        else:
            kind = sample_phase(sched.b, sched_rng)
            length = clip_length(sample_phase_length(sched.length_law, sched_rng))
            weight = float(isd_gradient(kind, [1.0], sched.b)[0])
            x = (hooks.draw_positive_input(model_rng) if kind is PhaseKind.POSITIVE
                 else hooks.draw_negative_context(model_rng))
            if sched.mode.always_on:
                phase(kind, x, length, sched.eta / sched.tau, 0.0, weight)
                counts["gradient_step"] += length
            else:
                phase(kind, x, length, 0.0, sched.eta, weight)
                counts["gradient_step"] += 1
            counts["phase"] += 1
            counts["time_step"] += length
            positive += kind is PhaseKind.POSITIVE
            lengths.append(length)
        if counts[unit_key] >= next_record and remaining() > 0:
            record()
            while next_record <= counts[unit_key]:
                next_record += sched.record_every
    if not diverged:
        record()
    return RunResult(records, counts["phase"], counts["gradient_step"], counts["time_step"],
                     positive, lengths, diverged)


class NoViableRateError(RuntimeError):
    """Every learning rate in a line search diverged."""


def learning_rate_grid(lr_min: float, lr_max: float, n: int = 10) -> np.ndarray:
    if not 0 < lr_min < lr_max:
        raise ValueError("need 0 < lr_min < lr_max")
    if n < 2:
        raise ValueError("need at least two grid points")
    return np.logspace(np.log10(lr_min), np.log10(lr_max), n)


def learning_rate_line_search(train: Callable[[float], float], lr_min: float, lr_max: float,
                              n: int = 10):
    """Try ``n`` log10-equispaced rates and keep the lowest final training metric.

    ``train(lr)`` returns the end-of-training metric.  Non-finite results mark
    the rate as failed.  Returns ``(best_lr, table)`` where ``table`` is a list
    of ``(lr, metric, ok)`` tuples in grid order.
    """
    table = []
    for lr in learning_rate_grid(lr_min, lr_max, n):
        value = float(train(float(lr)))
        table.append((float(lr), value, math.isfinite(value)))
    viable = [row for row in table if row[2]]
    if not viable:
        raise NoViableRateError(f"all {n} rates in [{lr_min}, {lr_max}] diverged")
    best = min(viable, key=lambda row: row[1])
    return best[0], table

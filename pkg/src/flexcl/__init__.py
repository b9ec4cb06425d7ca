"""Temporally local contrastive learning: ISD gradient estimation, always-on
learning with fixed or random phase lengths, and the models and toy systems
used to test them."""
from .estimator import (DomainError, InsufficientDataError, PhaseKind, PhaseMoments,
                        empirical_moments, estimator_variance_trace, isd_expectation_oracle,
                        isd_gradient, optimal_positive_probability, sample_phase,
                        two_term_gradient, two_term_variance_trace)
from .phases import (BudgetUnit, Mode, NoViableRateError, PhaseLengthLaw, RunResult,
                     ScheduleConfig, TrialRecord, learning_rate_line_search, run_training)
from .data import Dataset, binarize, generate_bas, load_idx, load_mnist_subset, write_idx

__version__ = "0.1.0"

"""Goal-oriented safe exploration on graphs with GP confidence bounds."""

from .gp import (BetaSchedule, ConfidenceState, KernelSpec, NumericalError,
                 PosteriorModel, gamma_estimate, kernel_eval, kernel_metric,
                 update_bounds)
from .graph import (DecisionGraph, SetCalculus, baseline_sets, ergodic,
                    reach_closure, return_closure)
from .engine import (GooseConfig, OracleExhausted, RunTrace, run,
                     safe_expand_step, sample_bound)

__version__ = '0.1.0'

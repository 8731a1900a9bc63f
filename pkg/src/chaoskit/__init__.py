"""Interacting-particle simulation of McKean-Vlasov SDEs with a tamed Euler-Maruyama
stepper, plus tools for measuring propagation-of-chaos and time-step convergence rates."""

__version__ = "0.1.0"

from .engine import NoisePlan, TimeGrid, Trajectory, brownian_increment, simulate, step
from .errors import (ChaoskitError, ConfigError, DivergenceError, InvalidInputError,
                     ResourceLimitError)
from .harness import ExperimentConfig, run_dt_study, run_moment_audit, run_poc_study
from .metrics import (RateReport, empirical_moment, fit_rate, lp_coupled_error,
                      wasserstein_1d)
from .model import (Ensemble, HigherOrder, ModelSpec, MultiKernel, SingleKernel,
                    aggregate_higher, aggregate_multi, aggregate_single, build_scenario,
                    eval_interaction, tame_drift)

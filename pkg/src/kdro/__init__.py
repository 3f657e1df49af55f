"""Kernel-smoothed, KL-distributionally-robust policy evaluation and learning
for continuous treatments."""
from .bandwidth import BandwidthChoice, select_bandwidth
from .baselines import (
    DiscretePolicy,
    DiscretizationSpec,
    assign_bins,
    discrete_dro_evaluate,
    discrete_dro_learn,
    discrete_propensity,
    discretize_treatment,
)
from .config import ExperimentConfig, from_ini, preset
from .dro import AmbiguityConfig, DualSolution, SolverOptions, evaluate_policy, solve_alpha
from .errors import ConfigError, DataError, KdroError, NumericalError
from .kernels import KernelConfig, KernelFamily, kernel_moments, kernel_value
from .learner import LearnerOptions, LearnResult, learn_nonrobust, learn_policy
from .model import GaussianLinear, Linear, ObservationSet, ScalarMultiple, UniformShift, validate_dataset
from .report import EvalReport
from .simgen import DgpKind, DgpSpec, build_dgp, oracle_q_star, perturb_kl, q_mean, q_pert

__version__ = "0.1.0"

__all__ = [
    "AmbiguityConfig",
    "BandwidthChoice",
    "ConfigError",
    "DataError",
    "DgpKind",
    "DgpSpec",
    "DiscretePolicy",
    "DiscretizationSpec",
    "DualSolution",
    "EvalReport",
    "ExperimentConfig",
    "GaussianLinear",
    "KdroError",
    "KernelConfig",
    "KernelFamily",
    "LearnResult",
    "LearnerOptions",
    "Linear",
    "NumericalError",
    "ObservationSet",
    "ScalarMultiple",
    "SolverOptions",
    "UniformShift",
    "assign_bins",
    "build_dgp",
    "discrete_dro_evaluate",
    "discrete_dro_learn",
    "discrete_propensity",
    "discretize_treatment",
    "evaluate_policy",
    "from_ini",
    "kernel_moments",
    "kernel_value",
    "learn_nonrobust",
    "learn_policy",
    "oracle_q_star",
    "perturb_kl",
    "preset",
    "q_mean",
    "q_pert",
    "select_bandwidth",
    "solve_alpha",
    "validate_dataset",
]

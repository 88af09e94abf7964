"""Twice-regularized MDP toolkit."""
from .errors import (ConfigError, DimensionError, DivergenceError, DomainError, R2MdpError,
                     SolverError, StateError, UnsupportedError)
from .kernels import BACKEND
from .mdp import (TabularMdp, load_mdp, modified_policy_iteration, policy_evaluation,
                  random_mdp, save_mdp, value_iteration)
from .r2 import R2Config, check_assumption_1, r2_mpi, r2_policy_evaluation
from .regularizers import L1, L2, LINF, NormSpec
from .robust import ClosedForm, Iterative, UncertaintySpec, robust_mpi, robust_policy_evaluation

__version__ = "0.1.0"

__all__ = [
    "BACKEND", "ClosedForm", "ConfigError", "DimensionError", "DivergenceError", "DomainError",
    "Iterative", "L1", "L2", "LINF", "NormSpec", "R2Config", "R2MdpError", "SolverError",
    "StateError", "TabularMdp", "UncertaintySpec", "UnsupportedError", "check_assumption_1",
    "load_mdp", "modified_policy_iteration", "policy_evaluation", "r2_mpi",
    "r2_policy_evaluation", "random_mdp", "robust_mpi", "robust_policy_evaluation",
    "save_mdp", "value_iteration",
]

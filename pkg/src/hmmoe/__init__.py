"""Heterogeneous multi-modal mixture-of-experts adapters on a minimal autodiff core."""

from .backbone import Model, build_model, model_forward, search_budget, train_step
from .errors import (
    ConfigurationError,
    ContractError,
    DataError,
    DeterminismError,
    DimensionError,
    EmptySequenceError,
    HmmoeError,
)
from .experts import ExpertKind, ExpertParams, init_expert
from .gradcheck import finite_difference_check
from .layer import HmmoeConfig, HmmoeLayer, count_parameters, hmmoe_forward, utilization_stats
from .params import ParameterStore
from .routing import combine_group, route_global, route_local
from .tensor import Tape, Tensor, backward

__version__ = "0.1.0"

__all__ = [
    "ConfigurationError",
    "ContractError",
    "DataError",
    "DeterminismError",
    "DimensionError",
    "EmptySequenceError",
    "ExpertKind",
    "ExpertParams",
    "HmmoeConfig",
    "HmmoeError",
    "HmmoeLayer",
    "Model",
    "ParameterStore",
    "Tape",
    "Tensor",
    "backward",
    "build_model",
    "combine_group",
    "count_parameters",
    "finite_difference_check",
    "hmmoe_forward",
    "init_expert",
    "model_forward",
    "route_global",
    "route_local",
    "search_budget",
    "train_step",
    "utilization_stats",
]

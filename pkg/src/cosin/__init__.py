"""Bayesian structured infinite factorization for count matrices."""
from .model import (
    MAX_COUNT,
    ChainState,
    CountMatrix,
    Covariates,
    HyperParams,
    ValidationError,
    apply_link,
    link_bounds,
    stick_breaking,
    validate_inputs,
)
from .gibbs import Draw, DrawStore, run_chain
from .rng import RngStream

__version__ = "0.1.0"

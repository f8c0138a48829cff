"""Sparse infinite factor models with the L1/2 shrinkage prior.

Exact Gibbs sampling, collapsed variational inference, post-selection
metrics and synthetic data generators.
"""
from .dist import NumericError, ParameterDomainError, RngStream
from .prior import Hyperparams, TheoryConditionWarning
from .state import Dataset, GibbsChain, GibbsState, load_chain, load_matrix, standardize

__version__ = "0.1.0"

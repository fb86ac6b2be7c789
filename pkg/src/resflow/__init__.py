"""Invertible residual flows at desk scale.

A residual flow is a stack of blocks ``x -> x + g(x)`` where each branch
``g`` is a small dense network constrained to be a contraction, so every
block is invertible and the model density is tractable via the change of
variables identity.  This package implements the full pipeline in plain
numpy: the branch network and its derivative primitives, induced-norm
weight constraints, exact and stochastic log-determinant estimators,
flow composition, maximum-likelihood training on 2D toy datasets, and a
file-emitting CLI.
"""

__version__ = "0.1.0"

from resflow.blocks import BlockParams, LayerParams
from resflow.flow import ActNorm, FlowModel, ResidualBlock
from resflow.logdet import EstimatorConfig, RouletteDist
from resflow.norms import init_block_params

__all__ = [
    "ActNorm",
    "BlockParams",
    "EstimatorConfig",
    "FlowModel",
    "LayerParams",
    "ResidualBlock",
    "RouletteDist",
    "init_block_params",
    "__version__",
]

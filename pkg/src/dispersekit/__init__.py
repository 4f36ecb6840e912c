"""Dispersive regularization losses, TeLU analysis and a toy collapse lab."""

from .dispersion import (
    DispersionSpec,
    PositivePairing,
    combined_loss,
    decomposition_residual,
    dispersive_grad,
    dispersive_loss,
    info_nce,
    softmax_weights,
)
from .numeric_core import FdConfig, fd_gradient, pairwise_sq_dists, seeded_normal
from .telu import find_critical_point, relu, telu, telu_d1, telu_d2

__version__ = "0.1.0"

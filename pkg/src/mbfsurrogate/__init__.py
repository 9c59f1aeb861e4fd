"""Myocardial blood flow quantification: 2CXM forward model, NLLS and MCMC
fitting, and a CNN surrogate trained on posterior-median targets."""

from .errors import (
    CountMismatchError,
    DivergenceError,
    FormatError,
    MagicMismatchError,
    NonFiniteValueError,
    PreconditionError,
    UnsupportedVersionError,
)
from .kinetics import Curve, KineticParams, TimeGrid, impulse_response, simulate_tissue

__all__ = [
    "CountMismatchError",
    "Curve",
    "DivergenceError",
    "FormatError",
    "KineticParams",
    "MagicMismatchError",
    "NonFiniteValueError",
    "PreconditionError",
    "TimeGrid",
    "UnsupportedVersionError",
    "impulse_response",
    "simulate_tissue",
]

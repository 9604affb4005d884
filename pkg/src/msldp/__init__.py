"""Numerical toolkit for small-noise multiscale diffusions.

Computes homogenized coefficients, large-deviations local rates and
action functionals, and near-optimal importance-sampling controls for
SDEs with locally periodic coefficients, plus an Euler-Maruyama
simulator and rare-event Monte Carlo harness to validate them.
"""

from .errors import (BracketError, ConfigError, DimensionError, EvalError,
                     ExprError, MsldpError, NondegeneracyError,
                     NonFiniteError, ParseError, SolverError, StepSizeError)
from .model import (CoefficientField, MultiscaleModel, build_model,
                    classify_regime, velocity_kernel)

__all__ = [
    "BracketError", "ConfigError", "DimensionError", "EvalError",
    "ExprError", "MsldpError", "NondegeneracyError", "NonFiniteError",
    "ParseError", "SolverError", "StepSizeError",
    "CoefficientField", "MultiscaleModel", "build_model", "classify_regime",
    "velocity_kernel",
]

__version__ = "0.1.0"

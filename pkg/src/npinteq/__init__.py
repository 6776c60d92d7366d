"""Nonparametric MLE and MSLE for interval-censored and deconvolution data,
with Fredholm solvers for efficient influence functions."""

from .core_types import (FunctionalSpec, GridFunction, NumericalError, StepDistribution,
                         distance, eval_cdf, first_moment, integrate_against, moment)

__all__ = ["FunctionalSpec", "GridFunction", "NumericalError", "StepDistribution",
           "distance", "eval_cdf", "first_moment", "integrate_against", "moment"]
__version__ = "0.1.0"

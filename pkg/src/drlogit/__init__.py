"""Doubly robust estimation of a log odds ratio in the logistic partially linear model."""
from .core import (ConvergenceError, Dataset, DrlogitError, EstimateReport, FoldPlan,
                   NumericalError, NuisancePredictions, ValidationError, make_folds, solve_beta)

__version__ = "0.1.0"

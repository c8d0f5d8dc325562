"""Conditional-mean learners used by the cross-fitted estimator.

Every learner exposes ``fit(responses, covariates, indices=None, seed=None)``
returning an immutable :class:`Predictor`; only the rows in ``indices`` are
read.
"""
from .base import ConstantPredictor, Learner, Predictor
from .forest import ForestLearner
from .knn import KnnLearner
from .linear import LassoLearner, RidgeLearner

LEARNERS = {"ridge": RidgeLearner, "lasso": LassoLearner, "knn": KnnLearner,
            "forest": ForestLearner}


def ridge_learner(lam: float = 1.0) -> RidgeLearner:
    return RidgeLearner(lam)


def lasso_learner(lam="auto") -> LassoLearner:
    return LassoLearner(lam)


def knn_learner(k: int = 10) -> KnnLearner:
    return KnnLearner(k)


def forest_learner(trees: int = 200, max_depth: int | None = None, min_leaf: int = 5,
                   seed: int = 0) -> ForestLearner:
    return ForestLearner(trees, max_depth, min_leaf, seed=seed)


def make_learner(name: str, **params) -> Learner:
    """Build a learner from its name and keyword hyperparameters."""
    from ..core import ValidationError

    try:
        cls = LEARNERS[name]
    except KeyError:
        raise ValidationError(f"unknown learner {name!r}; choose from {sorted(LEARNERS)}") from None
    try:
        return cls(**params)
    except TypeError as exc:
        raise ValidationError(f"bad hyperparameters for {name}: {exc}") from None


__all__ = ["ConstantPredictor", "ForestLearner", "KnnLearner", "LassoLearner", "Learner",
           "Predictor", "RidgeLearner", "forest_learner", "knn_learner", "lasso_learner",
           "make_learner", "ridge_learner", "LEARNERS"]

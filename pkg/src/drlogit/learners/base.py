"""Learner contract: ``fit`` on a row subset returns an immutable predictor."""
from __future__ import annotations

import numpy as np

from ..core import ValidationError, as_index


class Predictor:
    """Fitted conditional-mean function.

    ``predict`` takes one covariate row (returns a float) or a matrix
    (returns an array). Instances are immutable and calling one is the same
    as calling ``predict``.
    """

    def predict(self, x):
        x = np.asarray(x, dtype=float)
        if x.ndim == 1:
            return float(self._predict(x[None, :])[0])
        if x.ndim != 2:
            raise ValidationError("covariates must be a row or a 2-d matrix")
        return self._predict(x)

    __call__ = predict

    def _predict(self, x: np.ndarray) -> np.ndarray:
        raise NotImplementedError

    def __setattr__(self, name, value):
        if getattr(self, "_sealed", False):
            raise AttributeError("predictors are immutable")
        object.__setattr__(self, name, value)

    def _seal(self):
        for v in vars(self).values():
            if isinstance(v, np.ndarray):
                v.setflags(write=False)
        object.__setattr__(self, "_sealed", True)
        return self


class ConstantPredictor(Predictor):
    def __init__(self, value: float):
        self.value = float(value)
        self._seal()

    def _predict(self, x):
        return np.full(x.shape[0], self.value)


class Learner:
    """Blackbox estimator of ``E[R | C]`` from a subset of rows.

    Subclasses set ``name`` and implement ``_fit(r, c, seed)`` on the already
    restricted rows, so rows outside ``indices`` can never reach the fit.
    """

    name = "learner"

    @property
    def hyperparams(self) -> dict:
        return {}

    def fit(self, responses, covariates, indices=None, seed=None) -> Predictor:
        r = np.asarray(responses, dtype=float).ravel()
        c = np.asarray(covariates, dtype=float)
        if c.ndim == 1:
            c = c[:, None]
        if c.ndim != 2 or c.shape[0] != r.shape[0]:
            raise ValidationError("responses and covariates have different row counts")
        if indices is not None:
            idx = as_index(indices, r.shape[0])
            r, c = r[idx], c[idx]
        if r.shape[0] == 0:
            raise ValidationError(f"{self.name}: no rows to fit")
        if not (np.all(np.isfinite(r)) and np.all(np.isfinite(c))):
            raise ValidationError(f"{self.name}: non-finite training data")
        return self._fit(np.ascontiguousarray(r), np.ascontiguousarray(c), seed)

    def _fit(self, r: np.ndarray, c: np.ndarray, seed) -> Predictor:
        raise NotImplementedError

    def __repr__(self):
        args = ", ".join(f"{k}={v!r}" for k, v in self.hyperparams.items())
        return f"{type(self).__name__}({args})"

"""Ridge and lasso least squares with an unpenalized intercept."""
from __future__ import annotations

import numpy as np
from scipy import linalg

from ..core import NumericalError, ValidationError
from ..links import IDENTITY
from ..penalized import Standardizer, fit_l1
from .base import Learner, Predictor


class LinearPredictor(Predictor):
    def __init__(self, intercept: float, coef):
        self.intercept = float(intercept)
        self.coef = np.array(coef, dtype=float)
        self._seal()

    def _predict(self, x):
        if x.shape[1] != self.coef.shape[0]:
            raise ValidationError(f"expected {self.coef.shape[0]} covariates, got {x.shape[1]}")
        return self.intercept + x @ self.coef


class RidgeLearner(Learner):
    """Minimizes ``sum (r - b0 - c'b)^2 + lam |b|^2``; ``lam = 0`` is ordinary least squares."""

    name = "ridge"

    def __init__(self, lam: float = 1.0):
        if not lam >= 0:
            raise ValidationError("ridge penalty must be non-negative")
        self.lam = float(lam)

    @property
    def hyperparams(self):
        return {"lambda": self.lam}

    def _fit(self, r, c, seed):
        xm, ym = c.mean(axis=0), r.mean()
        xc = c - xm
        gram = xc.T @ xc
        if self.lam == 0.0:
            if np.linalg.matrix_rank(xc) < c.shape[1]:
                raise NumericalError("singular design: ridge with lambda=0 needs full rank")
        gram[np.diag_indices_from(gram)] += self.lam
        try:
            coef = linalg.solve(gram, xc.T @ (r - ym), assume_a="pos")
        except linalg.LinAlgError as exc:
            raise NumericalError(f"ridge solve failed: {exc}") from exc
        return LinearPredictor(ym - xm @ coef, coef)


class LassoLearner(Learner):
    """L1-penalized least squares ``(2n)^-1 |r - b0 - c'b|^2 + lam |b|_1``.

    ``lam="auto"`` is ``sqrt(2 log p / n)`` times the score scale of the
    intercept-only residuals (see ``hd_sparse.score_scale``). The penalty is applied on standardized columns with weights ``1/sd_j``, which
    is the same as penalizing raw coefficients.
    """

    name = "lasso"

    def __init__(self, lam="auto", auto_constant: float = 1.0):
        if isinstance(lam, str):
            if lam != "auto":
                raise ValidationError("lasso penalty must be non-negative or 'auto'")
        elif not lam >= 0:
            raise ValidationError("lasso penalty must be non-negative or 'auto'")
        self.lam = lam
        self.auto_constant = float(auto_constant)

    @property
    def hyperparams(self):
        return {"lambda": self.lam, "auto_constant": self.auto_constant}

    def penalty(self, r, c) -> float:
        if self.lam != "auto":
            return float(self.lam)
        from ..hd_sparse import auto_lambda, score_scale

        n, p = c.shape
        scale = score_scale(r - r.mean(), c)
        if scale == 0.0:
            return 0.0
        return auto_lambda(n, max(p, 2), scale, self.auto_constant)

    def _fit(self, r, c, seed):
        lam = self.penalty(r, c)
        std = Standardizer.fit(c)
        z = np.column_stack([np.ones(r.shape[0]), std.transform(c)])
        pen = np.concatenate([[0.0], lam / std.scale])
        fit = fit_l1(z, IDENTITY, np.ones(r.shape[0]), r, pen)
        icpt, coef = std.to_original(fit.coef[0], fit.coef[1:])
        return LinearPredictor(icpt, coef)

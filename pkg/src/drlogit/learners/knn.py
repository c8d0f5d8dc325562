"""Euclidean k-nearest-neighbour mean."""
from __future__ import annotations

import numpy as np

from ..core import ValidationError
from .base import Learner, Predictor

# entries per block of pairwise differences
BLOCK_ENTRIES = 4_000_000


class KnnPredictor(Predictor):
    def __init__(self, x, r, k):
        self.x = np.array(x, dtype=float)
        self.r = np.array(r, dtype=float)
        self.k = int(k)
        self._seal()

    def neighbours(self, q):
        """Indices of the ``k`` nearest training rows; ties go to the lower index."""
        q = np.atleast_2d(np.asarray(q, dtype=float))
        out = np.empty((q.shape[0], self.k), dtype=int)
        step = max(1, BLOCK_ENTRIES // max(1, self.x.size))
        for s in range(0, q.shape[0], step):
            diff = q[s:s + step, None, :] - self.x[None, :, :]
            d2 = np.einsum("qij,qij->qi", diff, diff)
            out[s:s + step] = np.argsort(d2, axis=1, kind="stable")[:, :self.k]
        return out

    def _predict(self, x):
        if x.shape[1] != self.x.shape[1]:
            raise ValidationError(f"expected {self.x.shape[1]} covariates, got {x.shape[1]}")
        return self.r[self.neighbours(x)].mean(axis=1)


class KnnLearner(Learner):
    name = "knn"

    def __init__(self, k: int = 10):
        if int(k) != k or k < 1:
            raise ValidationError("k must be a positive integer")
        self.k = int(k)

    @property
    def hyperparams(self):
        return {"k": self.k}

    def _fit(self, r, c, seed):
        if self.k > r.shape[0]:
            raise ValidationError(f"k={self.k} exceeds the {r.shape[0]} training rows")
        return KnnPredictor(c, r, self.k)

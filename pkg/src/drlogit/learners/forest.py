"""Random-feature regression forest on bootstrap samples (numba kernels)."""
from __future__ import annotations

import math

import numpy as np
from numba import njit

from ..core import ValidationError, derive_seed
from .base import Learner, Predictor

NO_DEPTH_LIMIT = 1 << 30


@njit(cache=True)
def _best_split(x, y, idx, start, end, feats, min_leaf):
    """Variance-reduction split of ``idx[start:end]`` over candidate features.

    Returns (feature, threshold, left count) or feature -1 when no admissible
    split exists. Thresholds are midpoints between distinct sorted values.
    """
    m = end - start
    best_gain = 1e-12
    best_f = -1
    best_thr = 0.0
    best_left = 0
    rows = idx[start:end]
    yn = y[rows]
    total = yn.sum()
    base = total * total / m
    for f in feats:
        vals = x[rows, f]
        order = np.argsort(vals, kind="mergesort")
        sv = vals[order]
        sy = yn[order]
        acc = 0.0
        for i in range(1, m):
            acc += sy[i - 1]
            if i < min_leaf or m - i < min_leaf:
                continue
            if sv[i] <= sv[i - 1]:
                continue
            rest = total - acc
            gain = acc * acc / i + rest * rest / (m - i) - base
            if gain > best_gain:
                best_gain = gain
                best_f = f
                best_thr = 0.5 * (sv[i - 1] + sv[i])
                best_left = i
    return best_f, best_thr, best_left


@njit(cache=True)
def _grow_tree(x, y, rows, mtry, max_depth, min_leaf, seed):
    np.random.seed(seed)
    p = x.shape[1]
    cap = 2 * rows.size + 1
    feature = np.full(cap, -1, dtype=np.int64)
    threshold = np.zeros(cap)
    left = np.full(cap, -1, dtype=np.int64)
    right = np.full(cap, -1, dtype=np.int64)
    value = np.zeros(cap)
    idx = rows.copy()
    stack = np.zeros((cap, 4), dtype=np.int64)  # node, start, end, depth
    stack[0, 0], stack[0, 1], stack[0, 2], stack[0, 3] = 0, 0, idx.size, 0
    top = 1
    n_nodes = 1
    perm = np.arange(p)
    while top > 0:
        top -= 1
        node, start, end, depth = stack[top, 0], stack[top, 1], stack[top, 2], stack[top, 3]
        m = end - start
        s = 0.0
        for i in range(start, end):
            s += y[idx[i]]
        value[node] = s / m
        if depth >= max_depth or m < 2 * min_leaf:
            continue
        # partial Fisher-Yates draw of mtry candidate features
        for j in range(mtry):
            k = j + np.random.randint(p - j)
            perm[j], perm[k] = perm[k], perm[j]
        f, thr, n_left = _best_split(x, y, idx, start, end, perm[:mtry], min_leaf)
        if f < 0:
            continue
        seg = idx[start:end]
        mask = x[seg, f] <= thr
        idx[start:end] = np.concatenate((seg[mask], seg[~mask]))
        feature[node] = f
        threshold[node] = thr
        left[node] = n_nodes
        right[node] = n_nodes + 1
        stack[top, 0], stack[top, 1], stack[top, 2], stack[top, 3] = \
            n_nodes, start, start + n_left, depth + 1
        stack[top + 1, 0], stack[top + 1, 1], stack[top + 1, 2], stack[top + 1, 3] = \
            n_nodes + 1, start + n_left, end, depth + 1
        top += 2
        n_nodes += 2
    return (feature[:n_nodes], threshold[:n_nodes], left[:n_nodes], right[:n_nodes],
            value[:n_nodes])


@njit(cache=True)
def _predict_forest(x, offsets, feature, threshold, left, right, value):
    n_trees = offsets.size - 1
    out = np.zeros(x.shape[0])
    for i in range(x.shape[0]):
        acc = 0.0
        for t in range(n_trees):
            base = offsets[t]
            node = 0
            while feature[base + node] >= 0:
                if x[i, feature[base + node]] <= threshold[base + node]:
                    node = left[base + node]
                else:
                    node = right[base + node]
            acc += value[base + node]
        out[i] = acc / n_trees
    return out


class ForestPredictor(Predictor):
    """Trees stored back to back; ``offsets[t]`` is the first node of tree ``t``."""

    def __init__(self, p, offsets, feature, threshold, left, right, value):
        self.p = int(p)
        self.offsets = offsets
        self.feature = feature
        self.threshold = threshold
        self.left = left
        self.right = right
        self.value = value
        self._seal()

    @property
    def n_trees(self) -> int:
        return self.offsets.size - 1

    def _predict(self, x):
        if x.shape[1] != self.p:
            raise ValidationError(f"expected {self.p} covariates, got {x.shape[1]}")
        return _predict_forest(np.ascontiguousarray(x), self.offsets, self.feature,
                               self.threshold, self.left, self.right, self.value)


class ForestLearner(Learner):
    """Regression forest: bootstrap rows, ``mtry`` random candidate features per split.

    Parameters
    ----------
    trees : int
    max_depth : int or None
        ``None`` grows until ``min_leaf`` stops splitting.
    min_leaf : int
        Minimum number of (bootstrap) rows in a leaf.
    mtry : int or None
        Defaults to ``ceil(p / 3)``.
    bootstrap : bool
        ``False`` grows every tree on all rows (features are still sampled).
    seed : int
        Base seed; tree ``t`` uses ``derive_seed(seed, t)``. A seed passed to
        ``fit`` replaces it.
    """

    name = "forest"

    def __init__(self, trees: int = 200, max_depth: int | None = None, min_leaf: int = 5,
                 mtry: int | None = None, bootstrap: bool = True, seed: int = 0):
        if trees < 1 or min_leaf < 1 or (max_depth is not None and max_depth < 0):
            raise ValidationError("trees and min_leaf must be positive, max_depth non-negative")
        if mtry is not None and mtry < 1:
            raise ValidationError("mtry must be positive")
        self.trees = int(trees)
        self.max_depth = max_depth
        self.min_leaf = int(min_leaf)
        self.mtry = mtry
        self.bootstrap = bool(bootstrap)
        self.seed = seed

    @property
    def hyperparams(self):
        return {"trees": self.trees, "max_depth": self.max_depth, "min_leaf": self.min_leaf,
                "mtry": self.mtry, "bootstrap": self.bootstrap, "seed": self.seed}

    def _fit(self, r, c, seed):
        n, p = c.shape
        base = self.seed if seed is None else seed
        mtry = min(p, self.mtry or math.ceil(p / 3))
        depth = NO_DEPTH_LIMIT if self.max_depth is None else self.max_depth
        parts = []
        for t in range(self.trees):
            s = derive_seed(base, t)
            if self.bootstrap:
                rows = np.random.default_rng(s).integers(0, n, n)
            else:
                rows = np.arange(n)
            parts.append(_grow_tree(c, r, rows.astype(np.int64), mtry, depth, self.min_leaf,
                                    s & 0xFFFFFFFF))
        sizes = np.array([pt[0].size for pt in parts])
        offsets = np.concatenate([[0], np.cumsum(sizes)]).astype(np.int64)
        cat = [np.concatenate([pt[j] for pt in parts]) for j in range(5)]
        return ForestPredictor(p, offsets, *cat)

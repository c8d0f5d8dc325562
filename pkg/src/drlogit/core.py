"""Shared data types, the doubly robust estimating function, the scalar root
solver for the exposure log odds ratio, fold planning and sandwich variance.

The estimating function for a single observation is

    h(Y, A; beta, r, m) = {Y exp(-beta A) - (1 - Y) exp(r)} (A - m)

and every estimator in the package ends by solving the (optionally weighted)
sample mean of ``h`` for ``beta``.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import NamedTuple, Sequence

import numpy as np
from scipy import optimize, stats

R_CLIP = 30.0
PROB_CLIP = 1e-6
EXP_CAP = 700.0
B_MAX = 50.0
MAX_ROOT_ITER = 200
DERIV_GUARD = 1e-12


class DrlogitError(Exception):
    """Base class for package errors."""


class ValidationError(DrlogitError, ValueError):
    """Input data or configuration violates a documented precondition."""


class NumericalError(DrlogitError, ArithmeticError):
    """A fit or solve failed numerically."""


class ConvergenceError(NumericalError):
    """An iterative procedure hit its iteration cap.

    The last iterate is kept on ``last_iterate`` for inspection.
    """

    def __init__(self, message, last_iterate=None):
        super().__init__(message)
        self.last_iterate = last_iterate


def _frozen(arr, dtype=float):
    # C order keeps BLAS reductions, and so results, independent of the input layout
    out = np.array(arr, dtype=dtype, copy=True, order="C")
    out.setflags(write=False)
    return out


def clamped_exp(u):
    """``exp`` with the argument clamped to ``[-EXP_CAP, EXP_CAP]``.

    Returns the values and the number of clamped entries.
    """
    u = np.asarray(u, dtype=float)
    hit = np.abs(u) > EXP_CAP
    return np.exp(np.clip(u, -EXP_CAP, EXP_CAP)), int(np.count_nonzero(hit))


def clip_prob(p, eps=PROB_CLIP):
    """Clamp probabilities to ``[eps, 1 - eps]``; also returns the clamp count."""
    p = np.asarray(p, dtype=float)
    hit = (p < eps) | (p > 1.0 - eps)
    return np.clip(p, eps, 1.0 - eps), int(np.count_nonzero(hit))


def logit(p):
    p = np.asarray(p, dtype=float)
    return np.log(p) - np.log1p(-p)


@dataclass(frozen=True)
class Dataset:
    """Binary outcome ``y``, scalar exposure ``a`` and covariates ``x`` (n x p)."""

    y: np.ndarray
    a: np.ndarray
    x: np.ndarray
    column_names: tuple[str, ...] | None = None

    def __post_init__(self):
        y = np.asarray(self.y, dtype=float).ravel()
        a = np.asarray(self.a, dtype=float).ravel()
        x = np.asarray(self.x, dtype=float)
        if x.ndim == 1:
            x = x[:, None]
        if x.ndim != 2:
            raise ValidationError("x must be a 2-d array")
        n = y.shape[0]
        if n < 2:
            raise ValidationError("need at least 2 observations")
        if a.shape[0] != n or x.shape[0] != n:
            raise ValidationError(
                f"length mismatch: y has {n}, a has {a.shape[0]}, x has {x.shape[0]} rows")
        for name, arr in (("y", y), ("a", a), ("x", x)):
            if not np.all(np.isfinite(arr)):
                raise ValidationError(f"non-finite values in {name}")
        if not np.all((y == 0.0) | (y == 1.0)):
            raise ValidationError("y must be binary 0/1")
        if y.min() == y.max():
            raise ValidationError("y must contain both 0 and 1")
        names = self.column_names
        if names is not None:
            names = tuple(str(c) for c in names)
            if len(names) != x.shape[1]:
                raise ValidationError("column_names length does not match x")
        object.__setattr__(self, "y", _frozen(y))
        object.__setattr__(self, "a", _frozen(a))
        object.__setattr__(self, "x", _frozen(x))
        object.__setattr__(self, "column_names", names)

    @property
    def n(self) -> int:
        return self.y.shape[0]

    @property
    def p(self) -> int:
        return self.x.shape[1]

    def subset(self, idx) -> "Dataset":
        idx = np.asarray(idx)
        return Dataset(self.y[idx], self.a[idx], self.x[idx], self.column_names)


@dataclass(frozen=True)
class NuisancePredictions:
    """Per-observation nuisance values plugged into the estimating equation.

    ``r_hat`` is clamped to ``[-R_CLIP, R_CLIP]`` on construction and the
    number of clamped entries is kept in ``r_clipped``. ``w_hat`` defaults to
    ones and ``fold_id`` to all-ones (no cross-fitting).
    """

    r_hat: np.ndarray
    m_hat: np.ndarray
    w_hat: np.ndarray | None = None
    fold_id: np.ndarray | None = None
    r_clipped: int = field(default=0, init=False)

    def __post_init__(self):
        r = np.asarray(self.r_hat, dtype=float).ravel()
        m = np.asarray(self.m_hat, dtype=float).ravel()
        n = r.shape[0]
        if m.shape[0] != n:
            raise ValidationError("r_hat and m_hat lengths differ")
        if not (np.all(np.isfinite(r)) and np.all(np.isfinite(m))):
            raise ValidationError("non-finite nuisance predictions")
        w = np.ones(n) if self.w_hat is None else np.asarray(self.w_hat, dtype=float).ravel()
        if w.shape[0] != n:
            raise ValidationError("w_hat length differs from r_hat")
        if not np.all(np.isfinite(w)) or np.any(w <= 0):
            raise ValidationError("w_hat must be strictly positive and finite")
        fold = (np.ones(n, dtype=int) if self.fold_id is None
                else np.asarray(self.fold_id, dtype=int).ravel())
        if fold.shape[0] != n:
            raise ValidationError("fold_id length differs from r_hat")
        clipped = int(np.count_nonzero(np.abs(r) > R_CLIP))
        object.__setattr__(self, "r_hat", _frozen(np.clip(r, -R_CLIP, R_CLIP)))
        object.__setattr__(self, "m_hat", _frozen(m))
        object.__setattr__(self, "w_hat", _frozen(w))
        object.__setattr__(self, "fold_id", _frozen(fold, dtype=int))
        object.__setattr__(self, "r_clipped", clipped)

    @property
    def n(self) -> int:
        return self.r_hat.shape[0]

    def with_weights(self, w_hat) -> "NuisancePredictions":
        return NuisancePredictions(self.r_hat, self.m_hat, w_hat, self.fold_id)


@dataclass(frozen=True)
class FoldPlan:
    """Balanced assignment of ``n`` observations to folds labelled ``1..k``."""

    k: int
    assignments: np.ndarray

    def __post_init__(self):
        labels = np.asarray(self.assignments, dtype=int).ravel()
        if self.k < 2:
            raise ValidationError("k must be at least 2")
        counts = np.bincount(labels, minlength=self.k + 1)[1:]
        if labels.min() < 1 or labels.max() > self.k or np.any(counts == 0):
            raise ValidationError("every fold label in 1..k must be used")
        if counts.max() - counts.min() > 1:
            raise ValidationError("fold sizes differ by more than one")
        object.__setattr__(self, "assignments", _frozen(labels, dtype=int))

    @property
    def n(self) -> int:
        return self.assignments.shape[0]

    def test_index(self, fold: int) -> np.ndarray:
        return np.flatnonzero(self.assignments == fold)

    def train_index(self, fold: int) -> np.ndarray:
        return np.flatnonzero(self.assignments != fold)

    def sizes(self) -> np.ndarray:
        return np.bincount(self.assignments, minlength=self.k + 1)[1:]


def make_folds(n: int, k: int, seed) -> FoldPlan:
    """Randomly split ``range(n)`` into ``k`` folds whose sizes differ by at most one."""
    if not 2 <= k <= n:
        raise ValidationError(f"need 2 <= k <= n, got k={k}, n={n}")
    perm = np.random.default_rng(seed).permutation(n)
    labels = np.empty(n, dtype=int)
    labels[perm] = np.arange(n) % k + 1
    return FoldPlan(k, labels)


METHODS = ("lowdim", "hd_sparse", "ml_crossfit")


@dataclass(frozen=True)
class EstimateReport:
    beta_hat: float
    se: float
    ci_lower: float
    ci_upper: float
    level: float
    method: str
    converged: bool
    diagnostics: dict = field(default_factory=dict)

    @classmethod
    def build(cls, beta_hat, se, level, method, converged, diagnostics=None):
        if not 0.0 < level < 1.0:
            raise ValidationError("level must lie in (0, 1)")
        if method not in METHODS:
            raise ValidationError(f"unknown method {method!r}")
        if not se > 0:
            raise NumericalError("standard error must be positive")
        z = stats.norm.ppf(0.5 + level / 2.0)
        return cls(float(beta_hat), float(se), float(beta_hat - z * se),
                   float(beta_hat + z * se), float(level), method, bool(converged),
                   {k: float(v) for k, v in (diagnostics or {}).items()})

    def covers(self, value: float) -> bool:
        return self.ci_lower <= value <= self.ci_upper

    def to_dict(self) -> dict:
        return {
            "beta_hat": self.beta_hat,
            "se": self.se,
            "ci": [self.ci_lower, self.ci_upper],
            "level": self.level,
            "method": self.method,
            "converged": self.converged,
            "diagnostics": dict(self.diagnostics),
        }


def eval_h(y, a, beta, r_val, m_val):
    """Evaluate ``h`` for one observation (also works elementwise on arrays)."""
    vals, _ = h_terms(y, a, beta, r_val, m_val)
    return float(vals) if np.ndim(vals) == 0 else vals


def h_terms(y, a, beta, r_val, m_val):
    """Vectorized ``h`` plus the number of saturated exponentials."""
    y = np.asarray(y, dtype=float)
    a = np.asarray(a, dtype=float)
    e_a, c1 = clamped_exp(-beta * a)
    e_r, c2 = clamped_exp(r_val)
    # y=1 rows never touch exp(r); y=0 rows never touch exp(-beta a)
    first = np.where(y == 1.0, e_a, 0.0)
    second = np.where(y == 0.0, e_r, 0.0)
    vals = (first - second) * (a - np.asarray(m_val, dtype=float))
    return vals, c1 + c2


class BetaSolution(NamedTuple):
    beta: float
    converged: bool
    iterations: int
    equation_value: float
    tolerance: float
    clamped: int


class _Equation:
    """Mean weighted score as a function of beta, with cached constant parts."""

    def __init__(self, data: Dataset, preds: NuisancePredictions):
        if preds.n != data.n:
            raise ValidationError("predictions and data have different lengths")
        y, a, w = data.y, data.a, preds.w_hat
        resid = a - preds.m_hat
        e_r, self.clamped = clamped_exp(preds.r_hat)
        self.a1 = a[y == 1.0]
        self.c1 = (w * resid)[y == 1.0]
        self.const = float(np.sum((w * e_r * resid)[y == 0.0]))
        self.n = data.n
        self.scale = 1.0 + float(np.mean(np.abs(w) * (np.abs(a) + np.abs(preds.m_hat))))

    def value(self, beta):
        e, c = clamped_exp(-beta * self.a1)
        self.clamped += c
        v = (np.dot(self.c1, e) - self.const) / self.n
        if not np.isfinite(v):
            raise NumericalError(f"estimating equation is not finite at beta={beta}")
        return float(v)

    def value_and_slope(self, beta):
        e, c = clamped_exp(-beta * self.a1)
        self.clamped += c
        ce = self.c1 * e
        v = (ce.sum() - self.const) / self.n
        d = -np.dot(ce, self.a1) / self.n
        if not (np.isfinite(v) and np.isfinite(d)):
            raise NumericalError(f"estimating equation is not finite at beta={beta}")
        return float(v), float(d)


def _find_bracket(eq: _Equation, b_max: float):
    """Scan 0, +-1, +-2, +-4, ... , +-b_max for the sign change nearest zero."""
    radii = [0.0]
    b = 1.0
    while b < b_max:
        radii.append(b)
        b *= 2.0
    radii.append(b_max)
    f0 = eq.value(0.0)
    scanned = [(0.0, f0)]
    if f0 == 0.0:
        return (0.0, 0.0, f0, f0), scanned
    prev_pos = prev_neg = (0.0, f0)
    for r in radii[1:]:
        fp = eq.value(r)
        fn = eq.value(-r)
        scanned += [(r, fp), (-r, fn)]
        if np.sign(fp) != np.sign(prev_pos[1]):
            return (prev_pos[0], r, prev_pos[1], fp), scanned
        if np.sign(fn) != np.sign(prev_neg[1]):
            return (-r, prev_neg[0], fn, prev_neg[1]), scanned
        prev_pos, prev_neg = (r, fp), (-r, fn)
    return None, scanned


def solve_beta(data: Dataset, preds: NuisancePredictions, *, tol=None,
               b_max: float = B_MAX, max_iter: int = MAX_ROOT_ITER) -> BetaSolution:
    """Solve ``mean(w * h(beta)) = 0`` for ``beta``.

    A sign-changing bracket is grown geometrically from zero up to
    ``[-b_max, b_max]``; inside it, Newton steps are accepted only while they
    stay in the bracket and shrink the residual fast enough, otherwise the
    bracket is bisected.

    Returns
    -------
    BetaSolution
        ``converged`` is False when no sign change exists in the search range;
        ``beta`` is then the minimizer of ``|equation|`` over that range.
    """
    eq = _Equation(data, preds)
    if tol is None:
        tol = 1e-10 * eq.scale
    bracket, scanned = _find_bracket(eq, b_max)
    if bracket is None:
        grid = np.array(sorted(scanned))
        j = int(np.argmin(np.abs(grid[:, 1])))
        lo = grid[max(j - 1, 0), 0]
        hi = grid[min(j + 1, len(grid) - 1), 0]
        res = optimize.minimize_scalar(lambda b: abs(eq.value(b)), bounds=(lo, hi),
                                       method="bounded", options={"xatol": 1e-12})
        beta = float(res.x) if abs(eq.value(res.x)) < abs(grid[j, 1]) else float(grid[j, 0])
        return BetaSolution(beta, False, int(res.nfev), eq.value(beta), tol, eq.clamped)

    lo, hi, flo, fhi = bracket
    if lo == hi:
        return BetaSolution(lo, True, 0, flo, tol, eq.clamped)
    # orient so that f(lo) < 0 < f(hi)
    if flo > 0:
        lo, hi = hi, lo
    x = 0.5 * (lo + hi)
    dx_old = dx = abs(hi - lo)
    f, df = eq.value_and_slope(x)
    for it in range(1, max_iter + 1):
        if abs(f) <= tol:
            return BetaSolution(x, True, it, f, tol, eq.clamped)
        newton_ok = df != 0.0 and (((x - hi) * df - f) * ((x - lo) * df - f) < 0.0)
        if not newton_ok or abs(2.0 * f) > abs(dx_old * df):
            dx_old = dx
            dx = 0.5 * (hi - lo)
            x = lo + dx
        else:
            dx_old = dx
            dx = f / df
            x = x - dx
        f, df = eq.value_and_slope(x)
        if f < 0:
            lo = x
        else:
            hi = x
        if abs(hi - lo) <= 4.0 * np.finfo(float).eps * max(1.0, abs(x)):
            # bracket collapsed to float resolution; the root is located
            return BetaSolution(x, True, it, f, tol, eq.clamped)
    return BetaSolution(x, abs(f) <= tol, max_iter, f, tol, eq.clamped)


def score_derivative(data: Dataset, preds: NuisancePredictions, beta: float) -> np.ndarray:
    """Per-observation derivative of ``h`` in beta: ``-Y A exp(-beta A) (A - m)``."""
    e, _ = clamped_exp(-beta * data.a)
    return -data.y * data.a * e * (data.a - preds.m_hat)


def sandwich_se(data: Dataset, preds: NuisancePredictions, beta_hat: float) -> float:
    """Influence-function standard error of the root of the estimating equation.

    ``V = mean((w h)^2) / mean(w dh/dbeta)^2`` and the returned value is
    ``sqrt(V / n)``. Nuisance estimates are treated as fixed.
    """
    h, _ = h_terms(data.y, data.a, beta_hat, preds.r_hat, preds.m_hat)
    w = preds.w_hat
    den = float(np.mean(w * score_derivative(data, preds, beta_hat)))
    if abs(den) < DERIV_GUARD:
        raise NumericalError("degenerate score derivative")
    v = float(np.mean((w * h) ** 2)) / den ** 2
    return float(np.sqrt(v / data.n))


def estimate_from_predictions(data: Dataset, preds: NuisancePredictions, method: str,
                              level: float = 0.95, diagnostics=None) -> EstimateReport:
    """Solve for beta, attach the sandwich standard error and build the report."""
    sol = solve_beta(data, preds)
    se = sandwich_se(data, preds, sol.beta)
    diag = {
        "root_iterations": sol.iterations,
        "root_residual": sol.equation_value,
        "exp_clamped": sol.clamped,
        "r_clipped": preds.r_clipped,
    }
    diag.update(diagnostics or {})
    return EstimateReport.build(sol.beta, se, level, method, sol.converged, diag)


def derive_seed(*parts: int | str) -> int:
    """Deterministic 63-bit seed from integers and purpose tags."""
    words: list[int] = []
    for part in parts:
        if isinstance(part, str):
            words.extend(part.encode("utf-8"))
        else:
            v = int(part)
            words.extend([v & 0xFFFFFFFF, (v >> 32) & 0xFFFFFFFF, int(v < 0)])
    state = np.random.SeedSequence(words).generate_state(1, dtype=np.uint64)
    return int(state[0]) & ((1 << 63) - 1)


def as_index(idx: Sequence[int] | np.ndarray, n: int) -> np.ndarray:
    """Normalize an index set (ints or boolean mask) to sorted unique ints."""
    idx = np.asarray(idx)
    if idx.dtype == bool:
        if idx.shape[0] != n:
            raise ValidationError("boolean mask has wrong length")
        return np.flatnonzero(idx)
    idx = np.unique(idx.astype(int))
    if idx.size and (idx[0] < 0 or idx[-1] >= n):
        raise ValidationError("index out of range")
    return idx

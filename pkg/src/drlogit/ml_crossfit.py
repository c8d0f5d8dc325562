"""Cross-fitted doubly robust estimation with blackbox nuisance learners.

For each outer fold ``k`` the nuisances are trained on the other folds:

* ``m(x) = E[A | X=x, Y=0]`` by the learner on the ``Y = 0`` training rows;
* the full model ``M(a, x) = P(Y=1 | A=a, X=x)`` and ``a(x) = E[A | X=x]`` on
  inner folds of the training rows, giving out-of-inner-fold values
  ``W_i = logit M(A_i, X_i)`` and exposure residuals ``A_i - a(X_i)``;
* a pilot slope ``beta_breve`` from least squares of ``W`` on the residuals;
* ``r`` either as ``t(x) - beta_breve * a(x)`` with ``t(x) = E[W | X=x]``
  ("t_refit") or from the ratio form of the conditional moment
  ``E[(1 - Y) exp(r(X)) - Y exp(-beta A) | X] = 0`` ("ratio_refit").

The held-out rows of fold ``k`` get these predictions and the pooled
estimating equation is solved once.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .core import (PROB_CLIP, R_CLIP, DrlogitError, EstimateReport, FoldPlan, NumericalError,
                   NuisancePredictions, ValidationError, clamped_exp, derive_seed,
                   estimate_from_predictions, logit, make_folds, solve_beta)
from .efficiency import (PhiSpec, build_weights, default_quadrature, residual_sigma,
                         weights_from_values)
from .learners import Learner, Predictor

R_VARIANTS = ("t_refit", "ratio_refit")
NUISANCES = ("m", "full", "a", "r")
# floor for the numerator of the ratio refit before the log
RATIO_FLOOR = 1e-12


@dataclass(frozen=True)
class RefitConfig:
    k_outer: int = 5
    k_inner: int = 5
    r_variant: str = "t_refit"
    prob_clip: float = PROB_CLIP
    seed: int = 0

    def __post_init__(self):
        if self.k_outer < 2 or self.k_inner < 2:
            raise ValidationError("k_outer and k_inner must be at least 2")
        if self.r_variant not in R_VARIANTS:
            raise ValidationError(f"r_variant must be one of {R_VARIANTS}")
        if not 0.0 < self.prob_clip < 0.1:
            raise ValidationError("prob_clip must lie in (0, 0.1)")


def _learners(learner) -> dict:
    """One learner for every nuisance, or a mapping keyed by ``NUISANCES``."""
    if isinstance(learner, Learner):
        return dict.fromkeys(NUISANCES, learner)
    if isinstance(learner, dict):
        missing = set(NUISANCES) - set(learner)
        extra = set(learner) - set(NUISANCES)
        if missing or extra:
            raise ValidationError(f"learner mapping needs exactly the keys {NUISANCES}")
        return dict(learner)
    raise ValidationError("learner must be a Learner or a mapping of Learners")


def _in_fold(where: str, fn, *args, **kwargs):
    """Call ``fn`` and prefix any failure with its fold context."""
    try:
        return fn(*args, **kwargs)
    except DrlogitError as exc:
        raise type(exc)(f"{where}: {exc}") from exc
    except (ValueError, ArithmeticError, np.linalg.LinAlgError) as exc:
        raise NumericalError(f"{where}: {exc}") from exc


def _full_covariates(data):
    return np.column_stack([data.a, data.x])


def fit_m_hat(data, learner: Learner, fold_plan: FoldPlan | None, seed: int = 0):
    """Per-fold learners of ``E[A | X, Y=0]`` and the assembled out-of-fold values.

    ``fold_plan=None`` trains once on all rows and predicts in-sample.
    """
    n = data.n
    folds = [(np.arange(n), np.arange(n))] if fold_plan is None else [
        (fold_plan.train_index(k), fold_plan.test_index(k)) for k in range(1, fold_plan.k + 1)]
    preds, m_hat = [], np.empty(n)
    for k, (tr, te) in enumerate(folds, start=1):
        pred = _fit_m_fold(data, learner, tr, seed, k)
        preds.append(pred)
        m_hat[te] = pred(data.x[te])
    return preds, m_hat


def _fit_m_fold(data, learner, train, seed, fold):
    rows = train[data.y[train] == 0.0]
    if rows.size == 0:
        raise ValidationError(f"outer fold {fold}: no Y=0 rows to fit m")
    return _in_fold(f"outer fold {fold}, m", learner.fit, data.a, data.x, rows,
                    seed=derive_seed(seed, fold, "m"))


@dataclass(frozen=True)
class InnerFits:
    """Inner-fold fits on the training rows ``index`` of one outer fold.

    ``w`` and ``a_resid`` are aligned with ``index`` and use, for each row,
    the fits that did not see it.
    """

    index: np.ndarray
    full: tuple
    a: tuple
    w: np.ndarray
    a_resid: np.ndarray
    clamped: int


def fit_full_and_a(data, learner_full: Learner, learner_a: Learner, train_idx, inner_plan,
                   prob_clip: float = PROB_CLIP, seed: int = 0, outer: int = 1) -> InnerFits:
    """Inner cross-fit of ``M(A, X)`` and ``a(X)`` over ``inner_plan`` (indexes ``train_idx``)."""
    train_idx = np.asarray(train_idx, dtype=int)
    if inner_plan.n != train_idx.size:
        raise ValidationError("inner fold plan does not match the training rows")
    zfull = _full_covariates(data)
    w = np.empty(train_idx.size)
    resid = np.empty(train_idx.size)
    fulls, avals = [], []
    clamped = 0
    for j in range(1, inner_plan.k + 1):
        fit_rows = train_idx[inner_plan.train_index(j)]
        pos = inner_plan.test_index(j)
        rows = train_idx[pos]
        where = f"outer fold {outer}, inner fold {j}"
        full = _in_fold(where + ", full model", learner_full.fit, data.y, zfull, fit_rows,
                        seed=derive_seed(seed, outer, j, "full"))
        a_pred = _in_fold(where + ", a", learner_a.fit, data.a, data.x, fit_rows,
                          seed=derive_seed(seed, outer, j, "a"))
        prob = full(zfull[rows])
        clamped += int(np.count_nonzero((prob < prob_clip) | (prob > 1.0 - prob_clip)))
        w[pos] = logit(np.clip(prob, prob_clip, 1.0 - prob_clip))
        resid[pos] = data.a[rows] - a_pred(data.x[rows])
        fulls.append(full)
        avals.append(a_pred)
    return InnerFits(train_idx, tuple(fulls), tuple(avals), w, resid, clamped)


def estimate_beta_init(logit_m, a_resid) -> float:
    """Least squares slope through the origin of ``logit M`` on the exposure residuals."""
    logit_m = np.asarray(logit_m, dtype=float)
    a_resid = np.asarray(a_resid, dtype=float)
    ss = float(np.dot(a_resid, a_resid))
    if not ss > 0:
        raise NumericalError("no exposure variation")
    return float(np.dot(logit_m, a_resid)) / ss


class RefitRPredictor(Predictor):
    """``t(x) - beta_breve * mean_j a_j(x)``, clipped to ``[-R_CLIP, R_CLIP]``."""

    def __init__(self, t_pred, a_preds, breve_beta):
        self.t_pred = t_pred
        self.a_preds = tuple(a_preds)
        self.breve_beta = float(breve_beta)
        self._seal()

    def a_average(self, x):
        return np.mean([a(x) for a in self.a_preds], axis=0)

    def _predict(self, x):
        out = self.t_pred(x)
        if self.breve_beta != 0.0:
            out = out - self.breve_beta * self.a_average(x)
        return np.clip(out, -R_CLIP, R_CLIP)


class RatioRPredictor(Predictor):
    """``log(max(num, 1e-12) / clip(den))`` clipped to ``[-R_CLIP, R_CLIP]``."""

    def __init__(self, num_pred, den_pred, prob_clip):
        self.num_pred = num_pred
        self.den_pred = den_pred
        self.prob_clip = float(prob_clip)
        self._seal()

    def _predict(self, x):
        num = np.maximum(self.num_pred(x), RATIO_FLOOR)
        den = np.clip(self.den_pred(x), self.prob_clip, 1.0 - self.prob_clip)
        return np.clip(np.log(num / den), -R_CLIP, R_CLIP)


def refit_r_t(data, learner: Learner, train_idx, w, breve_beta: float, a_preds,
              seed: int = 0, outer: int = 1) -> RefitRPredictor:
    """Learn ``t(x) = E[W | X=x]`` on ``train_idx`` (``w`` aligned with it) and subtract
    ``beta_breve`` times the average of the inner ``a`` fits."""
    train_idx = np.asarray(train_idx, dtype=int)
    w = np.asarray(w, dtype=float)
    if w.shape[0] != train_idx.size:
        raise ValidationError("W must be aligned with the training rows")
    t_pred = _in_fold(f"outer fold {outer}, t", learner.fit, w, data.x[train_idx],
                      seed=derive_seed(seed, outer, "t"))
    return RefitRPredictor(t_pred, a_preds, breve_beta)


def refit_r_ratio(data, learner: Learner, train_idx, breve_beta: float,
                  prob_clip: float = PROB_CLIP, seed: int = 0, outer: int = 1) -> RatioRPredictor:
    """``exp(r(x)) = E[Y exp(-beta_breve A) | X=x] / P(Y=0 | X=x)``, both learned on ``train_idx``."""
    train_idx = np.asarray(train_idx, dtype=int)
    e, _ = clamped_exp(-breve_beta * data.a)
    where = f"outer fold {outer}"
    num = _in_fold(where + ", ratio numerator", learner.fit, data.y * e, data.x, train_idx,
                   seed=derive_seed(seed, outer, "ratio_num"))
    den = _in_fold(where + ", ratio denominator", learner.fit, 1.0 - data.y, data.x, train_idx,
                   seed=derive_seed(seed, outer, "ratio_den"))
    if np.all(den(data.x[train_idx]) < prob_clip):
        raise NumericalError(f"{where}: degenerate Y=0 frequency model")
    return RatioRPredictor(num, den, prob_clip)


@dataclass(frozen=True)
class FoldFits:
    """Fitted nuisance predictors for one outer fold."""

    fold: int
    train: np.ndarray
    test: np.ndarray
    m: Predictor
    r: Predictor
    breve_beta: float
    clamped: int


def fit_outer_fold(data, learners: dict, cfg: RefitConfig, fold: int, train, test) -> FoldFits:
    """All nuisance fits for one outer fold (training rows ``train``)."""
    train = np.asarray(train, dtype=int)
    m_pred = _fit_m_fold(data, learners["m"], train, cfg.seed, fold)
    if train.size < cfg.k_inner:
        raise ValidationError(f"outer fold {fold}: fewer training rows than inner folds")
    inner_plan = make_folds(train.size, cfg.k_inner, derive_seed(cfg.seed, fold, "inner"))
    inner = fit_full_and_a(data, learners["full"], learners["a"], train, inner_plan,
                           cfg.prob_clip, cfg.seed, fold)
    breve = _in_fold(f"outer fold {fold}", estimate_beta_init, inner.w, inner.a_resid)
    if cfg.r_variant == "t_refit":
        r_pred = refit_r_t(data, learners["r"], train, inner.w, breve, inner.a, cfg.seed, fold)
    else:
        r_pred = refit_r_ratio(data, learners["r"], train, breve, cfg.prob_clip, cfg.seed, fold)
    return FoldFits(fold, train, np.asarray(test, dtype=int), m_pred, r_pred, breve,
                    inner.clamped)


def _outer_folds(data, cfg: RefitConfig, single_fold: bool):
    if single_fold:
        idx = np.arange(data.n)
        return None, [(1, idx, idx)]
    plan = make_folds(data.n, cfg.k_outer, derive_seed(cfg.seed, "outer"))
    return plan, [(k, plan.train_index(k), plan.test_index(k)) for k in range(1, cfg.k_outer + 1)]


def crossfit_nuisances(data, learner, cfg: RefitConfig | None = None, single_fold: bool = False,
                       n_jobs: int = 1):
    """Fit every outer fold; returns ``(fold_plan, [FoldFits])``.

    ``single_fold=True`` trains on all rows and predicts in-sample (no
    cross-fitting); it exists to compare against the uncross-fitted equation.
    """
    cfg = cfg or RefitConfig()
    learners = _learners(learner)
    plan, folds = _outer_folds(data, cfg, single_fold)
    if n_jobs == 1 or len(folds) == 1:
        fits = [fit_outer_fold(data, learners, cfg, k, tr, te) for k, tr, te in folds]
    else:
        from joblib import Parallel, delayed

        fits = Parallel(n_jobs=n_jobs)(
            delayed(fit_outer_fold)(data, learners, cfg, k, tr, te) for k, tr, te in folds)
    return plan, fits


def assemble_predictions(data, fits, weights=None) -> NuisancePredictions:
    r_hat, m_hat = np.empty(data.n), np.empty(data.n)
    fold_id = np.empty(data.n, dtype=int)
    for f in fits:
        xk = data.x[f.test]
        r_hat[f.test] = f.r(xk)
        m_hat[f.test] = f.m(xk)
        fold_id[f.test] = f.fold
    return NuisancePredictions(r_hat, m_hat, weights, fold_id)


def _phi_weights(data, plan, fits, preds, phi: str, nodes: int = 20):
    """Cross-fitted ``phi(X) exp(-r(X))``; ``phi="opt"`` uses a ``phi="simp"`` pilot."""
    if phi == "none":
        return None, {}
    diag = {}
    quad = default_quadrature(data.a)
    spec = PhiSpec("simp")
    if phi == "opt":
        simp_w = weights_from_values(preds.r_hat, preds.m_hat, spec)
        pilot = solve_beta(data, preds.with_weights(simp_w))
        if not pilot.converged:
            raise NumericalError("pilot solve for phi=opt did not converge")
        sigma = residual_sigma(data, preds.m_hat) if quad == "gauss_hermite" else None
        spec = PhiSpec("opt", quadrature=quad, nodes=nodes, beta_pilot=pilot.beta, sigma=sigma)
        diag["beta_pilot"] = pilot.beta
    if plan is None:
        return weights_from_values(preds.r_hat, preds.m_hat, spec), diag
    w = build_weights(data, plan, [f.r for f in fits], [f.m for f in fits], spec)
    return w, diag


def estimate_ml(data, learner, cfg: RefitConfig | None = None, phi: str = "none",
                level: float = 0.95, single_fold: bool = False, n_jobs: int = 1,
                nodes: int = 20) -> EstimateReport:
    """Cross-fitted doubly robust estimate with blackbox learners.

    Parameters
    ----------
    data : Dataset
    learner : Learner or dict
        One learner for all nuisances, or a mapping with keys ``"m"``,
        ``"full"`` (``P(Y=1 | A, X)``), ``"a"`` (``E[A | X]``) and ``"r"``
        (the refit learner).
    cfg : RefitConfig
    phi : {"none", "simp", "opt"}
        Efficiency weights, cross-fitted with the same folds.
    single_fold : bool
        Test-only: no sample splitting at the outer level.
    """
    if phi not in ("none", "simp", "opt"):
        raise ValidationError(f"unknown phi {phi!r}")
    cfg = cfg or RefitConfig()
    plan, fits = crossfit_nuisances(data, learner, cfg, single_fold, n_jobs)
    preds = assemble_predictions(data, fits)
    w, diag = _phi_weights(data, plan, fits, preds, phi, nodes)
    if w is not None:
        preds = preds.with_weights(w)
    breves = np.array([f.breve_beta for f in fits])
    diag.update({
        "beta_breve_mean": float(breves.mean()),
        "beta_breve_min": float(breves.min()),
        "beta_breve_max": float(breves.max()),
        "prob_clamped": sum(f.clamped for f in fits),
        "k_outer": 1 if single_fold else cfg.k_outer,
        "k_inner": cfg.k_inner,
    })
    return estimate_from_predictions(data, preds, "ml_crossfit", level, diag)

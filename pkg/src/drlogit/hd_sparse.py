"""Sparse high-dimensional nuisance fits with explicit feasibility checks.

The pipeline is

1. an L1-penalized logistic fit of ``Y`` on ``(A, X)`` giving ``gamma_tilde``;
2. ``alpha_hat`` from the penalized moment problem
   ``min n^-1 sum c_i [G(X_i'a) - A_i X_i'a] + lam_alpha |a|_1`` with
   ``c_i = w_i (1 - Y_i) exp(X_i'gamma_tilde)``, whose optimality conditions give
   ``|n^-1 sum c_i (A_i - g(X_i'alpha_hat)) X_i|_inf <= lam_alpha``;
3. ``(beta_hat, gamma_hat)`` by alternating a penalized ``gamma`` step, whose
   optimality conditions bound
   ``|n^-1 sum w_i g'(X_i'alpha_hat) {(1-Y_i) e^{X_i'gamma} - Y_i e^{-beta A_i}} X_i|_inf``
   by ``lam_gamma``, with a scalar root solve for ``beta``.

With ``"auto"`` penalties, ``lam = c * s * sqrt(2 log p / n)`` where ``s`` is
the root mean square of the moment's per-observation terms at a pilot fit,
so the penalty tracks the noise level of the moment it bounds and rescaling
the weights leaves the fit unchanged.

Covariates are centred and scaled internally. The penalty on a standardized
coefficient is ``lam / sd_j``, which is exactly ``lam |coef_j|`` on the original
scale, so the max-norm conditions hold for the raw covariates. Intercepts are
unpenalized.
"""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
from scipy.special import expit

from .core import (ConvergenceError, Dataset, EstimateReport, NumericalError,
                   NuisancePredictions, ValidationError, clamped_exp,
                   estimate_from_predictions, make_folds, solve_beta)
from .efficiency import PhiSpec, default_quadrature, residual_sigma, weights_from_values
from .links import EXPONENTIAL, LOGISTIC, get_link
from .penalized import Standardizer, fit_l1

FEASIBILITY_RTOL = 1e-6
FEASIBILITY_ATOL = 1e-6


@dataclass(frozen=True)
class SparseCoef:
    """Sparse coefficient vector of dimension ``dim`` plus an unpenalized intercept."""

    dim: int
    entries: dict
    intercept: float = 0.0

    def __post_init__(self):
        clean = {}
        for j, v in self.entries.items():
            j = int(j)
            if not 0 <= j < self.dim:
                raise ValidationError(f"index {j} outside [0, {self.dim})")
            if not math.isfinite(v):
                raise ValidationError("coefficients must be finite")
            if v != 0.0:
                clean[j] = float(v)
        object.__setattr__(self, "entries", dict(sorted(clean.items())))

    @classmethod
    def from_dense(cls, coef, intercept=0.0):
        coef = np.asarray(coef, dtype=float)
        nz = np.flatnonzero(coef)
        return cls(coef.shape[0], {int(j): float(coef[j]) for j in nz}, float(intercept))

    @property
    def s_hat(self) -> int:
        return len(self.entries)

    @property
    def support(self) -> np.ndarray:
        return np.fromiter(self.entries.keys(), dtype=int, count=len(self.entries))

    def to_dense(self) -> np.ndarray:
        out = np.zeros(self.dim)
        for j, v in self.entries.items():
            out[j] = v
        return out

    def linear_predictor(self, x) -> np.ndarray:
        x = np.asarray(x, dtype=float)
        if x.ndim == 1:
            x = x[None, :]
        idx = self.support
        vals = np.fromiter(self.entries.values(), dtype=float, count=idx.size)
        return self.intercept + x[:, idx] @ vals

    def l1_distance(self, other: "SparseCoef") -> float:
        return float(np.sum(np.abs(self.to_dense() - other.to_dense()))
                     + abs(self.intercept - other.intercept))


def lambda_rate(n: int, p: int, constant: float = 1.0) -> float:
    """``constant * sqrt(log p / n)`` (``log 2`` floor for tiny ``p``)."""
    return float(constant * math.sqrt(max(math.log(p), math.log(2.0)) / n))


def score_scale(resid, x) -> float:
    """Root mean square over covariates of ``sqrt(mean_i resid_i^2 (x_ij - xbar_j)^2)``."""
    x = np.asarray(x, dtype=float)
    xc2 = (x - x.mean(axis=0)) ** 2
    per_col = (np.asarray(resid, dtype=float) ** 2) @ xc2 / x.shape[0]
    return float(math.sqrt(np.mean(per_col)))


def auto_lambda(n: int, p: int, scale: float, constant: float = 1.0) -> float:
    lam = math.sqrt(2.0) * lambda_rate(n, p, constant) * scale
    if not lam > 0:
        raise NumericalError("automatic penalty is zero: the pilot moment has no variation")
    return lam


@dataclass(frozen=True)
class HdConfig:
    lambda_alpha: float | str = "auto"
    lambda_gamma: float | str = "auto"
    lambda_init: float | str = "auto"
    auto_constant: float = 0.8
    max_outer: int = 50
    tol_outer: float = 1e-7
    refit: bool = True
    lambda_iterations: int = 1

    def __post_init__(self):
        for name in ("lambda_alpha", "lambda_gamma", "lambda_init"):
            v = getattr(self, name)
            if isinstance(v, str):
                if v != "auto":
                    raise ValidationError(f"{name} must be positive or 'auto'")
            elif not v > 0:
                raise ValidationError(f"{name} must be positive")
        if self.lambda_iterations < 1:
            raise ValidationError("lambda_iterations must be at least 1")
        if not self.auto_constant > 0 or self.max_outer < 1 or not self.tol_outer > 0:
            raise ValidationError("auto_constant, max_outer and tol_outer must be positive")



class _Design:
    """Standardized covariates with an intercept column and optional exposure column."""

    def __init__(self, data: Dataset, with_exposure: bool):
        self.std = Standardizer.fit(data.x)
        cols = [np.ones(data.n)]
        self.with_exposure = with_exposure
        if with_exposure:
            self.a_std = Standardizer.fit(data.a[:, None])
            cols.append(self.a_std.transform(data.a[:, None])[:, 0])
        self.z = np.column_stack(cols + [self.std.transform(data.x)])
        self.offset = len(cols)

    def penalties(self, lam: float) -> np.ndarray:
        out = np.zeros(self.z.shape[1])
        out[self.offset:] = lam / self.std.scale
        return out

    def fit(self, link, c, t, lam, init=None, support=None, max_iter=5000):
        """``fit_l1`` on the design; covariates in ``support`` are left unpenalized."""
        pen = self.penalties(lam)
        if support is not None:
            pen[self.offset + np.asarray(support, dtype=int)] = 0.0
        return fit_l1(self.z, link, c, t, pen, init=init, max_iter=max_iter).coef

    def from_original(self, coef: SparseCoef, beta=None) -> np.ndarray:
        """Standardized parameter vector matching original-scale coefficients."""
        dense = coef.to_dense()
        theta = np.zeros(self.z.shape[1])
        theta[self.offset:] = dense * self.std.scale
        icpt = coef.intercept + float(dense @ self.std.mean)
        if self.with_exposure:
            b = 0.0 if beta is None else beta
            theta[1] = b * self.a_std.scale[0]
            icpt += b * self.a_std.mean[0]
        theta[0] = icpt
        return theta

    def to_original(self, theta):
        """Returns (beta or None, SparseCoef) on the original scale."""
        icpt, coef = self.std.to_original(theta[0], theta[self.offset:])
        beta = None
        if self.with_exposure:
            beta = theta[1] / self.a_std.scale[0]
            icpt -= beta * self.a_std.mean[0]
        return beta, SparseCoef.from_dense(coef, icpt)


def _check_n(data: Dataset):
    if data.n < 10:
        raise ValidationError("need at least 10 observations")


def fit_gamma_initial(data: Dataset, lambda_init="auto", auto_constant: float = 1.0,
                      max_iter: int = 5000, refit: bool = False, lambda_iterations: int = 1):
    """L1-penalized logistic regression of ``Y`` on ``(A, X)`` with ``A`` unpenalized.

    With ``refit`` a second pass leaves the selected covariates unpenalized
    (kept only if it converges). With ``"auto"``, ``lambda_iterations > 1``
    re-estimates the noise scale at the previous fit before refitting.

    Returns
    -------
    beta_tilde : float
    gamma_tilde : SparseCoef
    """
    _check_n(data)
    auto = lambda_init == "auto"
    lam = lambda_init_value(data, auto_constant) if auto else float(lambda_init)
    design = _Design(data, with_exposure=True)
    ones = np.ones(data.n)
    fit = fit_l1(design.z, LOGISTIC, ones, data.y, design.penalties(lam), tol=1e-9,
                 max_iter=max_iter)
    for _ in range(lambda_iterations - 1 if auto else 0):
        lam = lambda_init_value(data, auto_constant, design.z @ fit.coef)
        fit = fit_l1(design.z, LOGISTIC, ones, data.y, design.penalties(lam), init=fit.coef,
                     tol=1e-9, max_iter=max_iter)
    pen = design.penalties(lam)
    if refit and np.any(fit.coef[design.offset:]):
        pen2 = pen.copy()
        pen2[fit.coef != 0.0] = 0.0
        try:
            fit = fit_l1(design.z, LOGISTIC, ones, data.y, pen2, init=fit.coef, tol=1e-9,
                         max_iter=max_iter)
        except NumericalError:
            pass
    beta, gamma = design.to_original(fit.coef)
    return float(beta), gamma


def lambda_init_value(data: Dataset, constant: float = 1.0, eta=None) -> float:
    """Automatic penalty for the initial logistic fit.

    The pilot is the logistic linear predictor ``eta``, or the intercept-only
    model when it is omitted.
    """
    fitted = data.y.mean() if eta is None else expit(eta)
    return auto_lambda(data.n, data.p, score_scale(data.y - fitted, data.x), constant)


def naive_plugin_beta(data: Dataset, lambda_init="auto", auto_constant: float = 1.0) -> float:
    """Exposure coefficient of the L1-penalized logistic fit, used as a naive comparator."""
    return fit_gamma_initial(data, lambda_init, auto_constant)[0]


def _weights(data, weights):
    if weights is None:
        return np.ones(data.n)
    w = np.asarray(weights, dtype=float)
    if w.shape != (data.n,) or not np.all(np.isfinite(w)) or np.any(w <= 0):
        raise ValidationError("weights must be a positive finite vector of length n")
    return w


def alpha_moment(data: Dataset, gamma_tilde: SparseCoef, alpha: SparseCoef, link,
                 weights=None) -> np.ndarray:
    """``n^-1 sum w (1-Y) e^{X'gamma_tilde} (A - g(X'alpha)) X`` over the covariates."""
    link = get_link(link)
    w = _weights(data, weights)
    e_r, _ = clamped_exp(gamma_tilde.linear_predictor(data.x))
    c = w * (1.0 - data.y) * e_r
    resid = c * (data.a - link.g(alpha.linear_predictor(data.x)))
    return data.x.T @ resid / data.n


def gamma_moment(data: Dataset, alpha: SparseCoef, gamma: SparseCoef, beta: float, link,
                 weights=None) -> np.ndarray:
    """``n^-1 sum w g'(X'alpha) {(1-Y) e^{X'gamma} - Y e^{-beta A}} X`` over the covariates."""
    link = get_link(link)
    w = _weights(data, weights)
    gp = link.deriv(alpha.linear_predictor(data.x))
    e_r, _ = clamped_exp(gamma.linear_predictor(data.x))
    e_a, _ = clamped_exp(-beta * data.a)
    resid = w * gp * ((1.0 - data.y) * e_r - data.y * e_a)
    return data.x.T @ resid / data.n


def _feasible(moment, lam, atol=0.0):
    return float(np.max(np.abs(moment), initial=0.0)) <= lam * (1.0 + FEASIBILITY_RTOL) + atol


def lambda_alpha_value(data: Dataset, gamma_tilde: SparseCoef, weights=None,
                       constant: float = 1.0, alpha: SparseCoef | None = None,
                       link="identity") -> float:
    """Automatic ``lambda_alpha``; the pilot is ``alpha`` or the weighted mean of ``A``."""
    e_r, _ = clamped_exp(gamma_tilde.linear_predictor(data.x))
    c = _weights(data, weights) * (1.0 - data.y) * e_r
    if alpha is None:
        fitted = float(np.sum(c * data.a) / np.sum(c))
    else:
        fitted = get_link(link).g(alpha.linear_predictor(data.x))
    return auto_lambda(data.n, data.p, score_scale(c * (data.a - fitted), data.x), constant)


def lambda_gamma_value(data: Dataset, alpha_hat: SparseCoef, link, beta: float,
                       gamma: SparseCoef | None = None, weights=None,
                       constant: float = 1.0) -> float:
    """Automatic ``lambda_gamma`` at a pilot ``(beta, gamma)``, intercept re-balanced."""
    link = get_link(link)
    base = _weights(data, weights) * link.deriv(alpha_hat.linear_predictor(data.x))
    r = np.zeros(data.n) if gamma is None else gamma.linear_predictor(data.x)
    e_r, _ = clamped_exp(r)
    e_a, _ = clamped_exp(-beta * data.a)
    ctrl = base * (1.0 - data.y) * e_r
    case = base * data.y * e_a
    ctrl *= np.sum(case) / np.sum(ctrl)
    return auto_lambda(data.n, data.p, score_scale(ctrl - case, data.x), constant)


def fit_alpha_dantzig(data: Dataset, gamma_tilde: SparseCoef, link="identity",
                      lambda_alpha="auto", weights=None, auto_constant: float = 1.0,
                      design: _Design | None = None, max_iter: int = 5000,
                      refit_support=None) -> SparseCoef:
    """Sparse ``alpha_hat`` whose weighted moment vector has max-norm at most ``lambda_alpha``.

    With ``refit_support`` those covariates are left unpenalized while the rest
    keep ``lambda_alpha``: their moments become zero and the max-norm bound still
    holds for every covariate.
    """
    _check_n(data)
    link = get_link(link)
    w = _weights(data, weights)
    design = design or _Design(data, with_exposure=False)
    e_r, _ = clamped_exp(gamma_tilde.linear_predictor(data.x))
    c = w * (1.0 - data.y) * e_r
    if not np.any(c > 0):
        raise ValidationError("no control observations")
    lam = (lambda_alpha_value(data, gamma_tilde, weights, auto_constant)
           if lambda_alpha == "auto" else float(lambda_alpha))
    init = None
    if link.kind == "identity":
        init = np.zeros(design.z.shape[1])
        init[0] = float(np.sum(c * data.a) / np.sum(c))
    theta = design.fit(link, c, c * data.a, lam, init=init, support=refit_support,
                       max_iter=max_iter)
    _, alpha = design.to_original(theta)
    mom = alpha_moment(data, gamma_tilde, alpha, link, w)
    if not _feasible(mom, lam):
        raise NumericalError(f"KKT violation: alpha moment {np.max(np.abs(mom)):.3g} > {lam:.3g}")
    return alpha


@dataclass(frozen=True)
class JointFit:
    beta: float
    gamma: SparseCoef
    outer_iterations: int
    gamma_max_moment: float
    equation_value: float


def fit_gamma_beta_joint(data: Dataset, alpha_hat: SparseCoef, link="identity",
                         lambda_gamma="auto", beta_init: float = 0.0, cfg: HdConfig | None = None,
                         weights=None, gamma_init: SparseCoef | None = None,
                         design: _Design | None = None, refit_support=None) -> JointFit:
    """Alternate a penalized ``gamma`` step and a scalar ``beta`` solve until both settle.

    With ``refit_support`` those covariates are left unpenalized in the ``gamma``
    step, which removes their shrinkage while keeping the max-norm bound.

    Raises
    ------
    ConvergenceError
        When ``|d beta| + |d gamma|_1`` stays above ``cfg.tol_outer`` after
        ``cfg.max_outer`` sweeps; the last ``(beta, gamma)`` is attached.
    """
    _check_n(data)
    cfg = cfg or HdConfig()
    link = get_link(link)
    lam = (lambda_gamma_value(data, alpha_hat, link, beta_init, gamma_init, weights,
                              cfg.auto_constant)
           if lambda_gamma == "auto" else float(lambda_gamma))
    w = _weights(data, weights)
    design = design or _Design(data, with_exposure=False)
    m_hat = link.g(alpha_hat.linear_predictor(data.x))
    base = w * link.deriv(alpha_hat.linear_predictor(data.x))
    c = base * (1.0 - data.y)
    if not np.any(c > 0) or not np.any(base * data.y > 0):
        raise ValidationError("need both outcome classes for the joint fit")

    def gamma_step(beta, theta0):
        e_a, _ = clamped_exp(-beta * data.a)
        t = base * data.y * e_a
        if theta0 is None:
            theta0 = np.zeros(design.z.shape[1])
            theta0[0] = math.log(np.sum(t) / np.sum(c))
        return design.fit(EXPONENTIAL, c, t, lam, init=theta0, support=refit_support)

    def beta_step(gamma):
        preds = NuisancePredictions(gamma.linear_predictor(data.x), m_hat, w)
        sol = solve_beta(data, preds)
        if not sol.converged:
            raise NumericalError("beta step: estimating equation has no root")
        return sol

    beta = float(beta_init)
    theta = design.from_original(gamma_init) if gamma_init is not None else None
    gamma = None
    for it in range(1, cfg.max_outer + 1):
        theta = gamma_step(beta, theta)
        _, gamma_new = design.to_original(theta)
        sol = beta_step(gamma_new)
        change = abs(sol.beta - beta) + (gamma_new.l1_distance(gamma) if gamma is not None
                                         else math.inf)
        beta, gamma = sol.beta, gamma_new
        if change <= cfg.tol_outer:
            break
    else:
        raise ConvergenceError(f"joint fit did not settle in {cfg.max_outer} sweeps",
                               (beta, gamma))
    # finish with a gamma step at the final beta, then re-solve beta
    theta = gamma_step(beta, theta)
    _, gamma = design.to_original(theta)
    sol = beta_step(gamma)
    beta = sol.beta
    mom = gamma_moment(data, alpha_hat, gamma, beta, link, w)
    if not _feasible(mom, lam, FEASIBILITY_ATOL):
        raise NumericalError(f"KKT violation: gamma moment {np.max(np.abs(mom)):.3g} > {lam:.3g}")
    return JointFit(beta, gamma, it, float(np.max(np.abs(mom), initial=0.0)), sol.equation_value)


def _pipeline(data: Dataset, link, cfg: HdConfig, weights=None):
    iters = cfg.lambda_iterations
    beta_t, gamma_t = fit_gamma_initial(data, cfg.lambda_init, cfg.auto_constant,
                                        refit=cfg.refit, lambda_iterations=iters)
    design = _Design(data, with_exposure=False)
    auto_a = cfg.lambda_alpha == "auto"
    lam_a = (lambda_alpha_value(data, gamma_t, weights, cfg.auto_constant)
             if auto_a else float(cfg.lambda_alpha))
    alpha = fit_alpha_dantzig(data, gamma_t, link, lam_a, weights, design=design)
    for _ in range(iters - 1 if auto_a else 0):
        lam_a = lambda_alpha_value(data, gamma_t, weights, cfg.auto_constant, alpha, link)
        alpha = fit_alpha_dantzig(data, gamma_t, link, lam_a, weights, design=design)
    refits = 0
    if cfg.refit:
        try:
            alpha = fit_alpha_dantzig(data, gamma_t, link, lam_a, weights, design=design,
                                      refit_support=np.union1d(alpha.support, gamma_t.support))
            refits += 1
        except NumericalError:
            pass
    auto_g = cfg.lambda_gamma == "auto"
    lam_g = (lambda_gamma_value(data, alpha, link, beta_t, gamma_t, weights, cfg.auto_constant)
             if auto_g else float(cfg.lambda_gamma))
    joint = fit_gamma_beta_joint(data, alpha, link, lam_g, beta_t, cfg, weights,
                                 gamma_init=gamma_t, design=design)
    for _ in range(iters - 1 if auto_g else 0):
        lam_g = lambda_gamma_value(data, alpha, link, joint.beta, joint.gamma, weights,
                                   cfg.auto_constant)
        joint = fit_gamma_beta_joint(data, alpha, link, lam_g, joint.beta, cfg, weights,
                                     gamma_init=joint.gamma, design=design)
    if cfg.refit:
        try:
            joint = fit_gamma_beta_joint(data, alpha, link, lam_g, joint.beta, cfg, weights,
                                         gamma_init=joint.gamma, design=design,
                                         refit_support=np.union1d(joint.gamma.support,
                                                                  alpha.support))
            refits += 2
        except NumericalError:
            pass
    return beta_t, gamma_t, alpha, joint, lam_a, lam_g, refits


def _cross_fit_weights(data: Dataset, link, cfg: HdConfig, phi: str, k: int, seed) -> np.ndarray:
    plan = make_folds(data.n, k, seed)
    w = np.empty(data.n)
    quad = default_quadrature(data.a)
    for fold in range(1, k + 1):
        tr, te = plan.train_index(fold), plan.test_index(fold)
        train = data.subset(tr)
        _, _, alpha, joint, _, _, _ = _pipeline(train, link, cfg)
        m_tr = link.g(alpha.linear_predictor(train.x))
        spec = PhiSpec(phi, quadrature=quad, beta_pilot=joint.beta,
                       sigma=residual_sigma(train, m_tr) if quad == "gauss_hermite" else None)
        xk = data.x[te]
        w[te] = weights_from_values(joint.gamma.linear_predictor(xk),
                                    link.g(alpha.linear_predictor(xk)), spec)
    return w


def estimate_hd(data: Dataset, link="identity", cfg: HdConfig | None = None, phi: str = "none",
                cross_fit_weights: bool = True, level: float = 0.95, folds: int = 5,
                seed: int = 0) -> EstimateReport:
    """High-dimensional doubly robust estimate: ``gamma_tilde -> alpha_hat -> (beta_hat, gamma_hat)``.

    With ``phi`` other than ``"none"`` the weights ``phi(X) exp(-r(X))`` are
    cross-fitted over ``folds`` folds and used in both moment fits and the
    final equation. ``cross_fit_weights=False`` computes them in-sample from
    an unweighted first pass instead.
    """
    cfg = cfg or HdConfig()
    link = get_link(link)
    if phi not in ("none", "simp", "opt"):
        raise ValidationError(f"unknown phi {phi!r}")
    weights = None
    if phi != "none":
        if cross_fit_weights:
            weights = _cross_fit_weights(data, link, cfg, phi, folds, seed)
        else:
            _, _, alpha0, joint0, _, _, _ = _pipeline(data, link, cfg)
            m0 = link.g(alpha0.linear_predictor(data.x))
            quad = default_quadrature(data.a)
            spec = PhiSpec(phi, quadrature=quad, beta_pilot=joint0.beta,
                           sigma=residual_sigma(data, m0) if quad == "gauss_hermite" else None)
            weights = weights_from_values(joint0.gamma.linear_predictor(data.x), m0, spec)
    beta_t, gamma_t, alpha, joint, lam_a, lam_g, refits = _pipeline(data, link, cfg, weights)
    r_hat = joint.gamma.linear_predictor(data.x)
    m_hat = link.g(alpha.linear_predictor(data.x))
    preds = NuisancePredictions(r_hat, m_hat, weights)
    a_mom = np.max(np.abs(alpha_moment(data, gamma_t, alpha, link, weights)), initial=0.0)
    diag = {
        "beta_initial": beta_t,
        "lambda_alpha": lam_a,
        "lambda_gamma": lam_g,
        "alpha_max_moment": float(a_mom),
        "alpha_slack": float(a_mom - lam_a),
        "gamma_max_moment": joint.gamma_max_moment,
        "gamma_slack": joint.gamma_max_moment - lam_g,
        "s_hat_gamma_initial": gamma_t.s_hat,
        "s_hat_alpha": alpha.s_hat,
        "s_hat_gamma": joint.gamma.s_hat,
        "outer_iterations": joint.outer_iterations,
        "refit_code": refits,
    }
    return estimate_from_predictions(data, preds, "hd_sparse", level, diag)

"""Fixed-dimensional parametric nuisance models.

``r(x) = x'gamma`` is fitted by logistic maximum likelihood of ``Y`` on
``(A, X)`` and ``m(x) = g(x'alpha)`` by a generalized linear fit of ``A`` on
``X`` among controls (``Y = 0``). The exposure coefficient then solves the
doubly robust equation, which stays consistent when either model is right.
"""
from __future__ import annotations

import numpy as np
from scipy import linalg
from scipy.special import expit

from .core import (Dataset, EstimateReport, NumericalError, NuisancePredictions,
                   ValidationError, estimate_from_predictions, solve_beta)
from .efficiency import PhiSpec, default_quadrature, residual_sigma, weights_from_values
from .links import EXPONENTIAL, IDENTITY, LOGISTIC, LinkFunction, get_link

__all__ = ["LinkFunction", "IDENTITY", "LOGISTIC", "EXPONENTIAL", "fit_gamma_mle",
           "fit_alpha_glm", "estimate_lowdim", "lowdim_predictions"]

GRAD_TOL = 1e-8
MAX_NEWTON = 100
MAX_HALVINGS = 30


def _with_intercept(x, fit_intercept):
    return np.column_stack([np.ones(x.shape[0]), x]) if fit_intercept else x


def _damped_newton(objective, grad_hess, theta, what):
    """Newton with step halving on a convex objective; returns (theta, iterations)."""
    val = objective(theta)
    for it in range(1, MAX_NEWTON + 1):
        grad, hess = grad_hess(theta)
        if np.linalg.norm(grad) <= GRAD_TOL:
            return theta, it - 1
        try:
            step = linalg.solve(hess, grad, assume_a="pos")
        except (linalg.LinAlgError, ValueError):
            step = np.linalg.lstsq(hess, grad, rcond=None)[0]
        t = 1.0
        for _ in range(MAX_HALVINGS):
            cand = theta - t * step
            cval = objective(cand)
            if np.isfinite(cval) and cval <= val:
                break
            t *= 0.5
        else:
            grad_norm = np.linalg.norm(grad)
            if grad_norm <= 1e3 * GRAD_TOL:
                # objective is flat to rounding; accept the current point
                return theta, it
            raise NumericalError(f"{what}: step halving failed (gradient norm {grad_norm:.3g})")
        theta, val = cand, cval
    grad, _ = grad_hess(theta)
    if np.linalg.norm(grad) <= GRAD_TOL:
        return theta, MAX_NEWTON
    raise NumericalError(f"{what}: no convergence in {MAX_NEWTON} Newton iterations")


def fit_gamma_mle(data: Dataset, fit_intercept: bool = True):
    """Logistic MLE of ``Y`` on ``(A, X)``.

    Returns
    -------
    beta_init : float
        Coefficient on ``A``.
    gamma : ndarray
        Coefficients on ``X``; the intercept comes first when ``fit_intercept``.
    """
    n, p = data.n, data.p
    if not p < n / 5:
        raise ValidationError(f"need p < n/5 for the parametric fit (p={p}, n={n})")
    z = np.column_stack([data.a, _with_intercept(data.x, fit_intercept)])
    if np.linalg.matrix_rank(z) < z.shape[1]:
        raise ValidationError("design (A, X) is rank deficient")
    y = data.y

    def objective(th):
        eta = z @ th
        return float(np.mean(np.logaddexp(0.0, eta) - y * eta))

    def grad_hess(th):
        mu = expit(z @ th)
        g = z.T @ (mu - y) / n
        h = z.T @ ((mu * (1.0 - mu))[:, None] * z) / n
        return g, h

    theta = np.zeros(z.shape[1])
    if fit_intercept:
        ybar = y.mean()
        theta[1] = np.log(ybar / (1.0 - ybar))
    try:
        theta, _ = _damped_newton(objective, grad_hess, theta, "logistic MLE")
    except NumericalError as exc:
        raise NumericalError(f"quasi-separation suspected ({exc})") from exc
    eta = z @ theta
    grad, _ = grad_hess(theta)
    if np.max(np.abs(eta)) > 30.0 and np.linalg.norm(grad) > 0.0:
        raise NumericalError("quasi-separation: |linear predictor| exceeds 30 at the optimum")
    return float(theta[0]), theta[1:]


def fit_alpha_glm(data: Dataset, link="identity", fit_intercept: bool = True):
    """Solve ``sum_{Y=0} (A - g(X'alpha)) X = 0`` by Newton on the convex Bregman objective."""
    link = get_link(link)
    sel = data.y == 0.0
    x0 = _with_intercept(data.x[sel], fit_intercept)
    a0 = data.a[sel]
    n0, d = x0.shape
    if n0 < 5 * data.p:
        raise ValidationError(f"need at least 5p controls (have {n0}, p={data.p})")
    if np.linalg.matrix_rank(x0) < d:
        raise ValidationError("control design matrix is rank deficient")

    def objective(al):
        eta = x0 @ al
        return float(np.mean(link.antideriv(eta) - a0 * eta))

    def grad_hess(al):
        eta = x0 @ al
        g = x0.T @ (link.g(eta) - a0) / n0
        h = x0.T @ (link.deriv(eta)[:, None] * x0) / n0
        return g, h

    alpha = np.zeros(d)
    if fit_intercept:
        abar = a0.mean()
        if link.kind == "logistic_expit" and 0.0 < abar < 1.0:
            alpha[0] = np.log(abar / (1.0 - abar))
        elif link.kind == "exponential" and abar > 0.0:
            alpha[0] = np.log(abar)
        elif link.kind == "identity":
            alpha[0] = abar
    alpha, _ = _damped_newton(objective, grad_hess, alpha, f"{link.kind} GLM fit")
    return alpha


def lowdim_predictions(data: Dataset, link="identity", fit_intercept: bool = True):
    """Fitted ``r(X_i) = X_i'gamma`` and ``m(X_i) = g(X_i'alpha)`` plus the MLE of beta."""
    link = get_link(link)
    beta_init, gamma = fit_gamma_mle(data, fit_intercept)
    alpha = fit_alpha_glm(data, link, fit_intercept)
    xd = _with_intercept(data.x, fit_intercept)
    return xd @ gamma, link.g(xd @ alpha), beta_init


def estimate_lowdim(data: Dataset, link="identity", phi: str = "none", level: float = 0.95,
                    fit_intercept: bool = True, nodes: int = 20) -> EstimateReport:
    """Doubly robust estimate of the exposure log odds ratio with parametric nuisances.

    With ``phi="opt"`` a pilot estimate from the ``phi="simp"`` weights fixes
    the ``beta`` inside ``phi_opt``; the conditional law of ``A`` among controls
    is Bernoulli for 0/1 exposures and a Gaussian working model otherwise.
    """
    r_hat, m_hat, beta_mle = lowdim_predictions(data, link, fit_intercept)
    diag = {"beta_mle": beta_mle}
    spec = PhiSpec(kind=phi) if phi != "opt" else None
    if phi == "opt":
        pilot_w = weights_from_values(r_hat, m_hat, PhiSpec("simp"))
        pilot = solve_beta(data, NuisancePredictions(r_hat, m_hat, pilot_w))
        quad = default_quadrature(data.a)
        spec = PhiSpec("opt", quadrature=quad, nodes=nodes, beta_pilot=pilot.beta,
                       sigma=residual_sigma(data, m_hat) if quad == "gauss_hermite" else None)
        diag["beta_pilot"] = pilot.beta
    w = weights_from_values(r_hat, m_hat, spec)
    preds = NuisancePredictions(r_hat, m_hat, w)
    return estimate_from_predictions(data, preds, "lowdim", level, diag)

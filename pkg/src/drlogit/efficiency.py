"""Efficiency weights for the estimating equation.

The weighted equation multiplies each observation's score by
``phi(X) exp(-r(X))``. Two choices of ``phi`` are provided: the variance
minimizing ``phi_opt``, which needs the conditional law of ``A`` given ``X`` and
``Y = 0``, and ``phi_simp = expit(r)``, which is ``phi_opt`` evaluated at
``beta = 0``.
"""
from __future__ import annotations

from dataclasses import dataclass
from functools import lru_cache

import numpy as np
from scipy.special import expit

from .core import PROB_CLIP, R_CLIP, Dataset, FoldPlan, NumericalError, ValidationError

PHI_KINDS = ("none", "simp", "opt")
WEIGHT_MIN = 1e-6
WEIGHT_MAX = 1e6


@dataclass(frozen=True)
class PhiSpec:
    """How to build ``phi``.

    ``quadrature`` is ``"binary_closed_form"`` for a 0/1 exposure with
    ``P(A=1 | X, Y=0) = m(X)``, or ``"gauss_hermite"`` for the working model
    ``A | X, Y=0 ~ Normal(m(X), sigma^2)``. ``beta_pilot`` is required for
    ``kind="opt"``; ``sigma`` for the Gaussian working model.
    """

    kind: str = "none"
    quadrature: str = "gauss_hermite"
    nodes: int = 20
    beta_pilot: float | None = None
    sigma: float | None = None

    def __post_init__(self):
        if self.kind not in PHI_KINDS:
            raise ValidationError(f"phi must be one of {PHI_KINDS}, got {self.kind!r}")
        if self.quadrature not in ("binary_closed_form", "gauss_hermite"):
            raise ValidationError(f"unknown quadrature {self.quadrature!r}")
        if self.quadrature == "gauss_hermite" and self.nodes < 5:
            raise ValidationError("Gauss-Hermite needs at least 5 nodes")
        if self.kind == "opt" and self.beta_pilot is None:
            raise ValidationError("phi=opt needs a pilot beta")


def phi_simp(r_val):
    """``expit(r)``; saturates to 0 and 1 without overflow."""
    out = expit(np.asarray(r_val, dtype=float))
    return float(out) if np.ndim(out) == 0 else out


@lru_cache(maxsize=8)
def _hermite(nodes: int):
    t, w = np.polynomial.hermite.hermgauss(nodes)
    return t, w / np.sqrt(np.pi)


def phi_opt_values(r_vals, m_vals, beta, spec: PhiSpec):
    """Vectorized ``phi_opt`` given nuisance values at each covariate row.

    ``phi_opt = E[(A-m)^2 | X, Y=0] / E[(A-m)^2 / expit(beta A + r) | X, Y=0]``
    """
    r = np.clip(np.asarray(r_vals, dtype=float), -R_CLIP, R_CLIP)
    m = np.asarray(m_vals, dtype=float)
    if spec.quadrature == "binary_closed_form":
        m = np.clip(m, PROB_CLIP, 1.0 - PROB_CLIP)
        num = m * (1.0 - m)
        # 1/expit(u) = 1 + exp(-u)
        den = ((1.0 - m) * m * m * (1.0 + np.exp(-r))
               + m * (1.0 - m) ** 2 * (1.0 + np.exp(-(beta + r))))
    else:
        if spec.sigma is None or not spec.sigma > 0:
            raise ValidationError("Gaussian working model needs sigma > 0")
        t, w = _hermite(spec.nodes)
        dev = np.sqrt(2.0) * spec.sigma * t
        a = m[..., None] + dev
        sq = dev * dev
        num = np.broadcast_to(np.dot(w, sq), m.shape).astype(float)
        expo = np.clip(-(beta * a + r[..., None]), -700.0, 700.0)
        den = np.sum(w * sq * (1.0 + np.exp(expo)), axis=-1)
    if np.any(den < 1e-12):
        raise NumericalError("phi_opt denominator below 1e-12")
    return num / den


def phi_opt(x_row, r_fn, m_fn, beta_pilot, spec: PhiSpec):
    """``phi_opt`` at one covariate row, with ``beta`` replaced by ``beta_pilot``."""
    r = float(np.ravel(r_fn(x_row))[0])
    m = float(np.ravel(m_fn(x_row))[0])
    return float(phi_opt_values(np.array([r]), np.array([m]), beta_pilot, spec)[0])


def weights_from_values(r_vals, m_vals, spec: PhiSpec):
    """``phi(X) exp(-r(X))`` clamped to ``[1e-6, 1e6]``; ones when ``kind='none'``."""
    r = np.clip(np.asarray(r_vals, dtype=float), -R_CLIP, R_CLIP)
    if spec.kind == "none":
        return np.ones_like(r)
    if spec.kind == "simp":
        # expit(r) exp(-r) = 1 / (1 + exp(r))
        w = expit(-r)
    else:
        w = phi_opt_values(r, m_vals, spec.beta_pilot, spec) * np.exp(-r)
    return np.clip(w, WEIGHT_MIN, WEIGHT_MAX)


def build_weights(data: Dataset, fold_plan: FoldPlan, r_predictors, m_predictors,
                  spec: PhiSpec):
    """Cross-fitted weights: rows of fold ``k`` use the predictors trained without it.

    ``r_predictors`` and ``m_predictors`` are sequences indexed by fold
    (``[k-1]``) of callables mapping a covariate matrix to predicted values.
    """
    w = np.ones(data.n)
    if spec.kind == "none":
        return w
    for k in range(1, fold_plan.k + 1):
        idx = fold_plan.test_index(k)
        xk = data.x[idx]
        w[idx] = weights_from_values(r_predictors[k - 1](xk), m_predictors[k - 1](xk), spec)
    return w


def residual_sigma(data: Dataset, m_hat) -> float:
    """Pooled residual SD of ``A - m(X)`` among ``Y = 0`` rows."""
    sel = data.y == 0.0
    resid = data.a[sel] - np.asarray(m_hat)[sel]
    return float(np.sqrt(np.mean(resid ** 2)))


def default_quadrature(a) -> str:
    a = np.asarray(a)
    return "binary_closed_form" if np.all((a == 0.0) | (a == 1.0)) else "gauss_hermite"

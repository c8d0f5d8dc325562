"""L1-penalized convex M-estimation for link-function losses.

All penalized fits in the package minimize

    f(theta) + sum_j lam_j |theta_j|,
    f(theta) = n^-1 sum_i [ c_i G(z_i' theta) - t_i z_i' theta ],

for a link antiderivative ``G``. Logistic regression (``G`` = softplus,
``c = w``, ``t = w y``), least squares (``G(u) = u^2/2``) and the moment-matching
objectives of the sparse nuisance fits are all of this form. The gradient is
``n^-1 Z' (c g(Z theta) - t)`` so the KKT conditions are max-norm bounds on an
empirical moment vector.

The solver is proximal Newton on a growing working set: each step minimizes
the local quadratic model plus penalty by coordinate descent, then a line
search on the true objective. Proximal gradient (FISTA with backtracking and
adaptive restart) is the fallback when a Newton step cannot descend. A final
Newton polish on the active set makes the stationarity conditions hold to near
machine precision.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from numba import njit
from scipy import linalg

from .core import ConvergenceError, NumericalError
from .links import LinkFunction

POLISH_TOL = 1e-11
# |linear predictor| beyond this under a curved link signals an unbounded objective
DIVERGENCE_ETA = 350.0
KKT_TOL = 1e-9


@dataclass(frozen=True)
class PenalizedFit:
    coef: np.ndarray
    objective: float
    gradient: np.ndarray
    kkt_violation: float
    iterations: int

    @property
    def support(self) -> np.ndarray:
        return np.flatnonzero(self.coef)


class _Problem:
    def __init__(self, z, link, c, t, lam):
        self.z = z
        self.link = link
        self.c = c
        self.t = t
        self.lam = lam
        self.n = z.shape[0]

    def smooth(self, eta):
        return float(np.sum(self.c * self.link.antideriv(eta) - self.t * eta)) / self.n

    def resid(self, eta):
        return (self.c * self.link.g(eta) - self.t) / self.n

    def curvature(self, eta):
        return self.c * self.link.deriv(eta) / self.n

    def penalty(self, theta, cols):
        return float(np.dot(self.lam[cols], np.abs(theta)))


def _soft(x, thr):
    return np.sign(x) * np.maximum(np.abs(x) - thr, 0.0)


def _fista(prob: _Problem, cols, theta, tol, max_iter, step0):
    """Proximal gradient on the columns ``cols``; returns (theta, iters, step)."""
    zw = prob.z[:, cols]
    lam = prob.lam[cols]
    step = step0
    x = theta.copy()
    eta_x = zw @ x
    obj = prob.smooth(eta_x) + float(np.dot(lam, np.abs(x)))
    y, eta_y, tk = x.copy(), eta_x.copy(), 1.0
    for it in range(1, max_iter + 1):
        fy = prob.smooth(eta_y)
        gy = zw.T @ prob.resid(eta_y)
        while True:
            cand = _soft(y - step * gy, step * lam)
            diff = cand - y
            eta_c = zw @ cand
            fc = prob.smooth(eta_c)
            if fc <= fy + np.dot(gy, diff) + np.dot(diff, diff) / (2.0 * step) + 1e-15 * abs(fy):
                break
            step *= 0.5
            if step < 1e-20:
                raise ConvergenceError("proximal gradient line search failed", cand)
        new_obj = fc + float(np.dot(lam, np.abs(cand)))
        if new_obj > obj:
            if tk == 1.0:
                # a plain step from x cannot descend: x is optimal to rounding
                return x, it, step
            # adaptive restart: drop momentum and retake a plain step from x
            y, eta_y, tk = x.copy(), eta_x.copy(), 1.0
            continue
        t_next = 0.5 * (1.0 + np.sqrt(1.0 + 4.0 * tk * tk))
        y = cand + ((tk - 1.0) / t_next) * (cand - x)
        eta_y = eta_c + ((tk - 1.0) / t_next) * (eta_c - eta_x)
        change = obj - new_obj
        x, eta_x, obj, tk = cand, eta_c, new_obj, t_next
        step *= 1.25
        if change <= tol:
            return x, it, step
    raise ConvergenceError(f"proximal gradient did not converge in {max_iter} iterations", x)


@njit(cache=True)
def _cd_quadratic(q, b, lam, u, tol, max_sweeps):
    """Coordinate descent for ``min 0.5 u'Qu + b'u + sum lam |u|`` starting from ``u``."""
    d = u.shape[0]
    qu = q @ u
    for sweep in range(max_sweeps):
        biggest = 0.0
        for j in range(d):
            qjj = q[j, j]
            if qjj <= 0.0:
                continue
            old = u[j]
            z = -(b[j] + qu[j] - qjj * old)
            if z > lam[j]:
                new = (z - lam[j]) / qjj
            elif z < -lam[j]:
                new = (z + lam[j]) / qjj
            else:
                new = 0.0
            delta = new - old
            if delta != 0.0:
                u[j] = new
                for k in range(d):
                    qu[k] += q[k, j] * delta
                change = abs(delta) * np.sqrt(qjj)
                if change > biggest:
                    biggest = change
        if biggest <= tol:
            return u, sweep + 1
    return u, max_sweeps


def _prox_newton(prob: _Problem, cols, theta, tol, max_iter):
    """Proximal Newton on the columns ``cols``; returns (theta, iters) or None on stall."""
    zw = prob.z[:, cols]
    lam = prob.lam[cols]
    x = theta.copy()
    eta = zw @ x
    obj = prob.smooth(eta) + float(np.dot(lam, np.abs(x)))
    for it in range(1, max_iter + 1):
        grad = zw.T @ prob.resid(eta)
        curv = prob.curvature(eta)
        q = zw.T @ (curv[:, None] * zw)
        b = grad - q @ x
        u, _ = _cd_quadratic(q, b, lam, x.copy(), 1e-13, 10000)
        step = u - x
        if not np.all(np.isfinite(step)):
            return None
        pen_x = float(np.dot(lam, np.abs(x)))
        decrease = float(np.dot(grad, step)) + float(np.dot(lam, np.abs(u))) - pen_x
        if decrease >= -tol:
            return x, it
        t = 1.0
        for _ in range(50):
            cand = x + t * step
            eta_c = zw @ cand
            new_obj = prob.smooth(eta_c) + float(np.dot(lam, np.abs(cand)))
            if np.isfinite(new_obj) and new_obj <= obj + 0.25 * t * decrease:
                break
            t *= 0.5
        else:
            return None
        change = obj - new_obj
        x, eta, obj = cand, eta_c, new_obj
        if prob.link.kind != "identity" and np.max(np.abs(eta)) > DIVERGENCE_ETA:
            raise NumericalError("penalized objective appears unbounded (quasi-separation); "
                                 "increase the penalty")
        if change <= tol and t == 1.0:
            return x, it
    return None


def _polish(prob: _Problem, theta, unpen):
    """Newton on the active set with signs held fixed; zeroes crossing coordinates."""
    active = np.flatnonzero((theta != 0.0) | unpen)
    for _ in range(100):
        if active.size == 0:
            return theta
        zs = prob.z[:, active]
        eta = prob.z @ theta
        sgn = np.sign(theta[active])
        lam = prob.lam[active]
        grad = zs.T @ prob.resid(eta) + lam * sgn
        if np.max(np.abs(grad)) <= POLISH_TOL:
            return theta
        hess = zs.T @ (prob.curvature(eta)[:, None] * zs)
        try:
            step = linalg.solve(hess, grad, assume_a="pos")
        except (linalg.LinAlgError, ValueError):
            return theta
        if not np.all(np.isfinite(step)):
            return theta
        base = prob.smooth(eta) + prob.penalty(theta[active], active)
        pen = lam > 0
        crossing = pen & (sgn * step > 0) & (np.abs(step) > np.abs(theta[active]))
        t = 1.0
        drop = None
        if np.any(crossing):
            ratios = np.where(crossing, np.abs(theta[active]) / np.where(crossing, np.abs(step), 1.0),
                              np.inf)
            drop = int(np.argmin(ratios))
            t = float(ratios[drop])
        accepted = False
        for _ in range(40):
            cand = theta.copy()
            cand[active] = theta[active] - t * step
            if drop is not None:
                cand[active[drop]] = 0.0
            val = prob.smooth(prob.z @ cand) + prob.penalty(cand[active], active)
            if val <= base + 1e-14 * max(1.0, abs(base)):
                accepted = True
                break
            t *= 0.5
            drop = None
        if not accepted:
            return theta
        theta = cand
        active = np.flatnonzero((theta != 0.0) | unpen)
    return theta


def fit_l1(z, link: LinkFunction, c, t, lam, init=None, *, tol=1e-9, max_iter=5000,
           kkt_tol=KKT_TOL, batch=20) -> PenalizedFit:
    """Minimize ``n^-1 sum [c G(z'theta) - t z'theta] + sum lam_j |theta_j|``.

    Parameters
    ----------
    z : (n, d) array
        Design matrix; columns with ``lam_j == 0`` are unpenalized.
    link : LinkFunction
        Supplies ``G`` (antiderivative), ``g`` and ``g'``.
    c, t : (n,) arrays
        Curvature weights and linear coefficients of the loss.
    lam : (d,) array
        Per-coordinate penalty levels.
    tol : float
        Objective-change tolerance for the working-set solves.
    max_iter : int
        Cap on the total number of Newton and proximal gradient iterations.
    """
    z = np.asarray(z, dtype=float)
    lam = np.asarray(lam, dtype=float)
    prob = _Problem(z, link, np.asarray(c, dtype=float), np.asarray(t, dtype=float), lam)
    d = z.shape[1]
    theta = np.zeros(d) if init is None else np.array(init, dtype=float)
    unpen = lam == 0.0
    work = np.zeros(d, dtype=bool)
    work |= unpen | (theta != 0.0)
    used = 0
    step = 1.0
    while True:
        cols = np.flatnonzero(work)
        if cols.size:
            res = _prox_newton(prob, cols, theta[cols], tol, max(1, min(200, max_iter - used)))
            if res is None:
                sub, its, step = _fista(prob, cols, theta[cols], tol, max_iter - used, step)
            else:
                sub, its = res
            used += its
            theta = np.zeros(d)
            theta[cols] = sub
            theta = _polish(prob, theta, unpen)
        grad = z.T @ prob.resid(z @ theta)
        kkt = _kkt_violation(grad, theta, lam)
        if kkt <= kkt_tol:
            break
        excess = np.abs(grad) - lam
        excess[work] = -np.inf
        fresh = np.flatnonzero(excess > kkt_tol)
        if used >= max_iter:
            raise ConvergenceError(f"no convergence in {max_iter} iterations", theta)
        if fresh.size == 0:
            # violation sits inside the working set: the subproblem needs more accuracy
            tol *= 0.01
            if tol < 1e-30:
                raise ConvergenceError("KKT conditions not met", theta)
            continue
        order = np.argsort(-excess[fresh], kind="stable")
        work[fresh[order[:batch]]] = True
    obj = prob.smooth(z @ theta) + float(np.dot(lam, np.abs(theta)))
    return PenalizedFit(theta, obj, grad, kkt, used)


def _kkt_violation(grad, theta, lam):
    zero = theta == 0.0
    off = np.where(zero, np.maximum(np.abs(grad) - lam, 0.0),
                   np.abs(grad + lam * np.sign(theta)))
    return float(off.max()) if off.size else 0.0


@dataclass(frozen=True)
class Standardizer:
    """Column centering and scaling; zero-variance columns keep scale one."""

    mean: np.ndarray
    scale: np.ndarray

    @classmethod
    def fit(cls, x):
        x = np.asarray(x, dtype=float)
        mean = x.mean(axis=0)
        sd = x.std(axis=0)
        sd = np.where(sd > 1e-12, sd, 1.0)
        return cls(mean, sd)

    def transform(self, x):
        return (np.asarray(x, dtype=float) - self.mean) / self.scale

    def to_original(self, intercept, coef_std):
        """Map (intercept, coefficients) on the standardized scale back to raw columns."""
        coef = coef_std / self.scale
        return intercept - float(np.dot(coef, self.mean)), coef

"""Data-generating processes, the Monte Carlo engine and bias diagnostics.

Two families of designs are provided.

* ``cond_gaussian``: ``(A, X) | Y=j ~ N(mu_j, Sigma)`` with ``Y ~ Bernoulli(pi_y)``.
  Both nuisance models are then exactly linear: ``r0(x) = c + x'gamma0`` with
  ``(beta0, gamma0) = Sigma^-1 (mu1 - mu0)`` and ``m0`` follows from Gaussian
  conditioning.
* factorization designs (``logistic_linear``, ``nonlinear`` and the
  misspecification scenarios): ``X ~ N(0, I)``, ``logit P(Y=1|X) = q(X)``,
  ``A | X, Y ~ N(m0(X) + Y beta0 sigma_a^2, sigma_a^2)`` with
  ``q = r0 + beta0 m0 + beta0^2 sigma_a^2 / 2``. Because
  ``p(A|X,Y=1) is proportional to exp(beta0 A) p(A|X,Y=0)`` this gives
  ``logit P(Y=1|A,X) = beta0 A + r0(X)`` exactly and ``E[A|X,Y=0] = m0(X)``,
  so ``r0`` and ``m0`` can be made linear or nonlinear independently.
"""
from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field, replace
from functools import cached_property
from typing import Callable

import numpy as np
from scipy import linalg
from scipy.special import expit

from .core import (Dataset, DrlogitError, NumericalError, NuisancePredictions,
                   ValidationError, derive_seed)

log = logging.getLogger(__name__)

DGP_KINDS = ("cond_gaussian", "logistic_linear", "nonlinear")
SCENARIOS = ("both_correct", "r_correct_only", "m_correct_only", "both_wrong")


@dataclass(frozen=True, eq=False)
class DgpSpec:
    """Parameters of a simulation design.

    For ``kind="cond_gaussian"`` the fields ``mu0``, ``mu1`` (length ``p+1``,
    exposure first), ``sigma`` and ``pi_y`` define the law and ``beta0`` is
    derived from them. The factorization fields (``gamma0``, ``r_intercept``,
    ``alpha0``, ``m_intercept``, ``sigma_a``, ``beta_fact``) drive the other kinds
    and the single-model misspecification scenarios. ``nl_strength`` scales the
    nonlinear terms.
    """

    kind: str = "cond_gaussian"
    n: int = 1000
    p: int = 5
    mu0: np.ndarray | None = None
    mu1: np.ndarray | None = None
    sigma: np.ndarray | None = None
    pi_y: float = 0.5
    gamma0: np.ndarray | None = None
    r_intercept: float = 0.0
    alpha0: np.ndarray | None = None
    m_intercept: float = 0.0
    sigma_a: float = 1.0
    beta_fact: float = 1.0
    nl_strength: float = 1.0
    seed: int = 0

    def __post_init__(self):
        if self.kind not in DGP_KINDS:
            raise ValidationError(f"unknown DGP kind {self.kind!r}")
        if self.n < 2 or self.p < 1:
            raise ValidationError("need n >= 2 and p >= 1")
        if not 0.0 < self.pi_y < 1.0:
            raise ValidationError("pi_y must lie in (0, 1)")
        if self.kind == "cond_gaussian":
            if self.mu0 is None or self.mu1 is None or self.sigma is None:
                raise ValidationError("cond_gaussian needs mu0, mu1 and sigma")
            d = self.p + 1
            for name in ("mu0", "mu1"):
                v = np.asarray(getattr(self, name), dtype=float).ravel()
                if v.shape != (d,):
                    raise ValidationError(f"{name} must have length p+1")
                object.__setattr__(self, name, v)
            s = np.asarray(self.sigma, dtype=float)
            if s.shape != (d, d) or not np.allclose(s, s.T):
                raise ValidationError("sigma must be a symmetric (p+1)x(p+1) matrix")
            object.__setattr__(self, "sigma", s)
            _ = self.chol  # validates positive definiteness
        for name in ("gamma0", "alpha0"):
            v = getattr(self, name)
            v = np.zeros(self.p) if v is None else np.asarray(v, dtype=float).ravel()
            if v.shape != (self.p,):
                raise ValidationError(f"{name} must have length p")
            object.__setattr__(self, name, v)

    @cached_property
    def chol(self) -> np.ndarray:
        try:
            return linalg.cholesky(self.sigma, lower=True)
        except linalg.LinAlgError as exc:
            raise NumericalError("sigma is not positive definite") from exc

    @cached_property
    def gaussian_coefficients(self):
        """(beta0, gamma0, intercept, m0 slope, m0 offset) implied by the Gaussian law."""
        prec_diff = linalg.cho_solve((self.chol, True), self.mu1 - self.mu0)
        quad1 = self.mu1 @ linalg.cho_solve((self.chol, True), self.mu1)
        quad0 = self.mu0 @ linalg.cho_solve((self.chol, True), self.mu0)
        intercept = math.log(self.pi_y / (1.0 - self.pi_y)) - 0.5 * (quad1 - quad0)
        s_xx = self.sigma[1:, 1:]
        s_xa = self.sigma[1:, 0]
        slope = linalg.solve(s_xx, s_xa, assume_a="pos")
        offset = self.mu0[0] - slope @ self.mu0[1:]
        return float(prec_diff[0]), prec_diff[1:], float(intercept), slope, float(offset)

    @property
    def beta0(self) -> float:
        if self.kind == "cond_gaussian":
            return self.gaussian_coefficients[0]
        return self.beta_fact

    def with_n(self, n: int) -> "DgpSpec":
        return replace(self, n=n)


@dataclass(frozen=True)
class Truth:
    """True target and nuisance functions of a design."""

    beta0: float
    r0: Callable
    m0: Callable
    a_mean: Callable
    gamma0: np.ndarray | None = None
    r_intercept: float | None = None
    alpha0: np.ndarray | None = None
    m_intercept: float | None = None
    r_linear: bool = True
    m_linear: bool = True

    def r_values(self, x):
        return self.r0(np.asarray(x, dtype=float))

    def m_values(self, x):
        return self.m0(np.asarray(x, dtype=float))

    def logit_full(self, a, x):
        return self.beta0 * np.asarray(a) + self.r0(np.asarray(x, dtype=float))


def _rng(spec: DgpSpec, seed):
    return np.random.default_rng(spec.seed if seed is None else seed)


def gen_conditional_gaussian(spec: DgpSpec, seed=None):
    """Draw ``Y ~ Bernoulli(pi_y)`` then ``(A, X) | Y`` from the Gaussian design.

    Returns
    -------
    data : Dataset
    truth : Truth
        ``r0(x) = intercept + x'gamma0``; ``m0`` from Gaussian conditioning
        among controls; ``a_mean`` is ``E[A | X]`` under the two-component mixture.
    """
    if spec.kind != "cond_gaussian":
        raise ValidationError("gen_conditional_gaussian needs kind='cond_gaussian'")
    rng = _rng(spec, seed)
    n, d = spec.n, spec.p + 1
    y = (rng.random(n) < spec.pi_y).astype(float)
    eps = rng.standard_normal((n, d))
    z = eps @ spec.chol.T + np.where(y[:, None] == 1.0, spec.mu1, spec.mu0)
    data = Dataset(y, z[:, 0], z[:, 1:])
    return data, conditional_gaussian_truth(spec)


def conditional_gaussian_truth(spec: DgpSpec) -> Truth:
    beta0, gamma0, intercept, slope, offset = spec.gaussian_coefficients
    mu0, mu1 = spec.mu0, spec.mu1
    s_xx = spec.sigma[1:, 1:]
    cx = linalg.cho_factor(s_xx)
    dx = linalg.cho_solve(cx, mu1[1:] - mu0[1:])
    cy = (math.log(spec.pi_y / (1.0 - spec.pi_y))
          - 0.5 * (mu1[1:] @ linalg.cho_solve(cx, mu1[1:]) - mu0[1:] @ linalg.cho_solve(cx, mu0[1:])))
    off1 = mu1[0] - slope @ mu1[1:]

    def r0(x):
        return intercept + x @ gamma0

    def m0(x):
        return offset + x @ slope

    def a_mean(x):
        p1 = expit(cy + x @ dx)
        return m0(x) + p1 * (off1 - offset)

    return Truth(beta0, r0, m0, a_mean, gamma0, intercept, slope, offset, True, True)


def _r_nonlinear(x, k):
    return k * ((np.abs(x[:, 0]) - math.sqrt(2.0 / math.pi)) + 0.5 * np.sin(2.0 * x[:, 1 % x.shape[1]]))


def _m_nonlinear(x, k):
    return k * (0.5 * (x[:, 0] ** 2 - 1.0) + 0.5 * np.cos(2.0 * x[:, 1 % x.shape[1]]))


def factorization_truth(spec: DgpSpec, r_linear: bool, m_linear: bool) -> Truth:
    beta0, s2, k = spec.beta_fact, spec.sigma_a ** 2, spec.nl_strength
    g0, a0 = spec.gamma0, spec.alpha0

    def r0(x):
        out = spec.r_intercept + x @ g0
        return out if r_linear else out + _r_nonlinear(x, k)

    def m0(x):
        out = spec.m_intercept + x @ a0
        return out if m_linear else out + _m_nonlinear(x, k)

    def q(x):
        return r0(x) + beta0 * m0(x) + 0.5 * beta0 * beta0 * s2

    def a_mean(x):
        return m0(x) + expit(q(x)) * beta0 * s2

    truth = Truth(beta0, r0, m0, a_mean, g0, spec.r_intercept, a0, spec.m_intercept,
                  r_linear, m_linear)
    object.__setattr__(truth, "q", q)
    return truth


def gen_factorization(spec: DgpSpec, r_linear: bool, m_linear: bool, seed=None):
    rng = _rng(spec, seed)
    truth = factorization_truth(spec, r_linear, m_linear)
    n = spec.n
    x = rng.standard_normal((n, spec.p))
    y = (rng.random(n) < expit(truth.q(x))).astype(float)
    a = truth.m0(x) + y * spec.beta_fact * spec.sigma_a ** 2 + spec.sigma_a * rng.standard_normal(n)
    if y.min() == y.max():
        raise NumericalError("simulated outcome has a single class")
    return Dataset(y, a, x), truth


def gen_misspec(spec: DgpSpec, scenario: str = "both_correct", seed=None):
    """Draw a dataset for a misspecification scenario.

    Returns ``(data, truth, flags)`` where ``flags`` says which linear working
    model (``r_correct``, ``m_correct``) is correctly specified.
    """
    if scenario not in SCENARIOS:
        raise ValidationError(f"unknown scenario {scenario!r}")
    if scenario == "both_correct":
        if spec.kind == "cond_gaussian":
            data, truth = gen_conditional_gaussian(spec, seed)
        else:
            lin = spec.kind == "logistic_linear"
            data, truth = gen_factorization(spec, lin, lin, seed)
    else:
        r_lin = scenario == "r_correct_only"
        m_lin = scenario == "m_correct_only"
        data, truth = gen_factorization(spec, r_lin, m_lin, seed)
    return data, truth, {"r_correct": truth.r_linear, "m_correct": truth.m_linear}


def sparse_gaussian_spec(n=500, p=1000, s=3, beta0=0.5, gamma_value=0.5, rho=0.4,
                         pi_y=0.5, seed=0, **factorization) -> DgpSpec:
    """Conditional Gaussian design with ``s``-sparse ``gamma0`` and ``alpha0``.

    The precision matrix of ``(A, X)`` is the identity except for couplings
    ``-rho`` between ``A`` and the first ``s`` covariates, so the control-group
    regression of ``A`` on ``X`` has slope ``rho`` on those covariates.
    ``mu1 - mu0 = Sigma (beta0, gamma0)`` makes the logistic coefficients exact.
    The factorization fields default to the same sparse coefficients so that
    the misspecification scenarios share the linear parts.
    """
    d = p + 1
    if s * rho * rho >= 1.0:
        raise ValidationError("rho too large: precision matrix not positive definite")
    prec = np.eye(d)
    prec[0, 1:s + 1] = prec[1:s + 1, 0] = -rho
    sigma = linalg.inv(prec)
    sigma = 0.5 * (sigma + sigma.T)
    coef = np.zeros(d)
    coef[0] = beta0
    coef[1:s + 1] = gamma_value * np.where(np.arange(s) % 2 == 0, 1.0, -1.0)
    mu0 = np.zeros(d)
    mu1 = sigma @ coef
    gamma0 = coef[1:].copy()
    alpha0 = np.zeros(p)
    alpha0[:s] = rho
    defaults = dict(gamma0=gamma0, alpha0=alpha0, beta_fact=beta0, r_intercept=0.0,
                    m_intercept=0.0, sigma_a=1.0)
    defaults.update(factorization)
    return DgpSpec("cond_gaussian", n, p, mu0, mu1, sigma, pi_y, seed=seed, **defaults)


def nonlinear_spec(n=1000, p=5, beta0=0.5, nl_strength=1.0, seed=0) -> DgpSpec:
    """Factorization design with both nuisance functions nonlinear."""
    gamma0 = np.zeros(p)
    gamma0[:2] = [0.5, -0.5]
    alpha0 = np.zeros(p)
    alpha0[: min(3, p)] = 0.4
    return DgpSpec("nonlinear", n, p, gamma0=gamma0, alpha0=alpha0, beta_fact=beta0,
                   r_intercept=-0.25, nl_strength=nl_strength, seed=seed)


def bias_decomposition(data: Dataset, preds_hat: NuisancePredictions,
                       preds_bar: NuisancePredictions, beta: float) -> dict:
    """Split the sample estimating equation into main, first-order and remainder terms.

    ``lhs = main - delta_m - delta_r + remainder`` holds exactly; ``remainder``
    is computed from its own second-order closed form (not by subtraction)
    so the identity is a genuine check.
    """
    if not (preds_hat.n == preds_bar.n == data.n):
        raise ValidationError("length mismatch between data and predictions")
    y, a = data.y, data.a
    r_hat, m_hat = preds_hat.r_hat, preds_hat.m_hat
    r_bar, m_bar = preds_bar.r_hat, preds_bar.m_hat
    u = y * np.exp(-beta * a)
    v_hat = (1.0 - y) * np.exp(r_hat)
    v_bar = (1.0 - y) * np.exp(r_bar)
    lhs = np.mean((u - v_hat) * (a - m_hat))
    main = np.mean((u - v_bar) * (a - m_bar))
    delta_m = np.mean((u - v_bar) * (m_hat - m_bar))
    delta_r = np.mean(v_bar * (r_hat - r_bar) * (a - m_bar))
    # (1-Y) e^{r_bar} {e^{dr} - 1 - dr} (A - m_bar) is second order in dr
    dr = r_hat - r_bar
    remainder = np.mean(-v_bar * (np.expm1(dr) - dr) * (a - m_bar)
                        + (v_hat - v_bar) * (m_hat - m_bar))
    return {"lhs": float(lhs), "main": float(main), "delta_m": float(delta_m),
            "delta_r": float(delta_r), "remainder": float(remainder)}


ESTIMATORS = ("lowdim", "hd", "ml")


@dataclass(frozen=True)
class ScenarioConfig:
    """A Monte Carlo campaign: estimator, scenario, replicates and sample sizes.

    ``options`` are forwarded to the estimator (``link``, ``phi``, ``learner``,
    ``cfg`` and so on).
    """

    estimator: str = "lowdim"
    scenario: str = "both_correct"
    replicates: int = 100
    n_grid: tuple = (1000,)
    level: float = 0.95
    seed: int = 0
    options: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.estimator not in ESTIMATORS and not callable(self.estimator):
            raise ValidationError(f"unknown estimator {self.estimator!r}")
        if self.scenario not in SCENARIOS:
            raise ValidationError(f"unknown scenario {self.scenario!r}")
        if self.replicates < 1:
            raise ValidationError("replicates must be positive")
        if not 0.0 < self.level < 1.0:
            raise ValidationError("level must lie in (0, 1)")
        object.__setattr__(self, "n_grid", tuple(int(v) for v in self.n_grid))


@dataclass(frozen=True)
class MonteCarloResult:
    n: np.ndarray
    replicate: np.ndarray
    beta_hat: np.ndarray
    se: np.ndarray
    covered: np.ndarray
    failed: np.ndarray
    beta0: float
    summaries: dict

    def summary(self, n=None) -> dict:
        if n is None:
            if len(self.summaries) != 1:
                raise ValueError("several sample sizes; pass n")
            n = next(iter(self.summaries))
        return self.summaries[int(n)]

    def rows(self):
        for i in range(self.n.shape[0]):
            yield (int(self.replicate[i]), int(self.n[i]), float(self.beta_hat[i]),
                   float(self.se[i]), bool(self.covered[i]))


def summarize(beta_hat, se, covered, failed, beta0) -> dict:
    ok = ~failed
    b, s, c = beta_hat[ok], se[ok], covered[ok]
    k = int(ok.sum())
    sd = float(np.std(b, ddof=1)) if k > 1 else float("nan")
    return {
        "replicates": int(failed.shape[0]),
        "succeeded": k,
        "failure_rate": float(failed.mean()) if failed.size else 0.0,
        "mean_beta": float(np.mean(b)) if k else float("nan"),
        "bias": float(np.mean(b) - beta0) if k else float("nan"),
        "mc_sd": sd,
        "mc_se_of_mean": sd / math.sqrt(k) if k > 1 else float("nan"),
        "mean_se": float(np.mean(s)) if k else float("nan"),
        "coverage": float(np.mean(c)) if k else float("nan"),
    }


def _estimate(data, estimator, level, options):
    if callable(estimator):
        return estimator(data, level=level, **options)
    if estimator == "lowdim":
        from .lowdim import estimate_lowdim
        return estimate_lowdim(data, level=level, **options)
    if estimator == "hd":
        from .hd_sparse import estimate_hd
        return estimate_hd(data, level=level, **options)
    from .ml_crossfit import estimate_ml
    return estimate_ml(data, level=level, **options)


def run_replicate(cfg: ScenarioConfig, dgp: DgpSpec, n: int, rep: int):
    """One replicate: simulate, estimate, return (beta_hat, se, covered, failed)."""
    seed = derive_seed(cfg.seed, n, rep)
    spec = dgp.with_n(n)
    try:
        data, truth, _ = gen_misspec(spec, cfg.scenario, seed=seed)
        opts = dict(cfg.options)
        if cfg.estimator == "ml":
            from .ml_crossfit import RefitConfig
            base = opts.get("cfg") or RefitConfig()
            opts["cfg"] = replace(base, seed=derive_seed(seed, "crossfit"))
        elif cfg.estimator == "hd":
            opts.setdefault("seed", derive_seed(seed, "crossfit"))
        rep_out = _estimate(data, cfg.estimator, cfg.level, opts)
    except (DrlogitError, FloatingPointError, np.linalg.LinAlgError) as exc:
        log.debug("replicate %d (n=%d) failed: %s", rep, n, exc)
        return float("nan"), float("nan"), False, True
    if not rep_out.converged:
        log.debug("replicate %d (n=%d): estimating equation has no root", rep, n)
        return float("nan"), float("nan"), False, True
    return rep_out.beta_hat, rep_out.se, rep_out.covers(truth.beta0), False


def run_monte_carlo(cfg: ScenarioConfig, dgp: DgpSpec, threads: int = 1,
                    max_failure_rate: float = 0.05) -> MonteCarloResult:
    """Run every (n, replicate) pair; results are reduced in replicate order.

    Replicate seeds derive from ``(cfg.seed, n, replicate)`` only, so the
    output does not depend on ``threads``.
    """
    tasks = [(n, r) for n in cfg.n_grid for r in range(cfg.replicates)]
    if threads > 1:
        from joblib import Parallel, delayed
        out = Parallel(n_jobs=threads)(delayed(run_replicate)(cfg, dgp, n, r) for n, r in tasks)
    else:
        out = [run_replicate(cfg, dgp, n, r) for n, r in tasks]
    arr = np.array([o[:2] for o in out], dtype=float).reshape(-1, 2)
    covered = np.array([o[2] for o in out], dtype=bool)
    failed = np.array([o[3] for o in out], dtype=bool)
    ns = np.array([t[0] for t in tasks], dtype=int)
    reps = np.array([t[1] for t in tasks], dtype=int)
    beta0 = gen_truth_beta(dgp, cfg.scenario)
    summaries = {}
    for n in cfg.n_grid:
        sel = ns == n
        summaries[n] = summarize(arr[sel, 0], arr[sel, 1], covered[sel], failed[sel], beta0)
        if summaries[n]["failure_rate"] > max_failure_rate:
            raise NumericalError(
                f"{summaries[n]['failure_rate']:.1%} of replicates failed at n={n}")
    return MonteCarloResult(ns, reps, arr[:, 0], arr[:, 1], covered, failed, beta0, summaries)


def gen_truth_beta(dgp: DgpSpec, scenario: str) -> float:
    if scenario == "both_correct" and dgp.kind == "cond_gaussian":
        return dgp.beta0
    return dgp.beta_fact

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st
from scipy.special import expit

from drlogit.core import Dataset, NumericalError, ValidationError
from drlogit.links import EXPONENTIAL, IDENTITY, LOGISTIC, get_link
from drlogit.lowdim import estimate_lowdim, fit_alpha_glm, fit_gamma_mle
from drlogit.simulate import ScenarioConfig, run_monte_carlo, sparse_gaussian_spec

from .oracles import logistic_mle, weighted_least_squares

LINKS = [IDENTITY, LOGISTIC, EXPONENTIAL]


@pytest.mark.parametrize("link", LINKS, ids=lambda l: l.kind)
@given(u=st.floats(-20, 20))
def test_link_antiderivative_and_monotonicity(link, u):
    h = 1e-5 * max(1.0, abs(u))
    fd = (link.antideriv(u + h) - link.antideriv(u - h)) / (2 * h)
    assert fd == pytest.approx(float(link.g(u)), rel=1e-6, abs=1e-9)
    assert link.deriv(u) > 0
    assert link.g(u + 0.5) > link.g(u)


def test_get_link_names():
    assert get_link("expit") is LOGISTIC and get_link("exp") is EXPONENTIAL
    with pytest.raises(ValidationError):
        get_link("probit")


# ---------------------------------------------------------------- fit_gamma_mle

def test_gamma_mle_null_model(rng):
    n = 40_000
    x = rng.standard_normal((n, 2))
    data = Dataset(rng.integers(0, 2, n), rng.standard_normal(n), x)
    beta, gamma = fit_gamma_mle(data)
    assert abs(beta) < 0.04 and np.all(np.abs(gamma) < 0.04)


def test_gamma_mle_recovers_truth(rng):
    n = 100_000
    x = rng.standard_normal((n, 3))
    a = rng.standard_normal(n)
    truth = np.array([0.7, -0.2, 0.5, 0.0, -0.4])  # beta, intercept, gamma
    z = np.column_stack([a, np.ones(n), x])
    y = (rng.random(n) < expit(z @ truth)).astype(float)
    beta, gamma = fit_gamma_mle(Dataset(y, a, x))
    est = np.concatenate([[beta], gamma])
    mu = expit(z @ est)
    cov = np.linalg.inv(z.T @ ((mu * (1 - mu))[:, None] * z))
    se = np.sqrt(np.diag(cov))
    assert np.all(np.abs(est - truth) < 4 * se)
    # agrees with an independent optimizer
    assert np.allclose(est, logistic_mle(z, y), atol=1e-5)


def test_gamma_mle_rank_deficient(rng):
    x = rng.standard_normal((100, 2))
    x = np.column_stack([x, x[:, 0]])
    with pytest.raises(ValidationError):
        fit_gamma_mle(Dataset(rng.integers(0, 2, 100), rng.standard_normal(100), x))
    with pytest.raises(ValidationError):
        fit_gamma_mle(Dataset(rng.integers(0, 2, 20), rng.standard_normal(20),
                              rng.standard_normal((20, 5))))


def test_gamma_mle_separation(rng):
    x = rng.standard_normal((200, 1))
    y = (x[:, 0] > 0).astype(float)
    with pytest.raises(NumericalError, match="separation"):
        fit_gamma_mle(Dataset(y, rng.standard_normal(200), x))


# ---------------------------------------------------------------- fit_alpha_glm

def test_alpha_identity_matches_least_squares(rng):
    n = 500
    x = rng.standard_normal((n, 3))
    y = rng.integers(0, 2, n).astype(float)
    a = 1.0 + x @ [0.5, -1.0, 0.2] + rng.standard_normal(n)
    alpha = fit_alpha_glm(Dataset(y, a, x), "identity")
    sel = y == 0
    oracle = weighted_least_squares(x[sel], a[sel], np.ones(sel.sum()))
    assert np.allclose(alpha, oracle, atol=1e-8)


def test_alpha_constant_exposure(rng):
    x = rng.standard_normal((100, 2))
    alpha = fit_alpha_glm(Dataset(rng.integers(0, 2, 100), np.full(100, 3.0), x), "identity")
    assert np.allclose(alpha, [3.0, 0.0, 0.0], atol=1e-10)


def test_alpha_expit_binary_exposure(rng):
    n = 60_000
    x = rng.standard_normal((n, 2))
    alpha0 = np.array([-0.3, 0.8, -0.5])
    z = np.column_stack([np.ones(n), x])
    a = (rng.random(n) < expit(z @ alpha0)).astype(float)
    y = rng.integers(0, 2, n).astype(float)
    alpha = fit_alpha_glm(Dataset(y, a, x), "expit")
    assert np.allclose(alpha, alpha0, atol=0.05)


def test_alpha_needs_enough_controls(rng):
    with pytest.raises(ValidationError):
        fit_alpha_glm(Dataset(np.r_[np.zeros(8), np.ones(32)], rng.standard_normal(40),
                              rng.standard_normal((40, 2))))


# ---------------------------------------------------------------- estimate_lowdim

def test_estimate_lowdim_report(rng):
    spec = sparse_gaussian_spec(n=800, p=5, s=3)
    from drlogit.simulate import gen_conditional_gaussian

    data, truth = gen_conditional_gaussian(spec, seed=3)
    for phi in ("none", "simp", "opt"):
        rep = estimate_lowdim(data, phi=phi)
        assert rep.converged and rep.method == "lowdim"
        assert rep.ci_lower < truth.beta0 + 4 * rep.se and rep.ci_upper > truth.beta0 - 4 * rep.se
    assert "beta_pilot" in estimate_lowdim(data, phi="opt").diagnostics


@pytest.mark.slow
def test_weighting_does_not_change_bias():
    spec = sparse_gaussian_spec(n=1000, p=5, s=3)
    out = {}
    for phi in ("none", "simp"):
        res = run_monte_carlo(ScenarioConfig("lowdim", "both_correct", 200, (1000,), seed=21,
                                             options={"phi": phi}), spec)
        out[phi] = res
    diff = out["none"].beta_hat - out["simp"].beta_hat
    # paired comparison of the two estimators on identical datasets
    assert abs(diff.mean()) < 3 * diff.std(ddof=1) / np.sqrt(diff.size)

import numpy as np
import pytest

from drlogit.core import NumericalError, NuisancePredictions, ValidationError, derive_seed
from drlogit.learners import RidgeLearner
from drlogit.lowdim import estimate_lowdim, fit_gamma_mle
from drlogit.ml_crossfit import RefitConfig, assemble_predictions, crossfit_nuisances
from drlogit.simulate import (DgpSpec, ScenarioConfig, bias_decomposition,
                              gen_conditional_gaussian, gen_factorization, gen_misspec,
                              nonlinear_spec, run_monte_carlo, sparse_gaussian_spec)

from .oracles import weighted_least_squares


def _identity_spec(n=1000, p=2):
    mu1 = np.zeros(p + 1)
    mu1[0] = 1.0
    return DgpSpec("cond_gaussian", n, p, np.zeros(p + 1), mu1, np.eye(p + 1))


def _binned_means(pred, target, bins=10):
    """Average target within deciles of pred; returns (mean pred, mean target) per bin."""
    edges = np.quantile(pred, np.linspace(0, 1, bins + 1))
    lab = np.clip(np.searchsorted(edges, pred, side="right") - 1, 0, bins - 1)
    return (np.array([pred[lab == b].mean() for b in range(bins)]),
            np.array([target[lab == b].mean() for b in range(bins)]))


# ---------------------------------------------------------------- designs

def test_identity_covariance_coefficients():
    spec = _identity_spec()
    beta0, gamma0, icpt, slope, offset = spec.gaussian_coefficients
    assert beta0 == pytest.approx(1.0)
    assert np.allclose(gamma0, 0.0) and np.allclose(slope, 0.0)
    assert icpt == pytest.approx(-0.5) and offset == 0.0


def test_spec_validation():
    with pytest.raises(ValidationError):
        DgpSpec("cond_gaussian", 100, 2)
    with pytest.raises(ValidationError):
        DgpSpec("other", 100, 2)
    with pytest.raises(ValidationError):
        sparse_gaussian_spec(p=10, s=9, rho=0.4)


@pytest.mark.slow
def test_large_sample_mle_recovers_logistic_coefficients():
    spec = sparse_gaussian_spec(n=200_000, p=5, s=3)
    data, truth = gen_conditional_gaussian(spec, seed=1)
    beta, gamma = fit_gamma_mle(data)
    assert beta == pytest.approx(truth.beta0, abs=0.03)
    assert np.allclose(gamma, np.r_[truth.r_intercept, truth.gamma0], atol=0.03)


def test_control_mean_of_exposure_is_m0():
    spec = sparse_gaussian_spec(n=100_000, p=5, s=3)
    data, truth = gen_conditional_gaussian(spec, seed=2)
    sel = data.y == 0
    coef = weighted_least_squares(data.x[sel], data.a[sel], np.ones(sel.sum()))
    assert np.allclose(coef, np.r_[truth.m_intercept, truth.alpha0], atol=0.02)
    pred, obs = _binned_means(truth.m_values(data.x[sel]), data.a[sel])
    assert np.allclose(pred, obs, atol=0.03)


@pytest.mark.parametrize("scenario", ["r_correct_only", "m_correct_only", "both_wrong"])
def test_factorization_designs(scenario):
    spec = sparse_gaussian_spec(n=100_000, p=3, s=2)
    data, truth, flags = gen_misspec(spec, scenario, seed=3)
    assert flags == {"r_correct": scenario == "r_correct_only",
                     "m_correct": scenario == "m_correct_only"}
    sel = data.y == 0
    # control-group mean of A follows m0, linear or not
    pred, obs = _binned_means(truth.m_values(data.x[sel]), data.a[sel])
    assert np.allclose(pred, obs, atol=0.03)
    # the outcome law has logit beta0 A + r0(X): the offset fit recovers beta0
    from scipy import optimize

    off = truth.r_values(data.x)

    def nll(b):
        eta = b * data.a + off
        return np.mean(np.logaddexp(0, eta) - data.y * eta)

    b = optimize.minimize_scalar(nll, bounds=(-3, 3), method="bounded").x
    assert b == pytest.approx(truth.beta0, abs=0.03)


def test_nonlinear_part_is_not_linear():
    spec = nonlinear_spec(n=50_000, p=3)
    data, truth = gen_factorization(spec, r_linear=True, m_linear=False, seed=4)
    sel = data.y == 0
    coef = weighted_least_squares(data.x[sel], data.a[sel], np.ones(sel.sum()))
    lin = coef[0] + data.x[sel] @ coef[1:]
    resid = truth.m_values(data.x[sel]) - lin
    assert np.std(resid) > 0.2


def test_both_correct_delegates_to_gaussian():
    spec = sparse_gaussian_spec(n=200, p=4, s=2)
    d1, _, flags = gen_misspec(spec, "both_correct", seed=9)
    d2, _ = gen_conditional_gaussian(spec, seed=9)
    assert np.array_equal(d1.a, d2.a) and np.array_equal(d1.x, d2.x)
    assert flags == {"r_correct": True, "m_correct": True}
    with pytest.raises(ValidationError):
        gen_misspec(spec, "nonsense")


# ---------------------------------------------------------------- bias decomposition

def _decomp_inputs(seed, t=1.0):
    spec = sparse_gaussian_spec(n=500, p=4, s=2)
    data, truth = gen_conditional_gaussian(spec, seed=seed)
    rng = np.random.default_rng(seed)
    bar = NuisancePredictions(truth.r_values(data.x), truth.m_values(data.x))
    hat = NuisancePredictions(bar.r_hat + t * 0.3 * rng.standard_normal(data.n),
                              bar.m_hat + t * 0.3 * rng.standard_normal(data.n))
    return data, truth, hat, bar


def test_decomposition_zero_perturbation():
    data, truth, _, bar = _decomp_inputs(1)
    out = bias_decomposition(data, bar, bar, truth.beta0)
    assert out["delta_m"] == 0.0 and out["delta_r"] == 0.0 and out["remainder"] == 0.0
    assert out["lhs"] == out["main"]


@pytest.mark.parametrize("seed", range(5))
def test_decomposition_identity(seed):
    data, truth, hat, bar = _decomp_inputs(seed)
    d = bias_decomposition(data, hat, bar, truth.beta0)
    assert d["lhs"] == pytest.approx(d["main"] - d["delta_m"] - d["delta_r"] + d["remainder"],
                                     abs=1e-12)


def test_remainder_is_second_order():
    ratios = []
    for seed in range(5):
        data, truth, hat, bar = _decomp_inputs(seed, t=0.1)
        _, _, hat2, _ = _decomp_inputs(seed, t=0.05)
        r1 = bias_decomposition(data, hat, bar, truth.beta0)["remainder"]
        r2 = bias_decomposition(data, hat2, bar, truth.beta0)["remainder"]
        ratios.append(r2 / r1)
    assert np.allclose(ratios, 0.25, atol=0.03)


def test_decomposition_length_check():
    data, truth, hat, bar = _decomp_inputs(0)
    short = NuisancePredictions(bar.r_hat[:-1], bar.m_hat[:-1])
    with pytest.raises(ValidationError):
        bias_decomposition(data, short, bar, 0.0)


@pytest.mark.slow
def test_first_order_terms_shrink_with_n():
    spec = sparse_gaussian_spec(n=500, p=5, s=3)
    cfg = RefitConfig(k_outer=2, k_inner=2)
    med = []
    for n in (500, 4000):
        vals = []
        for rep in range(20):
            data, truth = gen_conditional_gaussian(spec.with_n(n), seed=derive_seed(13, n, rep))
            _, fits = crossfit_nuisances(data, RidgeLearner(), cfg)
            hat = assemble_predictions(data, fits)
            bar = NuisancePredictions(truth.r_values(data.x), truth.m_values(data.x))
            d = bias_decomposition(data, hat, bar, truth.beta0)
            vals.append(abs(d["delta_m"]) + abs(d["delta_r"]))
        med.append(np.median(vals))
    assert med[1] < med[0]


# ---------------------------------------------------------------- Monte Carlo engine

def test_monte_carlo_coverage_and_determinism():
    spec = sparse_gaussian_spec(n=500, p=5, s=3)
    cfg = ScenarioConfig("lowdim", "both_correct", 50, (500,), seed=3)
    a = run_monte_carlo(cfg, spec, threads=1)
    b = run_monte_carlo(cfg, spec, threads=2)
    assert 0.85 <= a.summary()["coverage"] <= 1.0
    assert np.array_equal(a.beta_hat, b.beta_hat) and np.array_equal(a.se, b.se)
    assert a.summaries == b.summaries


def test_failure_rate_guard():
    calls = {"n": 0}

    def flaky(data, level, **opts):
        calls["n"] += 1
        if data.y[0] == 1.0:
            raise NumericalError("forced failure")
        return estimate_lowdim(data, level=level)

    spec = sparse_gaussian_spec(n=200, p=3, s=2)
    cfg = ScenarioConfig(flaky, "both_correct", 20, (200,), seed=1)
    with pytest.raises(NumericalError, match="replicates failed"):
        run_monte_carlo(cfg, spec)
    res = run_monte_carlo(cfg, spec, max_failure_rate=1.0)
    assert res.failed.any() and np.all(np.isnan(res.beta_hat[res.failed]))


def test_scenario_config_validation():
    for bad in ({"estimator": "nope"}, {"scenario": "x"}, {"replicates": 0}, {"level": 1.0}):
        with pytest.raises(ValidationError):
            ScenarioConfig(**bad)
    assert ScenarioConfig(n_grid=[100.0]).n_grid == (100,)

import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from drlogit.core import (R_CLIP, Dataset, EstimateReport, NumericalError, NuisancePredictions,
                          ValidationError, derive_seed, eval_h, h_terms, make_folds, sandwich_se,
                          solve_beta)
from drlogit.simulate import gen_conditional_gaussian, sparse_gaussian_spec

from .conftest import random_dataset
from .oracles import grid_scan_root

finite = st.floats(-5, 5, allow_nan=False)


# ---------------------------------------------------------------- eval_h

def test_eval_h_examples():
    assert eval_h(1, 2.0, 0.0, 0.0, 1.0) == 1.0
    assert eval_h(0, 0.0, 5.0, 0.0, 0.0) == 0.0
    assert eval_h(1, 1.0, math.log(2), 7.0, 0.5) == pytest.approx(0.25, abs=1e-15)


@given(a=finite, b1=finite, b2=finite, r1=finite, r2=finite, m=finite)
def test_eval_h_ignores_irrelevant_arguments(a, b1, b2, r1, r2, m):
    assert eval_h(1, a, b1, r1, m) == eval_h(1, a, b1, r2, m)
    assert eval_h(0, a, b1, r1, m) == eval_h(0, a, b2, r1, m)


def test_eval_h_saturates_instead_of_overflowing():
    vals, clamped = h_terms(np.array([1.0, 0.0]), np.array([-1e4, 1.0]), 1.0,
                            np.array([0.0, 800.0]), np.zeros(2))
    assert np.all(np.isfinite(vals))
    assert clamped == 2


# ---------------------------------------------------------------- Dataset / predictions

def test_dataset_validation():
    x = np.zeros((3, 1))
    with pytest.raises(ValidationError):
        Dataset([0, 1, 2], [0, 0, 0], x)
    with pytest.raises(ValidationError):
        Dataset([0, 1, 1], [0, np.nan, 0], x)
    with pytest.raises(ValidationError):
        Dataset([1, 1, 1], [0, 0, 0], x)
    with pytest.raises(ValidationError):
        Dataset([0, 1], [0, 0, 0], x)
    d = Dataset([0, 1, 1], [0, 1, 2], x)
    with pytest.raises(ValueError):
        d.y[0] = 1.0


def test_predictions_clip_and_count():
    p = NuisancePredictions(np.array([50.0, -40.0, 1.0]), np.zeros(3))
    assert p.r_hat.tolist() == [R_CLIP, -R_CLIP, 1.0]
    assert p.r_clipped == 2
    assert np.all(p.w_hat == 1.0) and np.all(p.fold_id == 1)
    with pytest.raises(ValidationError):
        NuisancePredictions(np.zeros(3), np.zeros(3), w_hat=np.array([1.0, 0.0, 1.0]))


# ---------------------------------------------------------------- solve_beta

def _two_point(r2):
    data = Dataset([1.0, 0.0], [1.0, 1.0], np.zeros((2, 1)))
    return data, NuisancePredictions(np.array([0.0, r2]), np.zeros(2))


def test_solve_beta_closed_forms():
    data, preds = _two_point(0.0)
    sol = solve_beta(data, preds)
    assert sol.converged and abs(sol.beta) < 1e-10
    data, preds = _two_point(math.log(2))
    sol = solve_beta(data, preds)
    assert sol.converged and sol.beta == pytest.approx(-math.log(2), abs=1e-10)


def test_solve_beta_reports_missing_root():
    # both terms positive for every beta: no sign change anywhere
    data = Dataset([1.0, 0.0], [1.0, -1.0], np.zeros((2, 1)))
    sol = solve_beta(data, NuisancePredictions(np.zeros(2), np.zeros(2)))
    assert not sol.converged


@pytest.mark.parametrize("seed", range(10))
def test_solve_beta_matches_grid_scan(seed):
    rng = np.random.default_rng(seed)
    data = random_dataset(rng, n=50)
    preds = NuisancePredictions(0.3 * data.x[:, 1], 0.5 * data.x[:, 0],
                                np.exp(0.2 * rng.standard_normal(50)))
    sol = solve_beta(data, preds)
    oracle = grid_scan_root(data, preds)
    assert sol.converged
    assert abs(sol.beta - oracle) < 1e-8


@given(st.integers(0, 10_000))
def test_solve_beta_permutation_invariant(seed):
    rng = np.random.default_rng(seed)
    data = random_dataset(rng, n=60)
    preds = NuisancePredictions(0.2 * data.x[:, 0], 0.4 * data.x[:, 0])
    perm = rng.permutation(60)
    data_p = Dataset(data.y[perm], data.a[perm], data.x[perm])
    preds_p = NuisancePredictions(preds.r_hat[perm], preds.m_hat[perm])
    b1, b2 = solve_beta(data, preds), solve_beta(data_p, preds_p)
    if b1.converged:
        assert b2.converged and abs(b1.beta - b2.beta) < 1e-8


# ---------------------------------------------------------------- sandwich

def test_sandwich_hand_arithmetic():
    data, preds = _two_point(0.0)
    assert sandwich_se(data, preds, 0.0) == pytest.approx(math.sqrt(2.0), rel=1e-12)


def test_sandwich_degenerate_derivative():
    data = Dataset([1.0, 0.0], [0.0, 1.0], np.zeros((2, 1)))
    with pytest.raises(NumericalError, match="degenerate score derivative"):
        sandwich_se(data, NuisancePredictions(np.zeros(2), np.zeros(2)), 0.0)


def test_sandwich_duplication_scales_by_root_two(rng):
    data = random_dataset(rng, n=120)
    preds = NuisancePredictions(0.1 * data.x[:, 0], 0.5 * data.x[:, 0])
    beta = solve_beta(data, preds).beta
    se1 = sandwich_se(data, preds, beta)
    d2 = Dataset(np.tile(data.y, 2), np.tile(data.a, 2), np.tile(data.x, (2, 1)))
    p2 = NuisancePredictions(np.tile(preds.r_hat, 2), np.tile(preds.m_hat, 2))
    se2 = sandwich_se(d2, p2, solve_beta(d2, p2).beta)
    assert se2 == pytest.approx(se1 / math.sqrt(2.0), rel=1e-6)


@pytest.mark.slow
def test_sandwich_matches_monte_carlo_sd_with_oracle_nuisances():
    spec = sparse_gaussian_spec(n=2000, p=5, s=3)
    betas, ses = [], []
    for rep in range(500):
        data, truth = gen_conditional_gaussian(spec, seed=derive_seed(77, rep))
        preds = NuisancePredictions(truth.r_values(data.x), truth.m_values(data.x))
        sol = solve_beta(data, preds)
        betas.append(sol.beta)
        ses.append(sandwich_se(data, preds, sol.beta))
    assert np.std(betas, ddof=1) == pytest.approx(np.mean(ses), rel=0.15)


def test_oracle_moment_shrinks_at_root_n():
    spec = sparse_gaussian_spec(n=500, p=5, s=3)
    grid = (500, 2000, 8000)
    rms = []
    for n in grid:
        vals = []
        for rep in range(150):
            data, truth = gen_conditional_gaussian(spec.with_n(n), seed=derive_seed(5, n, rep))
            h, _ = h_terms(data.y, data.a, truth.beta0, truth.r_values(data.x),
                           truth.m_values(data.x))
            vals.append(h.mean())
        rms.append(math.sqrt(np.mean(np.square(vals))))
    slope = np.polyfit(np.log(grid), np.log(rms), 1)[0]
    assert -0.6 <= slope <= -0.4


# ---------------------------------------------------------------- folds, report, seeds

def test_make_folds_examples():
    assert sorted(make_folds(4, 2, 1).sizes()) == [2, 2]
    assert sorted(make_folds(5, 2, 1).sizes()) == [2, 3]
    assert np.array_equal(make_folds(37, 4, 9).assignments, make_folds(37, 4, 9).assignments)
    with pytest.raises(ValidationError):
        make_folds(3, 4, 0)


@given(n=st.integers(2, 300), k=st.integers(2, 12), seed=st.integers(0, 2**32))
def test_make_folds_balanced(n, k, seed):
    if k > n:
        return
    plan = make_folds(n, k, seed)
    sizes = plan.sizes()
    assert sizes.sum() == n and sizes.max() - sizes.min() <= 1 and sizes.min() > 0
    for f in range(1, k + 1):
        assert np.intersect1d(plan.train_index(f), plan.test_index(f)).size == 0


@given(b=finite, se=st.floats(1e-3, 10), level=st.floats(0.5, 0.999))
def test_report_interval(b, se, level):
    rep = EstimateReport.build(b, se, level, "lowdim", True)
    assert rep.ci_lower <= rep.beta_hat <= rep.ci_upper
    assert rep.beta_hat - rep.ci_lower == pytest.approx(rep.ci_upper - rep.beta_hat)


def test_report_validation():
    with pytest.raises(ValidationError):
        EstimateReport.build(0.0, 1.0, 1.5, "lowdim", True)
    with pytest.raises(NumericalError):
        EstimateReport.build(0.0, 0.0, 0.9, "lowdim", True)


def test_derive_seed():
    assert derive_seed(1, 2, "x") == derive_seed(1, 2, "x")
    assert len({derive_seed(1, i) for i in range(100)}) == 100
    assert derive_seed(1, 2**40) != derive_seed(1, 0)
    assert derive_seed(-1) != derive_seed(1)

import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from drlogit.core import Dataset, NumericalError, ValidationError, make_folds
from drlogit.efficiency import (WEIGHT_MAX, WEIGHT_MIN, PhiSpec, build_weights, default_quadrature,
                                phi_opt, phi_opt_values, phi_simp, residual_sigma,
                                weights_from_values)

from .oracles import dense_grid_phi_opt


def test_phi_simp_examples():
    assert phi_simp(0.0) == 0.5
    assert phi_simp(math.log(3)) == pytest.approx(0.75)
    assert phi_simp(-1000.0) == 0.0 and phi_simp(1000.0) == 1.0
    assert np.allclose(phi_simp(np.array([0.0, math.log(3)])), [0.5, 0.75])


@pytest.mark.parametrize("quad", ["binary_closed_form", "gauss_hermite"])
@given(r=st.floats(-5, 5), m=st.floats(0.05, 0.95))
def test_opt_at_zero_beta_is_simp(quad, r, m):
    spec = PhiSpec("opt", quadrature=quad, beta_pilot=0.0, sigma=0.7)
    val = phi_opt_values(np.array([r]), np.array([m]), 0.0, spec)[0]
    assert val == pytest.approx(phi_simp(r), rel=1e-10)


def test_binary_hand_value():
    spec = PhiSpec("opt", quadrature="binary_closed_form", beta_pilot=math.log(2))
    val = phi_opt(np.zeros(2), lambda x: 0.0, lambda x: 0.5, math.log(2), spec)
    assert val == pytest.approx(0.25 / 0.4375, rel=1e-14)


@given(m=st.floats(-2, 2), r=st.floats(-3, 3), beta=st.floats(-1.5, 1.5),
       sigma=st.floats(0.2, 1.5))
def test_gauss_hermite_matches_dense_grid(m, r, beta, sigma):
    spec = PhiSpec("opt", beta_pilot=beta, sigma=sigma)
    val = phi_opt_values(np.array([r]), np.array([m]), beta, spec)[0]
    assert val == pytest.approx(dense_grid_phi_opt(m, r, beta, sigma), rel=1e-6)


def test_tiny_sigma_denominator_error():
    spec = PhiSpec("opt", beta_pilot=0.5, sigma=1e-9)
    with pytest.raises(NumericalError, match="denominator"):
        phi_opt_values(np.zeros(1), np.zeros(1), 0.5, spec)


def test_phi_spec_validation():
    for bad in ({"kind": "best"}, {"quadrature": "simpson"}, {"nodes": 2}, {"kind": "opt"}):
        with pytest.raises(ValidationError):
            PhiSpec(**bad)
    with pytest.raises(ValidationError):
        phi_opt_values(np.zeros(1), np.zeros(1), 0.0, PhiSpec("opt", beta_pilot=0.0))


def _toy(rng, n=40):
    return Dataset(rng.integers(0, 2, n), rng.standard_normal(n), rng.standard_normal((n, 2)))


def test_build_weights(rng):
    data = _toy(rng)
    plan = make_folds(data.n, 2, 0)
    zero = [lambda x: np.zeros(x.shape[0])] * 2
    assert np.all(build_weights(data, plan, zero, zero, PhiSpec("none")) == 1.0)
    assert np.all(build_weights(data, plan, zero, zero, PhiSpec("simp")) == 0.5)
    # fold k rows must use predictor k
    rs = [lambda x: np.full(x.shape[0], 1.0), lambda x: np.full(x.shape[0], -1.0)]
    w = build_weights(data, plan, rs, zero, PhiSpec("simp"))
    assert np.allclose(w[plan.test_index(1)], 1 / (1 + math.e))
    assert np.allclose(w[plan.test_index(2)], 1 / (1 + math.exp(-1)))


@given(r=st.floats(-40, 40), m=st.floats(-3, 3), kind=st.sampled_from(["simp", "opt"]))
def test_weights_positive_and_bounded(r, m, kind):
    spec = PhiSpec(kind, beta_pilot=0.5, sigma=1.0)
    w = weights_from_values(np.array([r]), np.array([m]), spec)
    assert WEIGHT_MIN <= w[0] <= WEIGHT_MAX


def test_residual_sigma_and_quadrature(rng):
    data = Dataset([0, 0, 1], [1.0, 3.0, 9.0], np.zeros((3, 1)))
    assert residual_sigma(data, np.array([0.0, 2.0, 0.0])) == pytest.approx(1.0)
    assert default_quadrature([0.0, 1.0, 1.0]) == "binary_closed_form"
    assert default_quadrature([0.0, 0.5]) == "gauss_hermite"

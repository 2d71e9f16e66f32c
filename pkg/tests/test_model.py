import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from adaptix.model import (
    DEFAULT_BOUNDS,
    INTERIM_GRID,
    Design,
    DoseGrid,
    Profile,
    ThetaSigEmax,
    TrialData,
    emax_gradient,
    emax_mean,
    fisher_information,
    gradient_tensor,
    simulate_responses,
)
from conftest import random_theta
from oracles import cofactor_det, fd_free_gradient, fd_gradient, naive_information

SIG = (0.0, -1.70, 4.0, 5.0)

thetas = st.tuples(
    st.floats(-2, 2),
    st.floats(-5, -0.05),
    st.floats(0.01, 12),
    st.floats(0.5, 10),
)


def test_mean_reference_values():
    assert emax_mean(SIG, 0.0) == 0.0
    assert emax_mean(SIG, 4.0) == pytest.approx(-0.85, abs=1e-12)
    assert emax_mean((0, -1.81, 0.79, 1), 8.0) == pytest.approx(-1.647, abs=1e-3)


def test_mean_vectorized_matches_scalar():
    x = INTERIM_GRID.array
    vec = emax_mean(SIG, x)
    assert vec.shape == x.shape
    assert np.allclose(vec, [emax_mean(SIG, xi) for xi in x], rtol=0, atol=1e-15)


def test_gradient_reference_values():
    g = emax_gradient(SIG, 4.0)
    assert g[0] == 1.0
    assert g[1] == pytest.approx(0.5)
    assert g[3] == pytest.approx(0.0, abs=1e-15)
    assert np.array_equal(emax_gradient(SIG, 0.0), [1.0, 0.0, 0.0, 0.0])


def test_gradient_finite_difference_point():
    th = (0.2, -1.6, 2.5, 1.7)
    assert np.allclose(emax_gradient(th, 3.0), fd_gradient(th, 3.0), rtol=1e-5, atol=1e-9)


def test_gradient_random_points(rng):
    for _ in range(100):
        th = random_theta(rng)
        x = rng.uniform(0.1, 8.0)
        g = emax_gradient(th, x)
        ref = fd_gradient(th, x)
        assert np.allclose(g, ref, rtol=1e-5, atol=1e-7 * np.abs(ref).max())


def test_gradient_tensor_matches_rowwise(rng):
    ths = np.array([random_theta(rng) for _ in range(6)])
    G = gradient_tensor(ths, INTERIM_GRID.array)
    assert G.shape == (6, 17, 4)
    for t in range(6):
        assert np.allclose(G[t], emax_gradient(ths[t], INTERIM_GRID.array), rtol=1e-14, atol=0)


def test_gradient_matches_power_form(rng):
    # an algebraically different expression of the same derivatives
    for _ in range(30):
        th = random_theta(rng)
        x = rng.uniform(0.1, 8.0)
        assert np.allclose(emax_gradient(th, x), fd_free_gradient(th, x), rtol=1e-9, atol=1e-12)


def test_fim_single_dose_is_singular():
    d = Design.on_doses([4.0])
    M = fisher_information(d, SIG)
    assert np.linalg.matrix_rank(M) == 1
    assert abs(cofactor_det(M)) < 1e-15


def test_fim_positive_definite_on_five_doses():
    d = Design.on_doses([0, 1, 2, 4, 8])
    assert cofactor_det(fisher_information(d, SIG)) > 0


def test_fim_matches_double_loop(rng):
    for _ in range(10):
        th = random_theta(rng)
        w = rng.dirichlet(np.ones(17))
        M = fisher_information(Design(INTERIM_GRID, w), th)
        assert np.allclose(M, naive_information(INTERIM_GRID.doses, w, th), rtol=1e-10, atol=1e-14)
        assert np.array_equal(M, M.T)


@settings(max_examples=60, deadline=None)
@given(thetas, st.floats(0, 1), st.integers(0, 2**32 - 1))
def test_fim_linear_in_weights(theta, a, seed):
    r = np.random.default_rng(seed)
    w, v = r.dirichlet(np.ones(17)), r.dirichlet(np.ones(17))
    mix = a * w + (1 - a) * v
    mix /= mix.sum()
    lhs = fisher_information(Design(INTERIM_GRID, mix), theta)
    rhs = a * fisher_information(Design(INTERIM_GRID, w), theta) + (1 - a) * fisher_information(
        Design(INTERIM_GRID, v), theta
    )
    assert np.allclose(lhs, rhs, rtol=1e-10, atol=1e-12)


@settings(max_examples=100, deadline=None)
@given(thetas)
def test_mean_nonincreasing_for_negative_amplitude(theta):
    x = np.linspace(0, 8, 201)
    y = emax_mean(theta, x)
    assert np.all(np.diff(y) <= 1e-13)


@given(thetas, st.floats(0.0, 8.0))
def test_gradient_first_component_is_one(theta, x):
    assert emax_gradient(theta, x)[0] == 1.0


def test_gradient_large_hill_has_no_nans():
    g = emax_gradient((0, -1.7, 0.001, 10.0), INTERIM_GRID.array)
    assert np.all(np.isfinite(g))


@pytest.mark.parametrize("profile", list(Profile))
def test_profiles_zero_at_placebo(profile):
    assert profile.mean(0.0) == 0.0


def test_profile_maximum_effect():
    for p in (Profile.LINEAR, Profile.QUADRATIC):
        assert p.mean(8.0) == pytest.approx(-1.65 if p is Profile.LINEAR else -1.65 * (8 / 3 - 64 / 36), abs=1e-12)
    assert Profile.parse("SigEmax") is Profile.SIGEMAX
    with pytest.raises(ValueError):
        Profile.parse("logistic")


def test_theta_validation():
    with pytest.raises(ValueError):
        ThetaSigEmax(0, -1, 0.0, 1)
    with pytest.raises(ValueError):
        ThetaSigEmax(0, -1, 1, math.nan)
    t = ThetaSigEmax(*SIG)
    assert ThetaSigEmax.from_array(t.as_array()) == t
    assert DEFAULT_BOUNDS.contains(t)
    assert DEFAULT_BOUNDS.upper[2] == pytest.approx(12.0)


def test_design_validation():
    with pytest.raises(ValueError):
        Design(INTERIM_GRID, np.full(17, 0.1))
    with pytest.raises(ValueError):
        DoseGrid((0.0, 2.0, 1.0))
    d = Design.uniform(INTERIM_GRID)
    with pytest.raises(ValueError):
        d.weights[0] = 0.5


def test_simulation_noiseless_limit():
    r = np.random.default_rng(1)
    data = simulate_responses(Profile.SIGEMAX, [0, 2, 4, 8], [3, 3, 3, 3], 1e-20, r)
    assert np.allclose(data.responses, emax_mean(SIG, data.doses), atol=1e-8)


def test_simulation_determinism():
    a = simulate_responses(Profile.QUADRATIC, [0, 4, 8], [5, 5, 5], 4.5, np.random.default_rng(9))
    b = simulate_responses(Profile.QUADRATIC, [0, 4, 8], [5, 5, 5], 4.5, np.random.default_rng(9))
    assert a.doses.tobytes() == b.doses.tobytes()
    assert a.responses.tobytes() == b.responses.tobytes()


def test_simulation_variance():
    data = simulate_responses(Profile.LINEAR, [4.0], [10_000], 4.5, np.random.default_rng(2))
    assert abs(np.var(data.responses, ddof=1) - 4.5) < 0.2


def test_trial_data_stats_and_stages():
    a = TrialData([0, 0, 2], [1.0, 2.0, 3.0], [1, 1, 1])
    b = TrialData([2, 4], [5.0, 6.0], [2, 2])
    both = TrialData.concat([a, b])
    u, n, s1, s2 = both.sufficient_stats()
    assert list(u) == [0, 2, 4]
    assert list(n) == [2, 2, 1]
    assert list(s1) == [3.0, 8.0, 6.0]
    assert list(s2) == [5.0, 34.0, 36.0]
    assert len(both.stage(2)) == 2

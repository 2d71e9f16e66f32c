import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from adaptix.design import (
    ClusteredPosterior,
    InfeasibleRounding,
    NonConvergence,
    Singular,
    _multiplicative_numpy,
    bayes_criterion,
    efficient_round,
    equivalence_certificate,
    log_det,
    log_det_criterion,
    optimize_weights,
    optimize_weights_detailed,
    relative_efficiency,
    standardized_variances,
)
from adaptix.model import INTERIM_GRID, Design, DoseGrid, emax_gradient, fisher_information
from conftest import random_theta
from oracles import cofactor_det, naive_information

SIG = np.array([0.0, -1.70, 4.0, 5.0])
LINEAR_PT = np.array([-0.0396, -4.3053, 12.0, 1.3489])
QUAD_PT = np.array([-0.06617, -1.66107, 1.82286, 1.94817])
DESIGN_B = Design.on_doses([0, 1, 2, 4, 8])


def _posterior(rng, k):
    c = np.array([random_theta(rng) for _ in range(k)])
    return ClusteredPosterior(c, rng.dirichlet(np.ones(k)))


def test_log_det_singular_below_four_doses():
    assert log_det_criterion(Design.on_doses([0, 4, 8]), SIG) == -math.inf
    assert log_det(np.zeros((4, 4))) == -math.inf


def test_log_det_matches_cofactor_oracle():
    val = log_det_criterion(DESIGN_B, SIG)
    ref = math.log(cofactor_det(naive_information(DESIGN_B.grid.doses, DESIGN_B.weights, SIG)))
    assert val == pytest.approx(ref, rel=1e-10)


def test_bayes_criterion_single_and_two_atoms(rng):
    assert bayes_criterion(DESIGN_B, ClusteredPosterior.point_mass(SIG)) == pytest.approx(
        log_det_criterion(DESIGN_B, SIG), rel=1e-14
    )
    a, b = random_theta(rng), random_theta(rng)
    two = ClusteredPosterior(np.array([a, b]), [0.5, 0.5])
    expect = 0.5 * (log_det_criterion(DESIGN_B, a) + log_det_criterion(DESIGN_B, b))
    assert bayes_criterion(DESIGN_B, two) == pytest.approx(expect, rel=1e-12)


def test_bayes_criterion_direct_sum(rng):
    post = _posterior(rng, 10)
    direct = sum(
        a * math.log(cofactor_det(naive_information(DESIGN_B.grid.doses, DESIGN_B.weights, c)))
        for c, a in zip(post.centers, post.weights)
    )
    assert bayes_criterion(DESIGN_B, post) == pytest.approx(direct, rel=1e-10)


def test_equal_weights_merges_duplicates(rng):
    th = np.array([random_theta(rng) for _ in range(3)])
    rows = th[[0, 1, 0, 2, 0, 1]]
    post = ClusteredPosterior.equal_weights(rows)
    assert post.k == 3
    assert sorted(post.weights) == pytest.approx([1 / 6, 2 / 6, 3 / 6])
    plain = np.mean([log_det_criterion(DESIGN_B, r) for r in rows])
    assert bayes_criterion(DESIGN_B, post) == pytest.approx(plain, rel=1e-12)


def test_optimum_certificate_and_table3_cells():
    d = optimize_weights(INTERIM_GRID, LINEAR_PT)
    m = equivalence_certificate(d, LINEAR_PT)
    assert 4.0 - 1e-9 <= m <= 4 * (1 + 1e-4)
    a = Design.on_doses([0, 2, 4, 6, 8])
    assert relative_efficiency(a, LINEAR_PT, INTERIM_GRID) == pytest.approx(0.91, abs=0.03)
    c = Design.on_doses([0, 6, 7, 7.5, 8])
    assert relative_efficiency(c, QUAD_PT, INTERIM_GRID) == pytest.approx(0.03, abs=0.02)


def test_uniform_is_suboptimal_and_trace_identity(rng):
    u = Design.uniform(INTERIM_GRID)
    assert standardized_variances(u, SIG).max() > 4
    for _ in range(5):
        th = random_theta(rng)
        w = rng.dirichlet(np.ones(17))
        d = Design(INTERIM_GRID, w)
        assert float(w @ standardized_variances(d, th)) == pytest.approx(4.0, rel=1e-10)


def test_standardized_variance_singular():
    with pytest.raises(Singular):
        standardized_variances(Design.on_doses([0, 4, 8]), SIG)


def test_numba_optimizer_matches_numpy_oracle(rng):
    for _ in range(5):
        th = random_theta(rng)
        G = emax_gradient(th, INTERIM_GRID.array)
        ref = _multiplicative_numpy(G, 1e-9, 500_000)
        got = optimize_weights(INTERIM_GRID, th, tol=1e-9, max_iter=500_000, prune=0.0).weights
        # near the optimum the criterion is flat, so compare information not weights
        Mr = fisher_information(Design(INTERIM_GRID, ref / ref.sum()), th)
        Mg = fisher_information(Design(INTERIM_GRID, got), th)
        assert log_det(Mg) == pytest.approx(log_det(Mr), abs=1e-7)


def test_iterates_monotone_and_on_simplex(rng):
    for objective in (random_theta(rng), _posterior(rng, 10)):
        res = optimize_weights_detailed(INTERIM_GRID, objective, record=2000)
        f = res.criterion_trace
        assert f.size > 10
        assert np.all(np.diff(f) >= -1e-12)
        W = res.weight_trace
        assert np.all(W >= 0)
        assert np.allclose(W.sum(axis=1), 1.0, atol=1e-12)


def test_non_convergence_returns_best_so_far():
    with pytest.raises(NonConvergence) as err:
        optimize_weights(INTERIM_GRID, SIG, max_iter=3)
    d = err.value.design
    assert isinstance(d, Design)
    assert log_det_criterion(d, SIG) > log_det_criterion(Design.uniform(INTERIM_GRID), SIG)
    assert err.value.max_variance > 4


@settings(max_examples=25, deadline=None)
@given(st.integers(0, 2**32 - 1), st.floats(0.1, 20.0))
def test_argmax_invariant_to_response_scale(seed, c):
    th = random_theta(np.random.default_rng(seed))
    scaled = th.copy()
    scaled[:2] *= c
    a = optimize_weights(INTERIM_GRID, th, tol=1e-9, max_iter=1_000_000).weights
    b = optimize_weights(INTERIM_GRID, scaled, tol=1e-9, max_iter=1_000_000).weights
    assert np.allclose(a, b, atol=1e-6)


@settings(max_examples=25, deadline=None)
@given(st.integers(0, 2**32 - 1))
def test_one_atom_bayes_equals_local(seed):
    th = random_theta(np.random.default_rng(seed))
    a = optimize_weights(INTERIM_GRID, th).weights
    b = optimize_weights(INTERIM_GRID, ClusteredPosterior.point_mass(th)).weights
    assert np.allclose(a, b, atol=1e-8, rtol=0)


def test_rounding_reference_cases():
    four = Design.on_doses([0, 1, 2, 3])
    assert list(efficient_round(four, 100).counts) == [25, 25, 25, 25]
    three = Design.on_doses([0, 4, 8])
    assert list(efficient_round(three, 100).counts) == [34, 33, 33]
    with pytest.raises(InfeasibleRounding):
        efficient_round(three, 2)


def test_rounding_ignores_zero_weights():
    d = Design(INTERIM_GRID, np.r_[0.5, np.zeros(15), 0.5])
    a = efficient_round(d, 11)
    assert a.total == 11
    assert set(np.flatnonzero(a.counts)) == {0, 16}


def _weights_design(raw):
    w = np.array(raw) / sum(raw)
    return Design(DoseGrid(tuple(float(i) for i in range(len(w)))), w / w.sum())


@settings(max_examples=300, deadline=None)
@given(st.lists(st.floats(1e-6, 1.0), min_size=1, max_size=17), st.integers(0, 500))
def test_rounding_divisor_bound(raw, extra):
    # counts are ceil(nu * w_i) for a common multiplier nu in (n - l, n]
    d = _weights_design(raw)
    ell = len(raw)
    n = ell + extra
    c = efficient_round(d, n).counts
    dev = c - n * d.weights
    assert c.sum() == n
    assert c.min() >= 1
    assert np.all(dev < 1 + 1e-9)
    assert np.all(dev > -ell * d.weights - 1e-9)


@settings(max_examples=200, deadline=None)
@given(st.integers(1, 17), st.integers(0, 1000))
def test_rounding_unit_bound_equal_weights(ell, extra):
    d = Design.uniform(DoseGrid(tuple(float(i) for i in range(ell))))
    n = ell + extra
    c = efficient_round(d, n).counts
    assert c.sum() == n
    assert np.all(np.abs(c - n * d.weights) <= 1 + 1e-12)


def test_rounding_keeps_every_support_point():
    # the prescribed start ceil((n - l/2) w) gives each support point a patient,
    # so a dominant weight can lose more than one patient to tiny ones
    d = _weights_design([1.0, 0.25, 0.125])
    c = efficient_round(d, 3).counts
    assert list(c) == [1, 1, 1]
    assert abs(c[0] - 3 * d.weights[0]) > 1


def test_relative_efficiency_bounds(rng):
    opt = optimize_weights(INTERIM_GRID, SIG)
    assert relative_efficiency(opt, SIG, INTERIM_GRID) == pytest.approx(1.0, abs=1e-5)
    assert relative_efficiency(Design.on_doses([0, 4, 8]), SIG, INTERIM_GRID) == 0.0
    for _ in range(20):
        d = Design(INTERIM_GRID, rng.dirichlet(np.ones(17) * 0.3))
        e = relative_efficiency(d, random_theta(rng), INTERIM_GRID)
        assert 0.0 <= e <= 1.0


def test_fixed_hill_efficiency_uses_three_parameters():
    emax = np.array([0.0, -1.81, 0.79, 1.0])
    a = Design.on_doses([0, 2, 4, 6, 8])
    e3 = relative_efficiency(a, emax, INTERIM_GRID, fixed_hill=True)
    e4 = relative_efficiency(a, emax, INTERIM_GRID)
    assert e3 == pytest.approx(0.62, abs=0.03)
    assert e3 != pytest.approx(e4, abs=1e-3)

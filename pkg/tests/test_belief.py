import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from privutil.belief import (BeliefDistribution, CandidateUniverse, GaussianEmission,
                             IndependentLikelihood, TabularLikelihood, bayesian_privacy_leakage,
                             compute_xi, dp_epsilon_check, marginal_belief, posterior,
                             posterior_matrix, prior_belief, sobol_grid, system_leakage)
from privutil.divergence import DiagGaussian, DiscretePMF, sqrt_js


def two_candidates():
    return CandidateUniverse(["a", "b"])


# Releases are row indices of the table; columns are candidates.
TABLE = TabularLikelihood([[0.9, 0.1], [0.1, 0.9], [0.5, 0.5]])


def test_universe_validation():
    with pytest.raises(ValueError):
        CandidateUniverse(["only"])
    with pytest.raises(ValueError):
        CandidateUniverse(list(range(5)), cap=4)
    with pytest.raises(ValueError):
        CandidateUniverse(["a", "b"], prior=[1.0, 0.0])
    with pytest.raises(ValueError):
        CandidateUniverse(["a", "b"], prior=[0.2, 0.3, 0.5])


def test_belief_rejects_unknown_provenance():
    with pytest.raises(ValueError):
        BeliefDistribution(DiscretePMF([0.5, 0.5]), "guess")


def test_uninformative_likelihood_keeps_prior():
    u = CandidateUniverse([0, 1, 2], prior=[0.2, 0.3, 0.5])
    post = posterior(np.zeros(2), u, IndependentLikelihood(3))
    np.testing.assert_allclose(post.mass, [0.2, 0.3, 0.5], atol=1e-15)


def test_two_candidate_bayes_rule():
    post = posterior(0, two_candidates(), TABLE)
    np.testing.assert_allclose(post.mass, [0.9, 0.1], atol=1e-15)
    assert post.provenance == "posterior"


def test_near_delta_likelihood_concentrates():
    means = np.array([[0.0], [1.0], [2.0]])
    post = posterior([1.0], CandidateUniverse([0, 1, 2]), GaussianEmission(means, 0.01))
    assert post.mass[1] >= 1 - 1e-6


def test_posterior_survives_likelihood_underflow():
    # joint densities underflow in linear space but not in log space
    means = np.array([[0.0], [1.0]])
    post = posterior([400.0], two_candidates(), GaussianEmission(means, 0.01))
    assert post.mass[1] == pytest.approx(1.0)


def test_mismatched_likelihood_rejected():
    with pytest.raises(ValueError):
        posterior(0, CandidateUniverse([0, 1, 2]), TABLE)


def test_marginal_examples():
    u = two_candidates()
    assert np.allclose(marginal_belief(np.zeros((5, 1)), u, IndependentLikelihood(2)).mass,
                       u.prior.mass, atol=1e-15)
    single = marginal_belief(np.array([0]), u, TABLE)
    np.testing.assert_allclose(single.mass, [0.9, 0.1], atol=1e-15)
    both = marginal_belief(np.array([0, 2]), u, TABLE)
    # average of (0.9, 0.1) and (0.5, 0.5)
    np.testing.assert_allclose(both.mass, [0.7, 0.3], atol=1e-15)
    with pytest.raises(ValueError):
        marginal_belief(np.empty((0, 1)), u, TABLE)


def test_marginal_weighted_and_gaussian():
    u = two_candidates()
    weighted = marginal_belief(np.array([0, 1]), u, TABLE, weights=[3.0, 1.0])
    np.testing.assert_allclose(weighted.mass, [0.7, 0.3], atol=1e-15)
    em = GaussianEmission([[0.0], [1.0]], 0.5)
    with pytest.raises(ValueError):
        marginal_belief(DiagGaussian([0.0], [1.0]), u, em)
    f = marginal_belief(DiagGaussian([0.0], [1.0]), u, em, rng=np.random.default_rng(0))
    assert f.n_samples == 4096
    assert f.mass[0] > 0.5


def test_xi_examples():
    u = two_candidates()
    assert compute_xi(u, IndependentLikelihood(2), np.zeros((3, 1))) == 0.0
    lik = TabularLikelihood([[0.9, 0.1]])
    xi = compute_xi(u, lik, np.array([0]))
    # the favoured candidate moves by ln(0.9/0.5); the other by |ln(0.1/0.5)|, which dominates
    assert xi == pytest.approx(max(math.log(0.9 / 0.5), abs(math.log(0.1 / 0.5))), abs=1e-15)
    assert math.log(0.9 / 0.5) == pytest.approx(0.5877867, abs=1e-7)
    assert xi == pytest.approx(1.6094379, abs=1e-7)


def test_leakage_examples():
    u = two_candidates()
    prior = prior_belief(u)
    assert bayesian_privacy_leakage(prior, prior) == 0.0
    assert bayesian_privacy_leakage(DiscretePMF([1, 0]), DiscretePMF([0, 1])) == pytest.approx(
        math.sqrt(math.log(2)), abs=1e-15)
    fa = DiscretePMF([0.9, 0.1])
    assert bayesian_privacy_leakage(fa, prior) == sqrt_js(fa, prior.pmf)
    with pytest.raises(ValueError):
        bayesian_privacy_leakage(DiscretePMF([1.0]), prior)
    assert system_leakage([0.1, 0.3]) == pytest.approx(0.2)
    with pytest.raises(ValueError):
        system_leakage([])


def test_dp_check_examples():
    u = two_candidates()
    flat = dp_epsilon_check(u, IndependentLikelihood(2), np.zeros((4, 1)))
    assert flat.max_log_ratio == 0.0 and flat.bound == 0.0 and flat.passed
    chk = dp_epsilon_check(u, TABLE, np.array([0, 1, 2]))
    assert chk.bound == pytest.approx(2 * math.log(5.0), abs=1e-15)
    assert chk.max_log_ratio <= chk.bound
    assert chk.passed


def test_sobol_grid_spans_box():
    g = sobol_grid([-1.0, 2.0], [1.0, 3.0], 64)
    assert g.shape == (64, 2)
    assert np.all(g >= [-1.0, 2.0]) and np.all(g <= [1.0, 3.0])
    np.testing.assert_array_equal(g, sobol_grid([-1.0, 2.0], [1.0, 3.0], 64))


likelihood_tables = st.integers(2, 8).flatmap(
    lambda m: st.lists(st.lists(st.floats(1e-3, 1.0), min_size=m, max_size=m), min_size=1, max_size=32))


@given(likelihood_tables)
def test_posteriors_are_normalised(table):
    lik = TabularLikelihood(table)
    u = CandidateUniverse(list(range(lik.n_candidates)))
    post = posterior_matrix(np.arange(len(table)), u, lik)
    np.testing.assert_allclose(post.sum(axis=1), 1.0, atol=1e-12)
    assert np.all(post >= 0)


@given(likelihood_tables)
def test_max_log_ratio_within_twice_xi(table):
    lik = TabularLikelihood(table)
    u = CandidateUniverse(list(range(lik.n_candidates)))
    chk = dp_epsilon_check(u, lik, np.arange(len(table)))
    assert chk.passed
    assert chk.max_log_ratio <= 2 * compute_xi(u, lik, np.arange(len(table))) + 1e-12

"""How much does one observed release tell an attacker?

Walks through a two-candidate example: the prior, the posterior after one
release, the leakage as a √JS distance, and the largest log-ratio that bounds
how far any release can move the belief.

    python3 demos/leakage_basics.py
"""
import math

import numpy as np

from privutil.belief import (CandidateUniverse, TabularLikelihood, bayesian_privacy_leakage,
                             compute_xi, dp_epsilon_check, posterior, prior_belief)
from privutil.divergence import tv_discrete

# Two candidate datasets, equally likely a priori.
universe = CandidateUniverse(["alice-data", "bob-data"])
prior = prior_belief(universe)

# Three possible releases (rows): one points at alice, one at bob, one is uninformative.
likelihood = TabularLikelihood([[0.9, 0.1],
                                [0.1, 0.9],
                                [0.5, 0.5]])

for release in range(3):
    post = posterior(release, universe, likelihood)
    leak = bayesian_privacy_leakage(post.pmf, prior)
    print(f"release {release}: posterior {np.round(post.mass, 3)}  leakage {leak:.4f}")

# The worst log-ratio over releases and candidates caps every posterior shift.
xi = compute_xi(universe, likelihood, np.arange(3))
print(f"max |log posterior/prior| = {xi:.4f} (ln 5 = {math.log(5):.4f})")

check = dp_epsilon_check(universe, likelihood, np.arange(3))
print(f"largest log-ratio between two releases {check.max_log_ratio:.4f} <= {check.bound:.4f}")

# Protection moves the distribution of releases; TV measures by how much.
unprotected, protected = [0.8, 0.1, 0.1], [0.4, 0.3, 0.3]
print(f"TV between release laws: {tv_discrete(unprotected, protected).value:.2f}")

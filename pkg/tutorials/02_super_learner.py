"""Super Learner on one cluster's measurement mechanism."""

import numpy as np

from twostage_tmle import DesignSpec, SimParams, fit_glm, fit_super_learner, generate_trial
from twostage_tmle.stage1 import default_library

c = generate_trial(SimParams(), seed=3).clusters[0]
X = c.covariates()

# a single main-terms logistic regression
glm = fit_glm(DesignSpec.main_terms(["w1", "w2", "w3"]), "binomial-logit", X, c.delta)
print("coefficients:", np.round(glm.coefficients, 3), "converged:", glm.converged)

# mean, main terms and pairwise interactions, stacked by 10-fold CV
lib = default_library(["w1", "w2", "w3"], c.n)
sl = fit_super_learner(lib, X, c.delta, k=10, seed=1)
print("cv risk per candidate:", np.round(sl.cv_risk, 5))
print("ensemble weights:     ", np.round(sl.weights, 3))

p = sl.predict(X)
print("fitted P(delta=1) range:", p.min().round(3), p.max().round(3))

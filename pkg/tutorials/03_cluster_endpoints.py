"""Cluster-level endpoint estimates from the four Stage-1 methods."""

from twostage_tmle import SimParams, generate_trial
from twostage_tmle.simgen import counterfactual_endpoints
from twostage_tmle.stage1 import METHODS, estimate_endpoint

trial = generate_trial(SimParams(), seed=3)

for c in trial.clusters[:3]:
    truth = counterfactual_endpoints(c)[c.a]  # sample endpoint under the assigned arm
    print(f"cluster {c.id} (arm {c.a}), sample truth {truth:.3f}")
    for m in METHODS:
        ep = estimate_endpoint(c, m, seed=1)
        print(f"  {m:<11} {ep.estimate:.3f}  se {ep.se:.4f}")

"""Stage 2: arm-level effect with adaptive prespecification of the adjustment set."""

from twostage_tmle import (EstimatorConfig, SimParams, aps_select, estimate_effect_tmle, estimate_effect_unadjusted,
                           generate_trial)
from twostage_tmle.harness import cluster_level_data, run_stage1

trial = generate_trial(SimParams(), seed=21)
cfg = EstimatorConfig("TMLE/TMLE", "tmle", "tmle-aps")
rows = cluster_level_data(trial, run_stage1(trial, cfg, seed=1))
print("clusters with an endpoint:", rows.j)

sel = aps_select(rows, seed=1)
print("selected:", sel.label, "cv risk", f"{sel.cv_risk:.3g}")

for est in (estimate_effect_unadjusted(rows), estimate_effect_tmle(rows, sel)):
    print(f"{est.method:<11} {est.psi:+.4f}  ({est.ci_lo:+.4f}, {est.ci_hi:+.4f})  p={est.p_value:.3f}")

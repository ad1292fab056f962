"""Post-baseline covariate L: arm affects Y1* membership, so the strata differ by arm."""

from twostage_tmle import ExtendedParams, SimParams, generate_trial, generate_trial_extended
from twostage_tmle.simgen import membership_invariance_violations

base = SimParams()
ext = SimParams(extended=ExtendedParams())

print("violations, base DGP:    ", membership_invariance_violations(generate_trial(base, 5)))
print("violations, extended DGP:", membership_invariance_violations(generate_trial_extended(ext, 5)))

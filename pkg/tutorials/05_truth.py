"""The true effect by Monte Carlo over a large pool of clusters."""

from twostage_tmle import SimParams, compute_truth
from twostage_tmle.simgen import truth_seed

truth = compute_truth(SimParams(), truth_seed(1))
print(f"psi* = {truth.psi_star:.4f} (MC SE {truth.se:.4f})")
print(f"mean endpoint treated {truth.yc1_mean:.4f}, control {truth.yc0_mean:.4f}")

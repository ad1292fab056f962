"""A small simulation study across the five estimator pairs.

The full study is ``twostage-tmle table1 --reps 1000``; 20 replicates keep this
under a few minutes.
"""

from twostage_tmle import STANDARD_ESTIMATORS, SimParams, aggregate_metrics, compute_truth, run_replicates
from twostage_tmle.harness import format_table
from twostage_tmle.simgen import truth_seed

params = SimParams()
truth = compute_truth(params, truth_seed(1))
results = run_replicates(params, STANDARD_ESTIMATORS, reps=20, seed=1)
print(format_table(aggregate_metrics(results, truth)))

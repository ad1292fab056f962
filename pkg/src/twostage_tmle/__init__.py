"""Two-Stage TMLE for counterfactual strata effects in cluster randomized trials."""

from .data import ClusterRecord, TrialData, load_trial_csv, validate, write_trial_csv
from .harness import (STANDARD_ESTIMATORS, EstimatorConfig, ReplicateResult, SimulationMetrics, aggregate_metrics,
                      analyze_trial, run_replicates)
from .learners import DesignSpec, fit_glm, fit_super_learner, make_folds
from .simgen import ExtendedParams, SimParams, TruthResult, compute_truth, generate_trial, generate_trial_extended
from .stage1 import ClusterEndpoint, estimate_endpoint, estimate_endpoint_tmle
from .stage2 import ApsSelection, ClusterLevelData, EffectEstimate, aps_select, estimate_effect_tmle, \
    estimate_effect_unadjusted, inference_t

__version__ = "0.1.0"

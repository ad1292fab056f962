"""Simulated cluster-randomized trials with counterfactuals.

The base process: cluster latents and covariates, individual covariates,
randomized arm, target-population status Y1* (unaffected by arm), a
W3-switched measurement mechanism, and an outcome that can only be 1 for
measured members of the target population. Counterfactuals under both arms
share every uniform draw, so ``delta(a)`` and ``Y2(a)`` are jointly defined.

The extended process inserts a post-baseline covariate L (affected by the arm)
ahead of Y1*, measurement and outcome. Its coefficients are configuration
defaults, not published values.

Random draws for a cluster come from a stream derived from
``(seed, cluster index)``; within a cluster they are consumed in this order:
U_E1, U_E2, E1, E2, N, W1, W2, W3, U_A, U_Y1*, U_delta, U_Y2, and finally U_L
(extended only). Keeping U_L last means an extended run with all L terms zero
reproduces the base data exactly.
"""

from __future__ import annotations

import dataclasses
import json
import os
from dataclasses import dataclass, field
from typing import Any

import numpy as np
from scipy.special import expit

from .data import ClusterLatents, ClusterRecord, TrialData
from .seeding import derive_seed, rng_for


@dataclass(frozen=True)
class TargetModel:
    """Logistic model for target-population membership Y1*."""

    intercept: float = -0.8
    e1: float = 0.3
    e2: float = 0.15
    w1: float = 2.0
    w2: float = 1.5
    w3: float = -3.0
    u_e1: float = 0.55
    u_e2: float = 0.15


@dataclass(frozen=True)
class MeasurementBranch:
    intercept: float
    a: float
    w1: float
    w2_a: float
    w3: float
    e1: float
    e2: float
    u_e1: float
    u_e2: float


@dataclass(frozen=True)
class MeasurementModel:
    """Mixture of two logistic models selected by W3.

    ``constant``, when set, replaces the mechanism by P(delta=1) = constant for
    everyone (measurement completely at random).
    """

    w3_one: MeasurementBranch = MeasurementBranch(0.1, 0.8, -2.0, 0.8, 0.75, -0.75, 0.75, -0.15, 0.15)
    w3_zero: MeasurementBranch = MeasurementBranch(0.1, 0.8, 2.0, -0.8, -0.75, 0.75, -0.75, 0.15, -0.15)
    constant: float | None = None


@dataclass(frozen=True)
class OutcomeModel:
    """Logistic model for Y2 among measured members of the target population."""

    intercept: float = 0.2
    a: float = 0.08
    w1: float = 0.5
    w2: float = 0.4
    e1: float = -2.0
    e2: float = 0.87
    a_w3: float = -0.08


@dataclass(frozen=True)
class ExtendedParams:
    """Post-baseline covariate L and its entry into the downstream equations.

    L is binary, ``L = 1[U_L < expit(l_intercept + l_a*A + l_w1*W1 + l_w2*W2 + l_e1*E1)]``.
    ``y1star_a`` is a direct arm effect on Y1*; the ``*_l`` terms add ``coef*L``
    to the Y1*, measurement (both branches) and outcome linear predictors.
    """

    l_intercept: float = -0.5
    l_a: float = 1.5
    l_w1: float = 0.5
    l_w2: float = -0.5
    l_e1: float = 0.2
    y1star_l: float = 1.0
    y1star_a: float = 0.0
    delta_l: float = 0.75
    y2_l: float = -0.5


@dataclass(frozen=True)
class SimParams:
    j: int = 150
    n_mean: float = 100.0
    n_sd: float = 10.0
    n_min: int = 2
    u_e1_high: float = 1.0
    u_e2_high: float = 0.5
    e_sd: float = 1.0
    w1_low: float = 18.0
    w1_high: float = 60.0
    p_w2: float = 0.6
    p_w3: float = 0.65
    p_arm: float = 0.5
    target: TargetModel = field(default_factory=TargetModel)
    measurement: MeasurementModel = field(default_factory=MeasurementModel)
    outcome: OutcomeModel = field(default_factory=OutcomeModel)
    truth_clusters: int = 5000
    extended: ExtendedParams | None = None

    def __post_init__(self):
        if self.n_mean <= 0:
            raise ValueError("n_mean must be positive")
        if self.n_sd < 0:
            raise ValueError("n_sd must be nonnegative")
        if self.j < 1:
            raise ValueError("j must be at least 1")
        if self.truth_clusters < 1000:
            raise ValueError("truth_clusters must be at least 1000")
        if self.n_min < 2:
            raise ValueError("n_min must be at least 2")

    def to_dict(self) -> dict[str, Any]:
        return dataclasses.asdict(self)

    @classmethod
    def from_dict(cls, d: dict[str, Any] | None) -> "SimParams":
        return _from_dict(cls, d or {})


def _from_dict(cls, d: dict[str, Any]):
    """Build dataclass ``cls`` from a (possibly partial) nested dict, defaults elsewhere."""
    base = cls() if cls is not MeasurementBranch else None
    kwargs = {}
    names = {f.name: f for f in dataclasses.fields(cls)}
    for key, value in d.items():
        if key not in names:
            raise ValueError(f"unknown parameter {key!r} for {cls.__name__}")
        sub = _NESTED.get((cls, key))
        if sub is not None and value is not None:
            if sub is MeasurementBranch:
                current = dataclasses.asdict(getattr(base, key))
                current.update(value)
                value = MeasurementBranch(**current)
            else:
                value = _from_dict(sub, value)
        kwargs[key] = value
    return dataclasses.replace(base, **kwargs) if base is not None else cls(**kwargs)


_NESTED = {
    (SimParams, "target"): TargetModel,
    (SimParams, "measurement"): MeasurementModel,
    (SimParams, "outcome"): OutcomeModel,
    (SimParams, "extended"): ExtendedParams,
    (MeasurementModel, "w3_one"): MeasurementBranch,
    (MeasurementModel, "w3_zero"): MeasurementBranch,
}


def load_params(path: str | os.PathLike) -> SimParams:
    """Read :class:`SimParams` from JSON; a top-level ``"sim"`` key is also accepted."""
    with open(path) as fh:
        cfg = json.load(fh)
    return SimParams.from_dict(cfg.get("sim", cfg) if isinstance(cfg, dict) else cfg)


# ---------------------------------------------------------------------------
# structural equations


def target_probability(m: TargetModel, e1, e2, u_e1, u_e2, w1, w2, w3, l=None, a=None,
                       ext: ExtendedParams | None = None) -> np.ndarray:
    eta = (m.intercept + m.e1 * e1 + m.e2 * e2 + m.w1 * w1 + m.w2 * w2 + m.w3 * w3
           + m.u_e1 * u_e1 + m.u_e2 * u_e2)
    if ext is not None:
        eta = eta + ext.y1star_l * l + ext.y1star_a * a
    return expit(eta)


def _branch_eta(b: MeasurementBranch, a, e1, e2, u_e1, u_e2, w1, w2, w3):
    return (b.intercept + b.a * a + b.w1 * w1 + b.w2_a * w2 * a + b.w3 * w3
            + b.e1 * e1 + b.e2 * e2 + b.u_e1 * u_e1 + b.u_e2 * u_e2)


def measurement_probability(m: MeasurementModel, a, e1, e2, u_e1, u_e2, w1, w2, w3, l=None,
                            ext: ExtendedParams | None = None) -> np.ndarray:
    w1 = np.asarray(w1, dtype=float)
    if m.constant is not None:
        return np.full(w1.shape, float(m.constant))
    shift = 0.0 if ext is None else ext.delta_l * l
    p1 = expit(_branch_eta(m.w3_one, a, e1, e2, u_e1, u_e2, w1, w2, w3) + shift)
    p0 = expit(_branch_eta(m.w3_zero, a, e1, e2, u_e1, u_e2, w1, w2, w3) + shift)
    return w3 * p1 + (1 - w3) * p0


def outcome_probability(m: OutcomeModel, a, e1, e2, w1, w2, w3, l=None,
                        ext: ExtendedParams | None = None) -> np.ndarray:
    eta = (m.intercept + m.a * a + m.w1 * w1 + m.w2 * w2 + m.e1 * e1 + m.e2 * e2
           + m.a_w3 * a * w3)
    if ext is not None:
        eta = eta + ext.y2_l * l
    return expit(eta)


def l_probability(ext: ExtendedParams, a, e1, w1, w2) -> np.ndarray:
    return expit(ext.l_intercept + ext.l_a * a + ext.l_w1 * w1 + ext.l_w2 * w2 + ext.l_e1 * e1)


@dataclass(frozen=True)
class ClusterDraw:
    """Everything generated for one cluster, including the cluster latents.

    The latents ``u_e1``/``u_e2`` are needed to evaluate the true nuisance
    functions in tests; :class:`ClusterRecord` deliberately omits them.
    """

    record: ClusterRecord
    u_e1: float
    u_e2: float


def _cluster_size(params: SimParams, rng: np.random.Generator) -> int:
    n = int(np.rint(rng.normal(params.n_mean, params.n_sd)))
    return max(n, params.n_min)


def simulate_cluster(params: SimParams, rng: np.random.Generator, cluster_id: str = "0",
                     arm: int | None = None) -> ClusterDraw:
    """Draw one cluster; ``arm`` overrides the randomized assignment (draws are unchanged)."""
    u_e1 = rng.uniform(0.0, params.u_e1_high)
    u_e2 = rng.uniform(0.0, params.u_e2_high)
    e1 = rng.normal(u_e1, params.e_sd)
    e2 = rng.normal(u_e2, params.e_sd)
    n = _cluster_size(params, rng)
    w1 = (rng.uniform(params.w1_low, params.w1_high, n) - params.w1_low) / (params.w1_high - params.w1_low)
    w2 = (rng.uniform(size=n) < params.p_w2).astype(np.int8)
    w3 = (rng.uniform(size=n) < params.p_w3).astype(np.int8)
    a = int(rng.uniform() < params.p_arm)
    if arm is not None:
        a = int(arm)
    u_y1 = rng.uniform(size=n)
    u_delta = rng.uniform(size=n)
    u_y2 = rng.uniform(size=n)
    ext = params.extended
    u_l = rng.uniform(size=n) if ext is not None else None

    l_cf = y1s_cf = None
    delta_cf, y2_cf = [], []
    if ext is None:
        y1_star = (u_y1 < target_probability(params.target, e1, e2, u_e1, u_e2, w1, w2, w3)).astype(np.int8)
    else:
        l_cf, y1s_cf = [], []
    for arm_value in (0, 1):
        l_a = None
        if ext is not None:
            l_a = (u_l < l_probability(ext, arm_value, e1, w1, w2)).astype(float)
            y1s_a = (u_y1 < target_probability(params.target, e1, e2, u_e1, u_e2, w1, w2, w3,
                                               l=l_a, a=arm_value, ext=ext)).astype(np.int8)
            l_cf.append(l_a)
            y1s_cf.append(y1s_a)
        else:
            y1s_a = y1_star
        d = (u_delta < measurement_probability(params.measurement, arm_value, e1, e2, u_e1, u_e2,
                                               w1, w2, w3, l=l_a, ext=ext)).astype(np.int8)
        p_y2 = outcome_probability(params.outcome, arm_value, e1, e2, w1, w2, w3, l=l_a, ext=ext)
        y2 = (d * y1s_a * (u_y2 < p_y2)).astype(np.int8)
        delta_cf.append(d)
        y2_cf.append(y2)

    if ext is not None:
        y1_star = y1s_cf[a]
        latents = ClusterLatents(y1_star, delta_cf[0], delta_cf[1], y2_cf[0], y2_cf[1], y1s_cf[0], y1s_cf[1])
        l_obs = l_cf[a]
    else:
        latents = ClusterLatents(y1_star, delta_cf[0], delta_cf[1], y2_cf[0], y2_cf[1])
        l_obs = None
    delta = delta_cf[a]
    record = ClusterRecord(cluster_id, e1, e2, a, w1, w2, w3, delta, delta * y1_star, y2_cf[a],
                           l=l_obs, latents=latents)
    return ClusterDraw(record, float(u_e1), float(u_e2))


def generate_cluster(params: SimParams, rng: np.random.Generator, cluster_id: str = "0") -> ClusterRecord:
    return simulate_cluster(params, rng, cluster_id).record


def cluster_rng(seed: int, index: int) -> np.random.Generator:
    """Stream for cluster ``index`` of the trial generated with ``seed``."""
    return rng_for(seed, "cluster", index)


def generate_trial(params: SimParams, seed: int) -> TrialData:
    """Generate ``params.j`` independent clusters with ids ``"1"`` .. ``str(j)``."""
    return TrialData(tuple(generate_cluster(params, cluster_rng(seed, j), str(j))
                           for j in range(1, params.j + 1)))


def generate_trial_extended(params: SimParams, seed: int) -> TrialData:
    if params.extended is None:
        raise ValueError("extended parameters are required")
    return generate_trial(params, seed)


@dataclass(frozen=True)
class TruthResult:
    psi_star: float
    yc1_mean: float
    yc0_mean: float
    clusters_used: int
    clusters_dropped: int
    se: float  # Monte Carlo SE of psi_star over the truth population

    def to_dict(self) -> dict[str, Any]:
        return dataclasses.asdict(self)


def counterfactual_endpoints(c: ClusterRecord) -> tuple[float, float]:
    """Y^c*(0), Y^c*(1): mean of Y2(a) among members with Y1*(a) = 1 (nan if none)."""
    out = []
    for a in (0, 1):
        y1s = c.latents.y1_star_cf(a)
        k = int(y1s.sum())
        out.append(float(c.latents.y2_cf(a)[y1s == 1].sum() / k) if k else float("nan"))
    return out[0], out[1]


def compute_truth(params: SimParams, seed: int) -> TruthResult:
    """Average counterfactual endpoint difference over ``params.truth_clusters`` clusters."""
    diffs, y1s, y0s = [], [], []
    dropped = 0
    for j in range(1, params.truth_clusters + 1):
        c = generate_cluster(params, cluster_rng(seed, j), str(j))
        y0, y1 = counterfactual_endpoints(c)
        if np.isnan(y0) or np.isnan(y1):
            dropped += 1
            continue
        y0s.append(y0)
        y1s.append(y1)
        diffs.append(y1 - y0)
    if not diffs:
        raise ValueError("every truth cluster lacks target-population members; check the parameters")
    diffs = np.asarray(diffs)
    se = float(np.std(diffs, ddof=1) / np.sqrt(diffs.size)) if diffs.size > 1 else float("nan")
    m1, m0 = float(np.mean(y1s)), float(np.mean(y0s))
    return TruthResult(m1 - m0, m1, m0, int(diffs.size), dropped, se)


def truth_seed(seed: int) -> int:
    return derive_seed(seed, "truth")


def membership_invariance_violations(data: TrialData) -> int:
    """Number of simulated individuals whose target membership differs between arms.

    Zero under the base process, where the arm cannot affect Y1*. Requires
    simulated latents.
    """
    if not data.has_latents:
        raise ValueError("membership check needs simulated latent columns")
    return sum(int(np.sum(c.latents.y1_star_cf(0) != c.latents.y1_star_cf(1))) for c in data.clusters)

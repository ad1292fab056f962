"""Cluster-level endpoint estimation.

Each cluster's endpoint is the probability of the outcome among members of the
target population. The ratio estimators write it as

    P(Y2 = 1) / P(Y1* = 1),

estimate the numerator by the observed proportion with the outcome, and the
denominator either by the proportion in the target population among the
measured (``unadjusted``) or by TMLE of E[E(Y1 | delta=1, W)] (``tmle``).
Standard errors come from the delta method applied to the numerator and
denominator influence curves. ``screened`` and ``eligible`` are the naive
subset means and do not estimate the endpoint.
"""

from __future__ import annotations

import logging
import warnings
from dataclasses import dataclass
from typing import Sequence

import numpy as np
from scipy.special import expit, logit

from .data import ClusterRecord
from .learners import MEAN, Candidate, DesignSpec, SuperLearnerFit, fit_super_learner
from .seeding import rng_for

logger = logging.getLogger(__name__)

QBAR_BOUNDS = (0.005, 0.995)
G_LOWER = 0.025
DEN_FLOOR = 0.005
MIN_MEASURED_FOR_INTERACTIONS = 20

METHODS = ("screened", "eligible", "unadjusted", "tmle")


class EndpointUndefined(ValueError):
    """The cluster has no information for this endpoint estimator."""

    def __init__(self, cluster_id, reason):
        super().__init__(f"cluster {cluster_id}: {reason}")
        self.cluster_id = cluster_id


class TargetingError(RuntimeError):
    def __init__(self, score, iterations):
        super().__init__(f"fluctuation did not converge after {iterations} iterations (score {score:.3g})")
        self.score = score


@dataclass(frozen=True, eq=False)
class NuisanceFits:
    qbar: SuperLearnerFit | None
    g: SuperLearnerFit | None
    qbar_star: np.ndarray


@dataclass(frozen=True, eq=False)
class ClusterEndpoint:
    estimate: float
    numerator: float
    denominator: float
    ic: np.ndarray
    se: float
    method: str
    cluster_id: str = ""
    epsilon: float | None = None
    floored: bool = False
    nuisance: NuisanceFits | None = None


def _se(ic: np.ndarray) -> float:
    if ic.size < 2:
        return 0.0
    return float(np.sqrt(np.var(ic, ddof=1) / ic.size))


def _subset_mean_endpoint(c: ClusterRecord, mask: np.ndarray, method: str) -> ClusterEndpoint:
    y = c.y2[mask].astype(float)
    est = float(y.mean())
    ic = y - est
    return ClusterEndpoint(est, est, 1.0, ic, _se(ic), method, c.id)


def estimate_endpoint_screened(c: ClusterRecord) -> ClusterEndpoint:
    """Mean outcome among the measured. The influence curve covers the measured subset only."""
    mask = c.delta == 1
    if not mask.any():
        raise EndpointUndefined(c.id, "no measured individuals")
    return _subset_mean_endpoint(c, mask, "screened")


def estimate_endpoint_eligible(c: ClusterRecord) -> ClusterEndpoint:
    """Mean outcome among those observed in the target population (y1 = 1)."""
    mask = c.y1 == 1
    if not mask.any():
        raise EndpointUndefined(c.id, "no individuals with y1=1")
    return _subset_mean_endpoint(c, mask, "eligible")


def influence_curve_ratio(num: float, den: float, ic_num, ic_den) -> tuple[np.ndarray, float]:
    """Delta-method influence curve and standard error of ``num / den``."""
    if not den > 0:
        raise ValueError(f"denominator must be positive, got {den}")
    ic_num = np.asarray(ic_num, dtype=float)
    ic_den = np.asarray(ic_den, dtype=float)
    if ic_num.shape != ic_den.shape:
        raise ValueError("influence curves must be aligned")
    ic = (ic_num - (num / den) * ic_den) / den
    return ic, _se(ic)


def estimate_endpoint_unadjusted(c: ClusterRecord) -> ClusterEndpoint:
    measured = c.delta == 1
    if not measured.any():
        raise EndpointUndefined(c.id, "no measured individuals")
    y2 = c.y2.astype(float)
    y1 = c.y1.astype(float)
    d = c.delta.astype(float)
    num = float(y2.mean())
    p_measured = float(d.mean())
    den = float(y1[measured].mean())
    if den <= 0:
        raise EndpointUndefined(c.id, "no measured individual is in the target population")
    ic_num = y2 - num
    ic_den = d / p_measured * (y1 - den)
    ic, se = influence_curve_ratio(num, den, ic_num, ic_den)
    return ClusterEndpoint(num / den, num, den, ic, se, "unadjusted", c.id)


def target_denominator(qbar_init, g_hat, delta, y1, tol: float = 1e-10,
                       max_iter: int = 200) -> tuple[np.ndarray, float]:
    """Logistic fluctuation of the initial outcome regression.

    Among the measured, ``logit Q*(W) = logit Q(W) + eps / g(W)`` with ``eps``
    the maximum-likelihood fluctuation, found by Newton's method kept inside a
    bisection bracket. Returns Q* for everyone and ``eps``.
    """
    q = np.asarray(qbar_init, dtype=float)
    g = np.asarray(g_hat, dtype=float)
    d = np.asarray(delta) == 1
    if not d.any():
        raise ValueError("no measured individuals")
    y = np.asarray(y1, dtype=float)[d]
    if np.all(y == 1) or np.all(y == 0):
        # the likelihood is monotone in eps
        raise TargetingError(float("inf"), 0)
    off = logit(q[d])
    h = 1.0 / g[d]

    def score(e):
        return float(np.sum(h * (y - expit(off + e * h))))

    # score is strictly decreasing in eps
    lo, hi = -1.0, 1.0
    while score(lo) < 0:
        lo *= 2.0
    while score(hi) > 0:
        hi *= 2.0
    eps, s = 0.0, score(0.0)
    for _ in range(max_iter):
        if abs(s) < tol:
            break
        if s > 0:
            lo = eps
        else:
            hi = eps
        p = expit(off + eps * h)
        step = s / np.sum(h * h * p * (1 - p))
        cand = eps + step
        if not lo < cand < hi:
            cand = 0.5 * (lo + hi)
        if cand == eps:
            break  # bracket exhausted at machine precision
        eps, s = cand, score(cand)
    if abs(s) > 1e-8 * q.size:
        raise TargetingError(s, max_iter)
    q_star = expit(logit(q) + eps / g)
    return q_star, float(eps)


def default_library(covariates: Sequence[str], n_fit: int | None = None) -> list[Candidate]:
    """Mean, main-terms logistic GLM, and logistic GLM with all pairwise products.

    The interaction candidate is omitted when fewer than 20 observations are
    available to fit it.
    """
    lib: list[Candidate] = [MEAN, DesignSpec.main_terms(covariates)]
    if n_fit is None or n_fit >= MIN_MEASURED_FOR_INTERACTIONS:
        lib.append(DesignSpec.pairwise(covariates))
    return lib


LIBRARIES = ("default", "glm", "mean")


def resolve_library(library, covariates: Sequence[str], n_fit: int) -> list[Candidate]:
    if library is None or library == "default":
        return default_library(covariates, n_fit)
    if library == "glm":
        return [DesignSpec.main_terms(covariates)]
    if library == "mean":
        return [MEAN]
    lib = list(library)
    if n_fit < MIN_MEASURED_FOR_INTERACTIONS:
        lib = [c for c in lib if c is MEAN or all(len(t) < 2 for t in c.terms)] or [MEAN]
    return lib


def tmle_denominator(qbar_init, g_hat, delta, y1) -> tuple[float, np.ndarray, np.ndarray, float]:
    """Targeted denominator, its influence curve, Q* and the fluctuation coefficient."""
    d = np.asarray(delta, dtype=float)
    y = np.asarray(y1, dtype=float)
    g = np.asarray(g_hat, dtype=float)
    q_star, eps = target_denominator(qbar_init, g, d, y)
    den = float(q_star.mean())
    ic = d / g * (y - q_star) + q_star - den
    return den, ic, q_star, eps


def estimate_endpoint_tmle(c: ClusterRecord, library="default", k: int = 10, seed: int = 0,
                           adjust_l: bool = False) -> ClusterEndpoint:
    """TMLE of the endpoint with Super Learner nuisance fits.

    The outcome regression E(Y1 | delta=1, W) is fit on the measured and the
    measurement mechanism P(delta=1 | W) on everyone, each with ``k``-fold
    cross-validation; fold assignment is drawn from a stream derived from
    ``(seed, cluster id)``.
    """
    d = c.delta == 1
    n_meas = int(d.sum())
    if n_meas == 0:
        raise EndpointUndefined(c.id, "no measured individuals")
    if n_meas < 2:
        raise EndpointUndefined(c.id, "fewer than 2 measured individuals")
    cov = c.covariates(adjust_l)
    names = list(cov)
    y1 = c.y1.astype(float)
    y2 = c.y2.astype(float)
    num = float(y2.mean())
    ic_num = y2 - num
    rng = rng_for(seed, "stage1", c.id)
    q_seed, g_seed = rng.integers(0, 2**63, size=2)

    y_meas = y1[d]
    if np.all(y_meas == 0):
        raise EndpointUndefined(c.id, "no measured individual is in the target population")
    if np.all(y_meas == 1):
        # outcome regression is identically 1; nothing to target
        den = 1.0
        ic = ic_num / den
        return ClusterEndpoint(num, num, den, ic, _se(ic), "tmle", c.id, epsilon=0.0)

    cov_meas = {name: v[d] for name, v in cov.items()}
    q_lib = resolve_library(library, names, n_meas)
    q_fit = fit_super_learner(q_lib, cov_meas, y_meas, min(k, n_meas), int(q_seed))
    q_init = np.clip(q_fit.predict(cov, c.n), *QBAR_BOUNDS)

    if d.all():
        g_fit = None
        g_hat = np.ones(c.n)
    else:
        g_lib = resolve_library(library, names, c.n)
        g_fit = fit_super_learner(g_lib, cov, c.delta, min(k, c.n), int(g_seed))
        g_hat = np.clip(g_fit.predict(cov, c.n), G_LOWER, 1.0)

    den, ic_den, q_star, eps = tmle_denominator(q_init, g_hat, c.delta, y1)
    floored = False
    if den < DEN_FLOOR:
        warnings.warn(f"cluster {c.id}: targeted denominator {den:.4g} floored at {DEN_FLOOR}")
        den, floored = DEN_FLOOR, True
    ic, se = influence_curve_ratio(num, den, ic_num, ic_den)
    return ClusterEndpoint(num / den, num, den, ic, se, "tmle", c.id, epsilon=eps, floored=floored,
                           nuisance=NuisanceFits(q_fit, g_fit, q_star))


def estimate_endpoint(c: ClusterRecord, method: str, library="default", k: int = 10, seed: int = 0,
                      adjust_l: bool = False) -> ClusterEndpoint:
    if method == "screened":
        return estimate_endpoint_screened(c)
    if method == "eligible":
        return estimate_endpoint_eligible(c)
    if method == "unadjusted":
        return estimate_endpoint_unadjusted(c)
    if method == "tmle":
        return estimate_endpoint_tmle(c, library, k, seed, adjust_l)
    raise ValueError(f"unknown stage-1 method {method!r}")

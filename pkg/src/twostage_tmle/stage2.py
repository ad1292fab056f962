"""Effect estimation across clusters from Stage-1 endpoints.

Two estimators of the risk difference between arms: the difference of arm
means, and a cluster-level TMLE whose working outcome regression and
propensity score are chosen by Adaptive Pre-specification (cross-validated
squared influence curve, one covariate at most). Inference treats the
clusters as the independent units: variance is the sample variance of the
estimated influence curve over J, with Student-t critical values.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Mapping, Sequence

import numpy as np
from scipy import stats

from .learners import BINOMIAL, GAUSSIAN, DesignSpec, fit_glm, make_folds, predict

COVARIATES = ("e1c", "e2c", "w1c", "w2c", "w3c")
G_BOUNDS = (0.05, 0.95)
KNOWN_PROPENSITY = 0.5


@dataclass(frozen=True, eq=False)
class ClusterLevelData:
    """Stage-2 observed data, one entry per cluster."""

    a: np.ndarray
    y: np.ndarray
    covariates: Mapping[str, np.ndarray]
    ids: tuple[str, ...] = ()

    def __post_init__(self):
        a = np.asarray(self.a, dtype=int)
        y = np.asarray(self.y, dtype=float)
        if a.shape != y.shape:
            raise ValueError("a and y must have the same length")
        if not np.all(np.isfinite(y)):
            raise ValueError("cluster outcomes must be finite")
        if np.any((a != 0) & (a != 1)):
            raise ValueError("arm must be 0 or 1")
        cov = {k: np.asarray(v, dtype=float) for k, v in self.covariates.items()}
        for k, v in cov.items():
            if v.shape != y.shape:
                raise ValueError(f"covariate {k} has the wrong length")
        object.__setattr__(self, "a", a)
        object.__setattr__(self, "y", y)
        object.__setattr__(self, "covariates", cov)
        object.__setattr__(self, "ids", tuple(self.ids))

    @property
    def j(self) -> int:
        return int(self.y.size)

    def subset(self, mask) -> "ClusterLevelData":
        ids = tuple(np.asarray(self.ids, dtype=object)[mask]) if self.ids else ()
        return ClusterLevelData(self.a[mask], self.y[mask], {k: v[mask] for k, v in self.covariates.items()}, ids)

    def with_y(self, y) -> "ClusterLevelData":
        return ClusterLevelData(self.a, y, self.covariates, self.ids)

    def with_a(self, a) -> "ClusterLevelData":
        return ClusterLevelData(a, self.y, self.covariates, self.ids)

    @classmethod
    def from_rows(cls, rows: Sequence[Mapping]) -> "ClusterLevelData":
        """Build from mappings with keys ``a``, ``y`` and the cluster covariates."""
        names = [k for k in COVARIATES if k in rows[0]]
        return cls([r["a"] for r in rows], [r["y"] for r in rows],
                   {k: [r[k] for r in rows] for k in names},
                   tuple(str(r.get("id", i)) for i, r in enumerate(rows)))


@dataclass(frozen=True)
class ApsSelection:
    """Chosen adjustment: ``q_covariate``/``g_covariate`` are None for unadjusted / known 0.5."""

    q_covariate: str | None
    g_covariate: str | None
    cv_risk: float
    candidate_risks: tuple[tuple[str, float], ...] = ()

    @property
    def q_spec(self) -> DesignSpec:
        return DesignSpec.main_terms(["a"] + ([self.q_covariate] if self.q_covariate else []))

    @property
    def g_spec(self) -> DesignSpec | None:
        if self.g_covariate is None:
            return None
        return DesignSpec.main_terms([self.g_covariate])

    @property
    def label(self) -> str:
        return f"Q:{self.q_covariate or 'unadj'}|g:{self.g_covariate or 'known'}"


DEFAULT_SELECTION = ApsSelection(None, None, float("nan"))


@dataclass(frozen=True, eq=False)
class EffectEstimate:
    psi: float
    se: float
    df: int
    ci_lo: float
    ci_hi: float
    p_value: float
    ic: np.ndarray
    method: str
    selection: ApsSelection | None = None
    g_truncated: bool = False
    clusters_used: int = 0
    clusters_dropped: int = 0

    def to_dict(self) -> dict:
        d = {
            "psi": self.psi, "se": self.se, "df": self.df, "ci_lo": self.ci_lo, "ci_hi": self.ci_hi,
            "p_value": self.p_value, "method": self.method, "clusters_used": self.clusters_used,
            "clusters_dropped": self.clusters_dropped, "g_truncated": self.g_truncated,
        }
        if self.selection is not None:
            d["selection"] = {
                "q_covariate": self.selection.q_covariate, "g_covariate": self.selection.g_covariate,
                "cv_risk": self.selection.cv_risk,
                "candidate_risks": {k: v for k, v in self.selection.candidate_risks},
            }
        return d


def inference_t(psi: float, ic, df: int, level: float = 0.95) -> tuple[float, float, float, float]:
    """Standard error, Student-t confidence limits and two-sided p-value.

    Returns ``(se, ci_lo, ci_hi, p_value)`` with ``se = sqrt(var(ic) / len(ic))``.
    """
    ic = np.asarray(ic, dtype=float)
    if df < 1:
        raise ValueError("df must be at least 1")
    if ic.size < 2:
        raise ValueError("need at least two influence-curve values")
    se = float(np.sqrt(np.var(ic, ddof=1) / ic.size))
    return _t_interval(psi, se, df, level)


def _t_interval(psi, se, df, level=0.95):
    q = float(stats.t.ppf(0.5 + level / 2, df))
    if se == 0.0:
        return 0.0, psi, psi, 1.0 if psi == 0 else 0.0
    t = psi / se
    p = float(2 * stats.t.sf(abs(t), df))
    return se, psi - q * se, psi + q * se, p


def _check_arms(data: ClusterLevelData):
    n1 = int(data.a.sum())
    n0 = data.j - n1
    if n1 == 0 or n0 == 0:
        raise ValueError("both arms must be present")
    if n1 < 2 or n0 < 2:
        raise ValueError(f"need at least 2 clusters per arm (arm 0: {n0}, arm 1: {n1})")


def estimate_effect_unadjusted(data: ClusterLevelData) -> EffectEstimate:
    """Difference in arm-specific mean outcomes."""
    _check_arms(data)
    a, y = data.a, data.y
    treated = a == 1
    p1 = treated.mean()
    y1, y0 = y[treated].mean(), y[~treated].mean()
    psi = float(y1 - y0)
    ic = np.where(treated, (y - y1) / p1, -(y - y0) / (1 - p1))
    df = data.j - 2
    se, lo, hi, p = inference_t(psi, ic, df)
    return EffectEstimate(psi, se, df, lo, hi, p, ic, "unadjusted", clusters_used=data.j)


# ---------------------------------------------------------------------------
# cluster-level TMLE


@dataclass(frozen=True, eq=False)
class _Nuisance:
    q_fit: object
    g_fit: object | None
    q_covariate: str | None
    g_covariate: str | None

    def predict(self, data: ClusterLevelData):
        cov = dict(data.covariates)
        n = data.j
        q = {}
        for arm in (0, 1):
            cov["a"] = np.full(n, float(arm))
            q[arm] = predict(self.q_fit, cov, n)
        if self.g_fit is None:
            g = np.full(n, KNOWN_PROPENSITY)
        else:
            g = predict(self.g_fit, cov, n)
        return q[0], q[1], g


def _fit_nuisance(data: ClusterLevelData, q_covariate, g_covariate) -> _Nuisance:
    cov = dict(data.covariates)
    cov["a"] = data.a.astype(float)
    q_spec = DesignSpec.main_terms(["a"] + ([q_covariate] if q_covariate else []))
    q_fit = fit_glm(q_spec, GAUSSIAN, cov, data.y)
    g_fit = None
    if g_covariate is not None:
        g_fit = fit_glm(DesignSpec.main_terms([g_covariate]), BINOMIAL, cov, data.a)
    return _Nuisance(q_fit, g_fit, q_covariate, g_covariate)


def _fluctuate(a, y, q0, q1, g):
    """Least-squares fluctuation along the arm-specific clever covariates."""
    h1 = a / g
    h0 = -(1 - a) / (1 - g)
    resid = y - np.where(a == 1, q1, q0)
    eps1 = np.sum(h1 * resid) / np.sum(h1 * h1) if np.any(h1) else 0.0
    eps0 = np.sum(h0 * resid) / np.sum(h0 * h0) if np.any(h0) else 0.0
    return float(eps1), float(eps0)


def _targeted(nuis: _Nuisance, eps, data: ClusterLevelData):
    q0, q1, g = nuis.predict(data)
    g = np.clip(g, *G_BOUNDS)
    q1s = q1 + eps[0] / g
    q0s = q0 - eps[1] / (1 - g)
    return q0s, q1s, g


def _tmle_ic(a, y, q0s, q1s, g, psi):
    h = a / g - (1 - a) / (1 - g)
    return h * (y - np.where(a == 1, q1s, q0s)) + q1s - q0s - psi


def estimate_effect_tmle(data: ClusterLevelData, selection: ApsSelection = DEFAULT_SELECTION) -> EffectEstimate:
    """Cluster-level TMLE with the working models named in ``selection``."""
    _check_arms(data)
    nuis = _fit_nuisance(data, selection.q_covariate, selection.g_covariate)
    q0, q1, g_raw = nuis.predict(data)
    truncated = bool(np.any((g_raw < G_BOUNDS[0]) | (g_raw > G_BOUNDS[1])))
    g = np.clip(g_raw, *G_BOUNDS)
    eps = _fluctuate(data.a, data.y, q0, q1, g)
    q0s, q1s, g = _targeted(nuis, eps, data)
    psi = float(np.mean(q1s - q0s))
    ic = _tmle_ic(data.a, data.y, q0s, q1s, g, psi)
    df = data.j - 2
    se, lo, hi, p = inference_t(psi, ic, df)
    return EffectEstimate(psi, se, df, lo, hi, p, ic, "tmle-aps", selection, truncated, clusters_used=data.j)


def _cv_risk(data: ClusterLevelData, folds, q_covariate, g_covariate) -> float:
    """Mean squared influence curve on validation folds, nuisance and targeting fit on training folds."""
    total = 0.0
    for f in range(1, folds.k + 1):
        valid = folds.labels == f
        train = data.subset(~valid)
        test = data.subset(valid)
        if min(int(train.a.sum()), int(train.j - train.a.sum())) < 1:
            return float("inf")
        nuis = _fit_nuisance(train, q_covariate, g_covariate)
        q0, q1, g = nuis.predict(train)
        g = np.clip(g, *G_BOUNDS)
        eps = _fluctuate(train.a, train.y, q0, q1, g)
        q0s, q1s, _ = _targeted(nuis, eps, train)
        psi_train = float(np.mean(q1s - q0s))
        v0, v1, vg = _targeted(nuis, eps, test)
        ic = _tmle_ic(test.a, test.y, v0, v1, vg, psi_train)
        total += float(np.sum(ic * ic))
    return total / data.j


def aps_select(data: ClusterLevelData, candidates_q: Sequence[str | None] = (None, *COVARIATES),
               candidates_g: Sequence[str | None] = (None, *COVARIATES), k: int = 5,
               seed: int = 0) -> ApsSelection:
    """Adaptive Pre-specification of the cluster-level TMLE.

    The outcome regression is chosen first with the known propensity 0.5; the
    propensity model is then chosen given that outcome regression. ``None``
    means unadjusted (outcome regression) or known 0.5 (propensity). Ties keep
    the earlier candidate.
    """
    if data.j < k:
        raise ValueError(f"need at least {k} clusters for {k}-fold cross-validation")
    if None not in candidates_q or None not in candidates_g:
        raise ValueError("candidate lists must include the unadjusted default (None)")
    folds = make_folds(data.j, k, seed)
    risks: dict[str, float] = {}

    def evaluate(qc, gc):
        key = f"Q:{qc or 'unadj'}|g:{gc or 'known'}"
        if key not in risks:
            try:
                risks[key] = _cv_risk(data, folds, qc, gc)
            except np.linalg.LinAlgError:
                risks[key] = float("inf")
        return risks[key]

    best_q, best_risk = None, evaluate(None, None)
    for qc in candidates_q:
        r = evaluate(qc, None)
        if r < best_risk:
            best_q, best_risk = qc, r
    best_g = None
    for gc in candidates_g:
        r = evaluate(best_q, gc)
        if r < best_risk:
            best_g, best_risk = gc, r
    return ApsSelection(best_q, best_g, best_risk, tuple(risks.items()))


ClusterLevelRows = ClusterLevelData

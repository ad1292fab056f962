"""Monte Carlo replicates, metric aggregation and result files.

A replicate generates one trial and analyses it with every estimator
configuration. Seeds are derived from the master seed and the replicate
index, so a replicate's output does not depend on which worker ran it or on
how many other replicates or estimators there are.
"""

from __future__ import annotations

import csv
import dataclasses
import hashlib
import io
import logging
import math
import os
import warnings
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from typing import Callable, Iterable, Mapping, Sequence

import numpy as np

from .data import TrialData
from .seeding import derive_seed
from .simgen import SimParams, TruthResult, generate_trial
from .stage1 import LIBRARIES, METHODS, ClusterEndpoint, EndpointUndefined, TargetingError, estimate_endpoint
from .stage2 import (COVARIATES, ClusterLevelData, EffectEstimate, aps_select, estimate_effect_tmle,
                     estimate_effect_unadjusted)

logger = logging.getLogger(__name__)

STAGE2_METHODS = ("unadjusted", "tmle-aps")
ALPHA = 0.05


class AnalysisError(ValueError):
    """Too few usable clusters remain for the cluster-level analysis."""


@dataclass(frozen=True)
class EstimatorConfig:
    """One Two-Stage estimator: a Stage-1 endpoint method and a Stage-2 effect method."""

    name: str
    stage1: str
    stage2: str
    library: str = "default"
    k1: int = 10
    k2: int = 5
    adjust_l: bool = False

    def __post_init__(self):
        if self.stage1 not in METHODS:
            raise ValueError(f"unknown stage1 method {self.stage1!r}; expected one of {METHODS}")
        if self.stage2 not in STAGE2_METHODS:
            raise ValueError(f"unknown stage2 method {self.stage2!r}; expected one of {STAGE2_METHODS}")
        if self.library not in LIBRARIES:
            raise ValueError(f"unknown learner library {self.library!r}; expected one of {LIBRARIES}")
        if self.k1 < 2 or self.k2 < 2:
            raise ValueError("fold counts must be at least 2")

    @property
    def stage1_key(self) -> str:
        """Identifies the Stage-1 computation; configs sharing it share endpoints."""
        if self.stage1 != "tmle":
            return self.stage1
        return f"tmle|{self.library}|k{self.k1}|l{int(self.adjust_l)}"

    @classmethod
    def from_dict(cls, d: Mapping) -> "EstimatorConfig":
        d = dict(d)
        if "name" not in d:
            d["name"] = f"{d.get('stage1')}/{d.get('stage2')}"
        return cls(**d)


STANDARD_ESTIMATORS = (
    EstimatorConfig("Screened/Unadjusted", "screened", "unadjusted"),
    EstimatorConfig("Eligible/Unadjusted", "eligible", "unadjusted"),
    EstimatorConfig("Unadjusted/Unadjusted", "unadjusted", "unadjusted"),
    EstimatorConfig("TMLE/Unadjusted", "tmle", "unadjusted"),
    EstimatorConfig("TMLE/TMLE", "tmle", "tmle-aps"),
)


# ---------------------------------------------------------------------------
# single-trial analysis


@dataclass(frozen=True, eq=False)
class Stage1Result:
    endpoints: tuple[ClusterEndpoint, ...]
    dropped: tuple[tuple[str, str], ...]  # (cluster id, reason)


def run_stage1(data: TrialData, config: EstimatorConfig, seed: int) -> Stage1Result:
    """Stage-1 endpoints for every cluster; clusters without a defined endpoint are dropped."""
    endpoints, dropped = [], []
    for c in data.clusters:
        try:
            endpoints.append(estimate_endpoint(c, config.stage1, config.library, config.k1, seed, config.adjust_l))
        except (EndpointUndefined, TargetingError) as exc:
            dropped.append((c.id, str(exc)))
    if dropped:
        warnings.warn(f"{len(dropped)} cluster(s) dropped: {dropped[0][1]}" + (" ..." if len(dropped) > 1 else ""))
    return Stage1Result(tuple(endpoints), tuple(dropped))


def _id_key(cluster_id: str):
    return (0, int(cluster_id), "") if cluster_id.isdigit() else (1, 0, cluster_id)


def cluster_level_data(data: TrialData, stage1: Stage1Result) -> ClusterLevelData:
    """Cluster-level rows in canonical id order, so results do not depend on file order."""
    by_id = {c.id: c for c in data.clusters}
    endpoints = sorted(stage1.endpoints, key=lambda e: _id_key(e.cluster_id))
    clusters = [by_id[e.cluster_id] for e in endpoints]
    return ClusterLevelData(
        [c.a for c in clusters],
        [e.estimate for e in endpoints],
        {k: [getattr(c, k) for c in clusters] for k in COVARIATES},
        tuple(c.id for c in clusters),
    )


def _stage1_seed(seed: int, config: EstimatorConfig) -> int:
    return derive_seed(seed, "stage1", config.stage1_key)


def _stage2_seed(seed: int, config: EstimatorConfig) -> int:
    return derive_seed(seed, "stage2", config.name)


def analyze_trial(data: TrialData, config: EstimatorConfig, seed: int,
                  _cache: dict | None = None) -> EffectEstimate:
    """Two-Stage estimate of the arm effect for one trial.

    Raises
    ------
    AnalysisError
        Fewer than 2 clusters with a defined endpoint in some arm.
    """
    key = config.stage1_key
    if _cache is not None and key in _cache:
        s1 = _cache[key]
    else:
        s1 = run_stage1(data, config, _stage1_seed(seed, config))
        if _cache is not None:
            _cache[key] = s1
    rows = cluster_level_data(data, s1)
    n1 = int(rows.a.sum())
    if min(n1, rows.j - n1) < 2:
        raise AnalysisError(f"fewer than 2 usable clusters in an arm (arm 0: {rows.j - n1}, arm 1: {n1})")
    if config.stage2 == "unadjusted":
        est = estimate_effect_unadjusted(rows)
    else:
        k = min(config.k2, rows.j)
        selection = aps_select(rows, k=k, seed=_stage2_seed(seed, config))
        est = estimate_effect_tmle(rows, selection)
    return dataclasses.replace(est, clusters_used=rows.j, clusters_dropped=len(s1.dropped))


# ---------------------------------------------------------------------------
# replicates


def trial_checksum(data: TrialData) -> str:
    """SHA-256 over every cluster's id and observed columns."""
    h = hashlib.sha256()
    for c in data.clusters:
        h.update(c.id.encode())
        h.update(np.array([c.e1c, c.e2c, c.a], dtype=float).tobytes())
        for arr in (c.w1, c.w2, c.w3, c.delta, c.y1, c.y2):
            h.update(np.ascontiguousarray(arr).tobytes())
        if c.l is not None:
            h.update(np.ascontiguousarray(c.l).tobytes())
    return h.hexdigest()[:16]


@dataclass(frozen=True)
class EstimatorOutcome:
    """Per-replicate result of one estimator; ``error`` is set (and numbers are nan) on failure."""

    estimator: str
    psi: float = math.nan
    se: float = math.nan
    df: int = 0
    ci_lo: float = math.nan
    ci_hi: float = math.nan
    p_value: float = math.nan
    clusters_used: int = 0
    clusters_dropped: int = 0
    selection: str = ""
    error: str = ""

    @property
    def ok(self) -> bool:
        return not self.error

    @classmethod
    def from_estimate(cls, name: str, est: EffectEstimate) -> "EstimatorOutcome":
        return cls(name, est.psi, est.se, est.df, est.ci_lo, est.ci_hi, est.p_value, est.clusters_used,
                   est.clusters_dropped, est.selection.label if est.selection else "")


@dataclass(frozen=True)
class ReplicateResult:
    rep_id: int
    trial_checksum: str
    outcomes: tuple[EstimatorOutcome, ...]

    def outcome(self, name: str) -> EstimatorOutcome:
        for o in self.outcomes:
            if o.estimator == name:
                return o
        raise KeyError(name)


def trial_seed(seed: int, rep: int) -> int:
    return derive_seed(seed, "rep", rep)


def analysis_seed(seed: int, rep: int) -> int:
    return derive_seed(seed, "analysis", rep)


def run_replicate(params: SimParams, estimators: Sequence[EstimatorConfig], seed: int,
                  rep: int) -> ReplicateResult:
    data = generate_trial(params, trial_seed(seed, rep))
    base = analysis_seed(seed, rep)
    cache: dict = {}
    outcomes = []
    for cfg in estimators:
        with warnings.catch_warnings():
            warnings.simplefilter("ignore")
            try:
                est = analyze_trial(data, cfg, base, cache)
            except (AnalysisError, ValueError, np.linalg.LinAlgError) as exc:
                outcomes.append(EstimatorOutcome(cfg.name, error=f"{type(exc).__name__}: {exc}"))
                continue
        outcomes.append(EstimatorOutcome.from_estimate(cfg.name, est))
    return ReplicateResult(rep, trial_checksum(data), tuple(outcomes))


def _run_replicate_star(args):
    return run_replicate(*args)


def run_replicates(params: SimParams, estimators: Sequence[EstimatorConfig], reps: int, seed: int,
                   threads: int = 1, progress: Callable[[int, int], None] | None = None) -> list[ReplicateResult]:
    """Run replicates ``0 .. reps-1``; output is identical for any ``threads``."""
    if reps < 1:
        raise ValueError("reps must be at least 1")
    names = [e.name for e in estimators]
    if len(set(names)) != len(names):
        raise ValueError("estimator names must be unique")
    jobs = [(params, tuple(estimators), seed, r) for r in range(reps)]
    results: list[ReplicateResult] = []
    if threads <= 1:
        for i, job in enumerate(jobs):
            results.append(_run_replicate_star(job))
            if progress:
                progress(i + 1, reps)
    else:
        with ProcessPoolExecutor(max_workers=threads) as pool:
            for i, res in enumerate(pool.map(_run_replicate_star, jobs, chunksize=max(1, reps // (4 * threads)))):
                results.append(res)
                if progress:
                    progress(i + 1, reps)
    return results


# ---------------------------------------------------------------------------
# metrics


@dataclass(frozen=True)
class EstimatorMetrics:
    estimator: str
    n_reps: int
    n_failed: int
    mean_pt: float
    mean_ci_lo: float
    mean_ci_hi: float
    bias: float
    avg_se: float
    mc_sd: float
    coverage: float
    power: float

    @property
    def available(self) -> bool:
        return self.n_reps > 0


@dataclass(frozen=True)
class SimulationMetrics:
    psi_star: float
    rows: tuple[EstimatorMetrics, ...]

    def __getitem__(self, name: str) -> EstimatorMetrics:
        for r in self.rows:
            if r.estimator == name:
                return r
        raise KeyError(name)


def _metrics_for(name: str, outcomes: Sequence[EstimatorOutcome], psi_star: float, alpha: float) -> EstimatorMetrics:
    ok = [o for o in outcomes if o.ok]
    failed = len(outcomes) - len(ok)
    if not ok:
        nan = math.nan
        return EstimatorMetrics(name, 0, failed, nan, nan, nan, nan, nan, nan, nan, nan)
    psi = np.array([o.psi for o in ok])
    lo = np.array([o.ci_lo for o in ok])
    hi = np.array([o.ci_hi for o in ok])
    mc_sd = float(np.std(psi, ddof=1)) if psi.size > 1 else math.nan
    return EstimatorMetrics(
        name, len(ok), failed,
        mean_pt=float(psi.mean()),
        mean_ci_lo=float(lo.mean()),
        mean_ci_hi=float(hi.mean()),
        bias=float(psi.mean() - psi_star),
        avg_se=float(np.mean([o.se for o in ok])),
        mc_sd=mc_sd,
        coverage=float(np.mean((lo <= psi_star) & (psi_star <= hi))),
        power=float(np.mean([o.p_value < alpha for o in ok])),
    )


def aggregate_metrics(results: Sequence[ReplicateResult], truth: TruthResult | float,
                      alpha: float = ALPHA) -> SimulationMetrics:
    """Bias, mean SE, Monte Carlo SD, CI coverage and power per estimator.

    Failed replicates are excluded estimator by estimator and counted in
    ``n_failed``; an estimator with no successful replicate gets nan metrics.
    """
    if not results:
        raise ValueError("no replicate results")
    psi_star = truth.psi_star if isinstance(truth, TruthResult) else float(truth)
    if not math.isfinite(psi_star):
        raise ValueError("truth must be finite")
    names: list[str] = []
    for r in results:
        for o in r.outcomes:
            if o.estimator not in names:
                names.append(o.estimator)
    rows = []
    for name in names:
        outs = [o for r in results for o in r.outcomes if o.estimator == name]
        rows.append(_metrics_for(name, outs, psi_star, alpha))
    return SimulationMetrics(psi_star, tuple(rows))


# ---------------------------------------------------------------------------
# files

REPLICATE_COLUMNS = ("rep_id", "trial_checksum", "estimator", "psi", "se", "df", "ci_lo", "ci_hi", "p_value",
                     "clusters_used", "clusters_dropped", "selection", "error")
SUMMARY_COLUMNS = ("estimator", "n_reps", "n_failed", "pt", "ci_lo", "ci_hi", "bias", "avg_se", "mc_sd",
                   "coverage", "power", "psi_star")


def _fmt(x) -> str:
    if isinstance(x, float):
        return "nan" if math.isnan(x) else repr(x)
    return str(x)


def _write_rows(path, header, rows) -> None:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(header)
    for row in rows:
        w.writerow([_fmt(v) for v in row])
    with open(path, "w", newline="") as fh:
        fh.write(buf.getvalue())


def write_replicates_csv(results: Iterable[ReplicateResult], path: str | os.PathLike) -> None:
    rows = []
    for r in results:
        for o in r.outcomes:
            rows.append((r.rep_id, r.trial_checksum, o.estimator, o.psi, o.se, o.df, o.ci_lo, o.ci_hi, o.p_value,
                         o.clusters_used, o.clusters_dropped, o.selection, o.error))
    _write_rows(path, REPLICATE_COLUMNS, rows)


def read_replicates_csv(path: str | os.PathLike) -> list[ReplicateResult]:
    with open(path, newline="") as fh:
        reader = csv.DictReader(fh)
        if tuple(reader.fieldnames or ()) != REPLICATE_COLUMNS:
            raise ValueError(f"{path}: unexpected header {reader.fieldnames}")
        grouped: dict[int, tuple[str, list[EstimatorOutcome]]] = {}
        for row in reader:
            rep = int(row["rep_id"])
            outcome = EstimatorOutcome(
                row["estimator"], float(row["psi"]), float(row["se"]), int(row["df"]), float(row["ci_lo"]),
                float(row["ci_hi"]), float(row["p_value"]), int(row["clusters_used"]),
                int(row["clusters_dropped"]), row["selection"], row["error"])
            grouped.setdefault(rep, (row["trial_checksum"], []))[1].append(outcome)
    return [ReplicateResult(rep, chk, tuple(outs)) for rep, (chk, outs) in sorted(grouped.items())]


def write_summary_csv(metrics: SimulationMetrics, path: str | os.PathLike) -> None:
    rows = [(m.estimator, m.n_reps, m.n_failed, m.mean_pt, m.mean_ci_lo, m.mean_ci_hi, m.bias, m.avg_se, m.mc_sd,
             m.coverage, m.power, metrics.psi_star) for m in metrics.rows]
    _write_rows(path, SUMMARY_COLUMNS, rows)


def format_table(metrics: SimulationMetrics) -> str:
    """Aligned text table; effect-scale columns in percent."""
    head = ("Stage 1/Stage 2", "Pt (95% CI)", "Bias", "SE-hat", "MC SD", "Coverage", "Power")
    lines = []
    for m in metrics.rows:
        if not m.available:
            lines.append((m.estimator, "unavailable", "", "", "", "", ""))
            continue
        lines.append((
            m.estimator,
            f"{100 * m.mean_pt:.2f} ({100 * m.mean_ci_lo:.2f}, {100 * m.mean_ci_hi:.2f})",
            f"{100 * m.bias:.2f}",
            f"{100 * m.avg_se:.2f}",
            f"{100 * m.mc_sd:.2f}",
            f"{100 * m.coverage:.1f}",
            f"{100 * m.power:.1f}",
        ))
    widths = [max(len(str(r[i])) for r in [head, *lines]) for i in range(len(head))]
    out = ["  ".join(str(v).ljust(w) if i == 0 else str(v).rjust(w) for i, (v, w) in enumerate(zip(r, widths)))
           for r in [head, *lines]]
    out.insert(1, "-" * len(out[0]))
    out.append(f"True effect: {100 * metrics.psi_star:.2f}%")
    return "\n".join(out)

"""Hierarchical trial data: individuals nested in randomized clusters.

Individual-level variables are stored column-wise per cluster (one numpy array
per variable) because the estimators operate on whole clusters at once;
:attr:`ClusterRecord.individuals` gives the row view when one is wanted.

Counterfactual quantities produced by the simulator live in
:class:`SimLatents` and are serialized with a ``sim_`` prefix. Estimators never
read them.
"""

from __future__ import annotations

import csv
import os
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

BASE_COLUMNS = ("cluster_id", "e1c", "e2c", "a", "w1", "w2", "w3", "delta", "y1", "y2")
L_COLUMN = "l"
SIM_COLUMNS = ("sim_y1star", "sim_delta0", "sim_delta1", "sim_y20", "sim_y21")
SIM_EXTENDED_COLUMNS = ("sim_y1star0", "sim_y1star1")

_BINARY_COLUMNS = frozenset({"a", "w2", "w3", "delta", "y1", "y2", *SIM_COLUMNS, *SIM_EXTENDED_COLUMNS})


class TrialDataError(ValueError):
    """Base class for problems with trial data."""


class SchemaError(TrialDataError):
    pass


class ParseError(TrialDataError):
    pass


class ValidationError(TrialDataError):
    pass


def _frozen(x, dtype) -> np.ndarray:
    arr = np.array(x, dtype=dtype)
    arr.setflags(write=False)
    return arr


@dataclass(frozen=True)
class SimLatents:
    """Counterfactual values for one individual (simulation only)."""

    y1_star: int
    delta_cf: tuple[int, int]
    y2_cf: tuple[int, int]
    y1_star_cf: tuple[int, int] | None = None


@dataclass(frozen=True)
class IndividualRecord:
    w1: float
    w2: int
    w3: int
    delta: int
    y1: int
    y2: int
    l: float | None = None
    latent: SimLatents | None = None


@dataclass(frozen=True, eq=False)
class ClusterLatents:
    """Column-wise :class:`SimLatents` for all members of a cluster.

    ``y1_star0``/``y1_star1`` are only present for the extended scenario, where
    the arm can change target-population membership.
    """

    y1_star: np.ndarray
    delta0: np.ndarray
    delta1: np.ndarray
    y2_0: np.ndarray
    y2_1: np.ndarray
    y1_star0: np.ndarray | None = None
    y1_star1: np.ndarray | None = None

    def __post_init__(self):
        for name in ("y1_star", "delta0", "delta1", "y2_0", "y2_1", "y1_star0", "y1_star1"):
            value = getattr(self, name)
            if value is not None:
                object.__setattr__(self, name, _frozen(value, np.int8))

    def delta_cf(self, a: int) -> np.ndarray:
        return self.delta1 if a == 1 else self.delta0

    def y2_cf(self, a: int) -> np.ndarray:
        return self.y2_1 if a == 1 else self.y2_0

    def y1_star_cf(self, a: int) -> np.ndarray:
        if self.y1_star0 is None:
            return self.y1_star
        return self.y1_star1 if a == 1 else self.y1_star0

    def __eq__(self, other):
        if not isinstance(other, ClusterLatents):
            return NotImplemented
        return all(_arrays_equal(getattr(self, f), getattr(other, f))
                   for f in ("y1_star", "delta0", "delta1", "y2_0", "y2_1", "y1_star0", "y1_star1"))


def _arrays_equal(x, y) -> bool:
    if x is None or y is None:
        return x is None and y is None
    return x.shape == y.shape and bool(np.array_equal(x, y))


@dataclass(frozen=True, eq=False)
class ClusterRecord:
    """One cluster: cluster covariates, arm, and its members' columns."""

    id: str
    e1c: float
    e2c: float
    a: int
    w1: np.ndarray
    w2: np.ndarray
    w3: np.ndarray
    delta: np.ndarray
    y1: np.ndarray
    y2: np.ndarray
    l: np.ndarray | None = None
    latents: ClusterLatents | None = None
    w1c: float = field(init=False)
    w2c: float = field(init=False)
    w3c: float = field(init=False)

    def __post_init__(self):
        object.__setattr__(self, "id", str(self.id))
        object.__setattr__(self, "e1c", float(self.e1c))
        object.__setattr__(self, "e2c", float(self.e2c))
        object.__setattr__(self, "a", int(self.a))
        object.__setattr__(self, "w1", _frozen(self.w1, float))
        for name in ("w2", "w3", "delta", "y1", "y2"):
            object.__setattr__(self, name, _frozen(getattr(self, name), np.int8))
        if self.l is not None:
            object.__setattr__(self, "l", _frozen(self.l, float))
        n = self.w1.shape[0]
        for name in ("w2", "w3", "delta", "y1", "y2", "l"):
            value = getattr(self, name)
            if value is not None and value.shape != (n,):
                raise ValueError(f"cluster {self.id}: column {name} has length {value.shape[0]}, expected {n}")
        w1c, w2c, w3c = aggregate_cluster_covariates(self)
        object.__setattr__(self, "w1c", w1c)
        object.__setattr__(self, "w2c", w2c)
        object.__setattr__(self, "w3c", w3c)

    @property
    def n(self) -> int:
        return int(self.w1.shape[0])

    @property
    def individuals(self) -> tuple[IndividualRecord, ...]:
        rows = []
        lat = self.latents
        for i in range(self.n):
            latent = None
            if lat is not None:
                y1s_cf = None
                if lat.y1_star0 is not None:
                    y1s_cf = (int(lat.y1_star0[i]), int(lat.y1_star1[i]))
                latent = SimLatents(int(lat.y1_star[i]), (int(lat.delta0[i]), int(lat.delta1[i])),
                                    (int(lat.y2_0[i]), int(lat.y2_1[i])), y1s_cf)
            rows.append(IndividualRecord(
                float(self.w1[i]), int(self.w2[i]), int(self.w3[i]), int(self.delta[i]),
                int(self.y1[i]), int(self.y2[i]),
                None if self.l is None else float(self.l[i]), latent))
        return tuple(rows)

    @classmethod
    def from_individuals(cls, id: str, e1c: float, e2c: float, a: int,
                         individuals: Sequence[IndividualRecord]) -> "ClusterRecord":
        if not individuals:
            raise ValueError(f"cluster {id}: no individuals")
        col = lambda name: [getattr(r, name) for r in individuals]  # noqa: E731
        has_l = individuals[0].l is not None
        latents = None
        if individuals[0].latent is not None:
            lats = [r.latent for r in individuals]
            extended = lats[0].y1_star_cf is not None
            latents = ClusterLatents(
                y1_star=[z.y1_star for z in lats],
                delta0=[z.delta_cf[0] for z in lats], delta1=[z.delta_cf[1] for z in lats],
                y2_0=[z.y2_cf[0] for z in lats], y2_1=[z.y2_cf[1] for z in lats],
                y1_star0=[z.y1_star_cf[0] for z in lats] if extended else None,
                y1_star1=[z.y1_star_cf[1] for z in lats] if extended else None,
            )
        return cls(id, e1c, e2c, a, col("w1"), col("w2"), col("w3"), col("delta"), col("y1"), col("y2"),
                   l=col("l") if has_l else None, latents=latents)

    def covariates(self, adjust_l: bool = False) -> dict[str, np.ndarray]:
        """Individual-level adjustment covariates by name."""
        cov = {"w1": self.w1, "w2": self.w2.astype(float), "w3": self.w3.astype(float)}
        if adjust_l:
            if self.l is None:
                raise ValueError(f"cluster {self.id}: adjustment for l requested but no l column")
            cov["l"] = self.l
        return cov

    def __eq__(self, other):
        if not isinstance(other, ClusterRecord):
            return NotImplemented
        return (self.id == other.id and self.e1c == other.e1c and self.e2c == other.e2c
                and self.a == other.a
                and all(_arrays_equal(getattr(self, f), getattr(other, f))
                        for f in ("w1", "w2", "w3", "delta", "y1", "y2", "l"))
                and self.latents == other.latents)


def aggregate_cluster_covariates(cluster) -> tuple[float, float, float]:
    """Empirical means of W1, W2, W3 over the members of ``cluster``."""
    w1 = np.asarray(cluster.w1, dtype=float)
    if w1.size == 0:
        raise ValueError(f"cluster {getattr(cluster, 'id', '?')}: cannot aggregate an empty cluster")
    return (float(np.mean(w1)),
            float(np.mean(np.asarray(cluster.w2, dtype=float))),
            float(np.mean(np.asarray(cluster.w3, dtype=float))))


@dataclass(frozen=True)
class TrialData:
    clusters: tuple[ClusterRecord, ...]

    def __post_init__(self):
        object.__setattr__(self, "clusters", tuple(self.clusters))

    @property
    def j(self) -> int:
        return len(self.clusters)

    @property
    def has_l(self) -> bool:
        return bool(self.clusters) and self.clusters[0].l is not None

    @property
    def has_latents(self) -> bool:
        return bool(self.clusters) and self.clusters[0].latents is not None

    def arm_counts(self) -> tuple[int, int]:
        n1 = sum(c.a for c in self.clusters)
        return self.j - n1, n1


@dataclass(frozen=True)
class Violation:
    cluster_id: str | None
    row: int | None  # 0-based index within the cluster
    message: str

    def __str__(self):
        where = []
        if self.cluster_id is not None:
            where.append(f"cluster {self.cluster_id}")
        if self.row is not None:
            where.append(f"row {self.row}")
        return f"{', '.join(where) or 'trial'}: {self.message}"


@dataclass(frozen=True)
class ValidationReport:
    violations: tuple[Violation, ...] = ()

    @property
    def ok(self) -> bool:
        return not self.violations

    def __bool__(self):
        return self.ok

    def __str__(self):
        return "\n".join(str(v) for v in self.violations) or "no violations"


def _cluster_violations(c: ClusterRecord) -> list[Violation]:
    out = []
    if c.n < 2:
        out.append(Violation(c.id, None, f"cluster has {c.n} individual(s); at least 2 required"))
    if c.a not in (0, 1):
        out.append(Violation(c.id, None, f"arm must be 0 or 1, got {c.a}"))
    for name in ("w2", "w3", "delta", "y1", "y2"):
        bad = np.flatnonzero((getattr(c, name) != 0) & (getattr(c, name) != 1))
        for i in bad:
            out.append(Violation(c.id, int(i), f"{name} must be binary"))
    for i in np.flatnonzero((c.delta == 0) & (c.y1 != 0)):
        out.append(Violation(c.id, int(i), "y1=1 with delta=0 violates Y1 = delta * Y1*"))
    for i in np.flatnonzero((c.y1 == 0) & (c.y2 != 0)):
        out.append(Violation(c.id, int(i), "y2=1 with y1=0 violates outcome contingency on target membership"))
    for i in np.flatnonzero(~np.isfinite(c.w1)):
        out.append(Violation(c.id, int(i), "w1 is not finite"))
    if c.latents is not None:
        lat = c.latents
        y1s = lat.y1_star_cf(c.a)
        for i in np.flatnonzero(lat.delta_cf(c.a) != c.delta):
            out.append(Violation(c.id, int(i), "observed delta differs from counterfactual delta at realized arm"))
        for i in np.flatnonzero(lat.y2_cf(c.a) != c.y2):
            out.append(Violation(c.id, int(i), "observed y2 differs from counterfactual y2 at realized arm"))
        for i in np.flatnonzero(c.y1 != c.delta * y1s):
            out.append(Violation(c.id, int(i), "observed y1 differs from delta * Y1*"))
        for a in (0, 1):
            zero = (lat.delta_cf(a) == 0) | (lat.y1_star_cf(a) == 0)
            for i in np.flatnonzero(zero & (lat.y2_cf(a) != 0)):
                out.append(Violation(c.id, int(i), f"Y2({a})=1 although delta({a})*Y1*({a})=0"))
    return out


def validate(data: TrialData) -> ValidationReport:
    """Collect every invariant violation in ``data``; never raises."""
    violations: list[Violation] = []
    seen: set[str] = set()
    for c in data.clusters:
        if c.id in seen:
            violations.append(Violation(c.id, None, "duplicate cluster id"))
        seen.add(c.id)
        violations.extend(_cluster_violations(c))
    if data.j < 4:
        violations.append(Violation(None, None, f"trial has {data.j} clusters; at least 4 required"))
    n0, n1 = data.arm_counts()
    for arm, count in ((0, n0), (1, n1)):
        if count < 2:
            violations.append(Violation(None, None, f"fewer than 2 clusters in arm {arm} (found {count})"))
    return ValidationReport(tuple(violations))


# ---------------------------------------------------------------------------
# CSV interchange


def _header_for(data: TrialData) -> list[str]:
    header = list(BASE_COLUMNS)
    if data.has_l:
        header.append(L_COLUMN)
    if data.has_latents:
        header.extend(SIM_COLUMNS)
        if data.clusters[0].latents.y1_star0 is not None:
            header.extend(SIM_EXTENDED_COLUMNS)
    return header


def _check_header(header: list[str]) -> None:
    known = set(BASE_COLUMNS) | {L_COLUMN} | set(SIM_COLUMNS) | set(SIM_EXTENDED_COLUMNS)
    for name in header:
        if name not in known:
            raise SchemaError(f"unknown column {name!r}")
    if len(set(header)) != len(header):
        raise SchemaError("duplicate column in header")
    for name in BASE_COLUMNS:
        if name not in header:
            raise SchemaError(f"missing column {name!r}")
    expected = list(BASE_COLUMNS)
    if L_COLUMN in header:
        expected.append(L_COLUMN)
    if any(n in header for n in SIM_COLUMNS + SIM_EXTENDED_COLUMNS):
        for name in SIM_COLUMNS:
            if name not in header:
                raise SchemaError(f"missing column {name!r}")
        expected.extend(SIM_COLUMNS)
        if any(n in header for n in SIM_EXTENDED_COLUMNS):
            for name in SIM_EXTENDED_COLUMNS:
                if name not in header:
                    raise SchemaError(f"missing column {name!r}")
            expected.extend(SIM_EXTENDED_COLUMNS)
    if header != expected:
        raise SchemaError(f"columns out of order: expected {','.join(expected)}")


def _fmt(x: float) -> str:
    return format(float(x), ".17g")


def write_trial_csv(data: TrialData, path: str | os.PathLike) -> None:
    """Write one row per individual in the canonical column order."""
    header = _header_for(data)
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(header)
        for c in data.clusters:
            if (c.l is not None) != data.has_l or (c.latents is not None) != data.has_latents:
                raise ValueError(f"cluster {c.id}: columns differ from the first cluster")
            for i in range(c.n):
                row = [c.id, _fmt(c.e1c), _fmt(c.e2c), c.a, _fmt(c.w1[i]), int(c.w2[i]), int(c.w3[i]),
                       int(c.delta[i]), int(c.y1[i]), int(c.y2[i])]
                if c.l is not None:
                    row.append(_fmt(c.l[i]))
                if c.latents is not None:
                    lat = c.latents
                    row += [int(lat.y1_star[i]), int(lat.delta0[i]), int(lat.delta1[i]),
                            int(lat.y2_0[i]), int(lat.y2_1[i])]
                    if lat.y1_star0 is not None:
                        row += [int(lat.y1_star0[i]), int(lat.y1_star1[i])]
                writer.writerow(row)


def _parse(name: str, text: str, line: int):
    if name == "cluster_id":
        if text == "":
            raise ParseError(f"line {line}: empty cluster_id")
        return text
    if name in _BINARY_COLUMNS:
        if text not in ("0", "1"):
            raise ParseError(f"line {line}: column {name!r} must be 0 or 1, got {text!r}")
        return int(text)
    try:
        return float(text)
    except ValueError:
        raise ParseError(f"line {line}: column {name!r} is not a number: {text!r}") from None


def load_trial_csv(path: str | os.PathLike) -> TrialData:
    """Read individual-level trial data, grouping rows by ``cluster_id``.

    Clusters appear in order of first occurrence and rows keep their file
    order. Row-level invariants and the minimum cluster size are enforced here;
    trial-level requirements (number of clusters, arms) are left to
    :func:`validate`.
    """
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        try:
            header = next(reader)
        except StopIteration:
            raise SchemaError("empty file") from None
        header = [h.strip() for h in header]
        _check_header(header)
        groups: dict[str, list[tuple[int, dict]]] = {}
        for lineno, raw in enumerate(reader, start=2):
            if not raw:
                continue
            if len(raw) != len(header):
                raise ParseError(f"line {lineno}: expected {len(header)} fields, got {len(raw)}")
            row = {name: _parse(name, text.strip(), lineno) for name, text in zip(header, raw)}
            groups.setdefault(row["cluster_id"], []).append((lineno, row))

    clusters = []
    for cid, rows in groups.items():
        first = rows[0][1]
        for lineno, row in rows:
            for name in ("e1c", "e2c", "a"):
                if row[name] != first[name]:
                    raise ValidationError(f"line {lineno}: cluster {cid} has non-constant {name}")
            if row["delta"] == 0 and row["y1"] == 1:
                raise ValidationError(f"line {lineno}: y1=1 with delta=0 violates Y1 = delta * Y1*")
            if row["y1"] == 0 and row["y2"] == 1:
                raise ValidationError(f"line {lineno}: y2=1 with y1=0 violates outcome contingency")
        if len(rows) < 2:
            raise ValidationError(f"cluster {cid} has {len(rows)} individual(s); at least 2 required")
        col = lambda name: [r[name] for _, r in rows]  # noqa: E731
        latents = None
        if SIM_COLUMNS[0] in header:
            extended = SIM_EXTENDED_COLUMNS[0] in header
            latents = ClusterLatents(col("sim_y1star"), col("sim_delta0"), col("sim_delta1"),
                                     col("sim_y20"), col("sim_y21"),
                                     col("sim_y1star0") if extended else None,
                                     col("sim_y1star1") if extended else None)
        clusters.append(ClusterRecord(
            cid, first["e1c"], first["e2c"], first["a"], col("w1"), col("w2"), col("w3"),
            col("delta"), col("y1"), col("y2"),
            l=col("l") if L_COLUMN in header else None, latents=latents))
    return TrialData(tuple(clusters))


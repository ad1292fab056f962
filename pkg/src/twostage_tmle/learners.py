"""Working GLMs and a cross-validated convex ensemble (Super Learner).

Binomial GLMs are fit by iteratively reweighted least squares (Newton's method
on the log-likelihood) and gaussian GLMs by weighted least squares. Several
fits that share a design matrix but differ in observation weights are solved
together; cross-validation uses this to fit every training fold plus the full
data in one batched Newton loop.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from typing import Mapping, Sequence, Union

import numpy as np
from scipy.special import expit, xlogy

from . import _kernels

logger = logging.getLogger(__name__)

BINOMIAL = "binomial-logit"
GAUSSIAN = "gaussian-identity"

ETA_BOUND = 20.0
SCORE_TOL = 1e-8
MAX_ITER = 100
CLIP = 1e-6


class MissingCovariateError(KeyError):
    def __str__(self):
        return f"missing covariate {self.args[0]!r}"


# ---------------------------------------------------------------------------
# design specifications


@dataclass(frozen=True)
class DesignSpec:
    """Terms of a linear predictor.

    Each term is a tuple of covariate names: ``()`` is the intercept, ``("w1",)``
    a main effect and ``("w1", "w2")`` a product interaction.
    """

    terms: tuple[tuple[str, ...], ...]

    def __post_init__(self):
        terms = [tuple(t) for t in self.terms]
        normalized = [tuple(sorted(t)) for t in terms]
        if len(set(normalized)) != len(normalized):
            raise ValueError(f"duplicate terms in {terms}")
        if () not in normalized:
            terms = [()] + terms
        else:
            i = normalized.index(())
            terms = [()] + terms[:i] + terms[i + 1:]
        object.__setattr__(self, "terms", tuple(terms))

    @classmethod
    def intercept_only(cls) -> "DesignSpec":
        return cls(((),))

    @classmethod
    def main_terms(cls, names: Sequence[str]) -> "DesignSpec":
        return cls(tuple((n,) for n in names))

    @classmethod
    def pairwise(cls, names: Sequence[str]) -> "DesignSpec":
        """Main terms plus all pairwise products."""
        names = list(names)
        pairs = [(a, b) for i, a in enumerate(names) for b in names[i + 1:]]
        return cls(tuple((n,) for n in names) + tuple(pairs))

    @property
    def covariates(self) -> tuple[str, ...]:
        seen: dict[str, None] = {}
        for t in self.terms:
            for name in t:
                seen.setdefault(name)
        return tuple(seen)

    @property
    def labels(self) -> tuple[str, ...]:
        return tuple(":".join(t) if t else "(intercept)" for t in self.terms)

    def __str__(self):
        return " + ".join(self.labels)


class MeanLearner:
    """Candidate that predicts the (weighted) mean outcome."""

    name = "mean"

    def __repr__(self):
        return "MEAN"

    def __eq__(self, other):
        return isinstance(other, MeanLearner)

    def __hash__(self):
        return hash("MeanLearner")


MEAN = MeanLearner()
Candidate = Union[DesignSpec, MeanLearner]


def design_matrix(spec: DesignSpec, covariates: Mapping[str, np.ndarray], n: int | None = None) -> np.ndarray:
    cols = []
    for name in spec.covariates:
        if name not in covariates:
            raise MissingCovariateError(name)
    if n is None:
        n = len(next(iter(covariates.values()))) if covariates else 0
    for t in spec.terms:
        col = np.ones(n)
        for name in t:
            col = col * np.asarray(covariates[name], dtype=float)
        cols.append(col)
    return np.column_stack(cols)


# ---------------------------------------------------------------------------
# GLM fitting


@dataclass(frozen=True, eq=False)
class GlmFit:
    spec: DesignSpec
    coefficients: np.ndarray
    converged: bool
    iterations: int
    family: str
    dropped: tuple[str, ...] = ()

    def linear_predictor(self, covariates: Mapping[str, np.ndarray], offset=None) -> np.ndarray:
        eta = design_matrix(self.spec, covariates) @ self.coefficients
        if offset is not None:
            eta = eta + offset
        return eta


@dataclass(frozen=True, eq=False)
class MeanFit:
    value: float
    family: str = BINOMIAL
    spec: MeanLearner = MEAN


Fit = Union[GlmFit, MeanFit]


def predict(fit: Fit, covariates: Mapping[str, np.ndarray], n: int | None = None, offset=None) -> np.ndarray:
    """Fitted means: probabilities for the binomial family, linear predictions for gaussian."""
    if isinstance(fit, MeanFit):
        if n is None:
            n = len(next(iter(covariates.values())))
        return np.full(n, fit.value)
    eta = design_matrix(fit.spec, covariates, n) @ fit.coefficients
    if offset is not None:
        eta = eta + offset
    if fit.family == BINOMIAL:
        return expit(np.clip(eta, -ETA_BOUND, ETA_BOUND))
    return eta


def _independent_columns(X: np.ndarray, w: np.ndarray, tol: float = 1e-9) -> np.ndarray:
    """Greedy left-to-right selection of linearly independent weighted columns."""
    Xw = X * np.sqrt(w)[:, None]
    keep = np.zeros(X.shape[1], dtype=bool)
    basis = np.zeros((X.shape[0], 0))
    for k in range(X.shape[1]):
        col = Xw[:, k]
        norm = np.linalg.norm(col)
        if norm == 0:
            continue
        resid = col - basis @ (basis.T @ col) if basis.shape[1] else col
        if np.linalg.norm(resid) > tol * max(norm, 1.0):
            keep[k] = True
            basis = np.column_stack([basis, resid / np.linalg.norm(resid)])
    return keep


def _gram(W: np.ndarray, X: np.ndarray) -> np.ndarray:
    """Stack of X' diag(w_b) X for each row w_b of ``W``."""
    return np.matmul(X.T[None, :, :] * W[:, None, :], X)


def _column_masks(X: np.ndarray, W: np.ndarray) -> np.ndarray:
    """(B, p) masks of usable columns for each weight vector in ``W``."""
    B, p = W.shape[0], X.shape[1]
    masks = np.ones((B, p), dtype=bool)
    G = _gram(W, X)
    scale = np.sqrt(np.maximum(np.einsum("bii->bi", G), 1e-300))
    R = G / scale[:, :, None] / scale[:, None, :]
    cond = np.linalg.cond(R)
    for b in np.flatnonzero(~np.isfinite(cond) | (cond > 1e10)):
        masks[b] = _independent_columns(X, W[b])
    return masks


def _masked_solve(H: np.ndarray, g: np.ndarray, masks: np.ndarray) -> np.ndarray:
    if not masks.all():
        H = H.copy()
        g = g.copy()
        for b in np.flatnonzero(~masks.all(axis=1)):
            off = ~masks[b]
            H[b][off, :] = 0.0
            H[b][:, off] = 0.0
            H[b][off, off] = 1.0
            g[b][off] = 0.0
    return np.linalg.solve(H, g[..., None])[..., 0]


def _irls_batch(X, y, W, offset=None, max_iter=MAX_ITER, tol=SCORE_TOL):
    """Fit B logistic regressions sharing ``X``/``y`` with weight rows ``W`` (B, n).

    Returns coefficients (B, p), converged (B,), iterations (B,), masks (B, p).
    A fit whose training linear predictor would leave [-20, 20] is treated as
    separated: it stops at its last iterate inside that range, unconverged.
    """
    X = np.ascontiguousarray(X, dtype=float)
    W = np.ascontiguousarray(W, dtype=float)
    off = np.zeros(X.shape[0]) if offset is None else np.ascontiguousarray(offset, dtype=float)
    masks = _column_masks(X, W)
    beta, converged, iters = _kernels.irls(X, np.ascontiguousarray(y, dtype=float), W, off, masks,
                                           max_iter, tol, ETA_BOUND)
    return beta, converged, iters, masks


def fit_glm(spec: DesignSpec, family: str, covariates: Mapping[str, np.ndarray], outcomes,
            weights=None, offset=None) -> GlmFit:
    """Fit a GLM by weighted maximum likelihood.

    Parameters
    ----------
    spec : DesignSpec
        Terms of the linear predictor.
    family : {"binomial-logit", "gaussian-identity"}
    covariates : mapping of name to array
        Covariate columns, each of length n.
    outcomes : array of length n
        0/1 for the binomial family.
    weights, offset : array of length n, optional

    Returns
    -------
    GlmFit
        ``converged`` is False for a separated binomial fit; its coefficients
        are the last iterate whose linear predictor stayed within +/-20.
        Collinear terms are dropped (coefficient 0) and listed in ``dropped``.
    """
    y = np.asarray(outcomes, dtype=float)
    n = y.shape[0]
    X = design_matrix(spec, covariates, n)
    w = np.ones(n) if weights is None else np.asarray(weights, dtype=float)
    if not np.any(w > 0):
        raise ValueError("at least one observation needs positive weight")
    if family == BINOMIAL:
        if np.any((y != 0) & (y != 1)):
            raise ValueError("binomial outcomes must be 0 or 1")
        beta, conv, iters, masks = _irls_batch(X, y, w[None, :], offset)
        beta, conv, iters, mask = beta[0], bool(conv[0]), int(iters[0]), masks[0]
    elif family == GAUSSIAN:
        beta, mask = _wls_batch(X, y, w[None, :], offset)
        beta, mask, conv, iters = beta[0], mask[0], True, 1
    else:
        raise ValueError(f"unknown family {family!r}")
    dropped = tuple(label for label, k in zip(spec.labels, mask) if not k)
    if dropped:
        logger.debug("dropped collinear terms %s", dropped)
    return GlmFit(spec, beta, conv, iters, family, dropped)


def _wls_batch(X, y, W, offset=None):
    masks = _column_masks(X, W)
    r = y if offset is None else y - offset
    H = _gram(W, X)
    g = (W * r) @ X
    return _masked_solve(H, g, masks), masks


def _mean_fit(y, w, family) -> MeanFit:
    return MeanFit(float(np.sum(w * y) / np.sum(w)), family)


def fit_candidate(candidate: Candidate, family: str, covariates, outcomes, weights=None) -> Fit:
    y = np.asarray(outcomes, dtype=float)
    if isinstance(candidate, MeanLearner):
        return _mean_fit(y, np.ones_like(y) if weights is None else np.asarray(weights, float), family)
    return fit_glm(candidate, family, covariates, y, weights)


# ---------------------------------------------------------------------------
# cross-validation and ensembling


@dataclass(frozen=True, eq=False)
class FoldAssignment:
    labels: np.ndarray  # fold index in 1..k per observation
    k: int

    def validation(self, fold: int) -> np.ndarray:
        return self.labels == fold


def make_folds(n: int, k: int, seed: int | np.random.Generator) -> FoldAssignment:
    """Balanced random partition of ``range(n)`` into ``k`` folds labelled 1..k."""
    if k < 2:
        raise ValueError("need at least 2 folds")
    if k > n:
        raise ValueError(f"cannot split {n} observations into {k} folds")
    rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)
    labels = np.empty(n, dtype=int)
    labels[rng.permutation(n)] = np.arange(n) % k + 1
    labels.setflags(write=False)
    return FoldAssignment(labels, k)


def ensemble_risk(weights, predictions, outcomes) -> float:
    """Mean negative Bernoulli log-likelihood of the convex combination."""
    p = np.clip(np.asarray(predictions) @ np.asarray(weights), CLIP, 1 - CLIP)
    y = np.asarray(outcomes, dtype=float)
    return float(-np.mean(xlogy(y, p) + xlogy(1 - y, 1 - p)))


def solve_simplex_weights(cv_predictions, outcomes, tol: float = 1e-10, max_iter: int = 10_000) -> np.ndarray:
    """Convex weights minimizing the cross-validated log-loss.

    Exponentiated-gradient (mirror) descent with multiplicative updates and an
    adaptive step. If a vertex does better than the iterate, the vertex is
    returned, so the result is never worse than the best single candidate.
    """
    P = np.clip(np.asarray(cv_predictions, dtype=float), CLIP, 1 - CLIP)
    y = np.asarray(outcomes, dtype=float)
    n, m = P.shape
    if m == 1:
        return np.ones(1)

    pos = y == 1
    w, f = _kernels.simplex_eg(np.ascontiguousarray(P[pos]), np.ascontiguousarray(P[~pos]), tol, max_iter)
    vertex_risk = [ensemble_risk(np.eye(m)[k], P, y) for k in range(m)]
    best = int(np.argmin(vertex_risk))
    if vertex_risk[best] < f:
        w = np.eye(m)[best]
    return w


@dataclass(frozen=True, eq=False)
class SuperLearnerFit:
    candidates: tuple[Fit, ...]
    weights: np.ndarray
    cv_risk: np.ndarray
    folds: int
    cv_predictions: np.ndarray | None = field(default=None, repr=False)

    def predict(self, covariates: Mapping[str, np.ndarray], n: int | None = None) -> np.ndarray:
        if n is None:
            n = len(next(iter(covariates.values())))
        out = np.zeros(n)
        for wk, fit in zip(self.weights, self.candidates):
            if wk > 0:
                out += wk * predict(fit, covariates, n)
        return out


def _cv_glm_predictions(spec: DesignSpec, covariates, y, folds: FoldAssignment):
    """Out-of-fold predictions plus the full-data fit, from one batched Newton run."""
    n = y.shape[0]
    X = design_matrix(spec, covariates, n)
    W = np.ones((folds.k + 1, n))
    for f in range(1, folds.k + 1):
        W[f - 1, folds.labels == f] = 0.0
    beta, conv, iters, masks = _irls_batch(X, y, W)
    eta = np.einsum("ni,bi->bn", X, beta)
    cv = np.empty(n)
    for f in range(1, folds.k + 1):
        sel = folds.labels == f
        cv[sel] = expit(np.clip(eta[f - 1, sel], -ETA_BOUND, ETA_BOUND))
    dropped = tuple(lab for lab, k in zip(spec.labels, masks[-1]) if not k)
    full = GlmFit(spec, beta[-1], bool(conv[-1]), int(iters[-1]), BINOMIAL, dropped)
    return cv, full


def fit_super_learner(library: Sequence[Candidate], covariates: Mapping[str, np.ndarray], outcomes,
                      k: int, seed: int | np.random.Generator) -> SuperLearnerFit:
    """Cross-validated convex ensemble of binary-outcome candidates.

    With a constant outcome the ensemble is the mean learner alone.
    """
    y = np.asarray(outcomes, dtype=float)
    n = y.shape[0]
    if np.any((y != 0) & (y != 1)):
        raise ValueError("super learner outcomes must be binary")
    if len(library) == 0:
        raise ValueError("empty library")
    if np.all(y == y[0]):
        return SuperLearnerFit((MeanFit(float(y[0])),), np.ones(1), np.zeros(1), 0)
    folds = make_folds(n, k, seed)
    cv_cols, fits = [], []
    for cand in library:
        if isinstance(cand, MeanLearner):
            cv = np.empty(n)
            for f in range(1, k + 1):
                sel = folds.labels == f
                cv[sel] = y[~sel].mean()
            fits.append(MeanFit(float(y.mean())))
        else:
            cv, full = _cv_glm_predictions(cand, covariates, y, folds)
            fits.append(full)
        cv_cols.append(cv)
    P = np.column_stack(cv_cols)
    risks = np.array([ensemble_risk(np.eye(len(library))[j], P, y) for j in range(len(library))])
    weights = solve_simplex_weights(P, y)
    return SuperLearnerFit(tuple(fits), weights, risks, k, P)

"""Compiled inner loops for logistic IRLS and the simplex meta-learner.

Thousands of small fits (about 100 rows, at most 10 columns) run per simulated
trial, so per-call numpy overhead dominates; these loops are compiled with
numba and cached on disk.
"""

from __future__ import annotations

import math

import numpy as np
from numba import njit


@njit(cache=True)
def _expit(x):
    if x >= 0:
        return 1.0 / (1.0 + math.exp(-x))
    z = math.exp(x)
    return z / (1.0 + z)


@njit(cache=True)
def _log1pexp(x):
    if x > 0:
        return x + math.log1p(math.exp(-x))
    return math.log1p(math.exp(x))


@njit(cache=True)
def _deviance(eta, y, w):
    s = 0.0
    for i in range(y.shape[0]):
        if w[i] != 0.0:
            s += w[i] * (_log1pexp(eta[i]) - y[i] * eta[i])
    return 2.0 * s


@njit(cache=True)
def irls(X, y, W, offset, masks, max_iter, tol, eta_bound):
    """Newton-Raphson logistic fits, one per row of ``W``.

    Columns with ``masks[b, k] == False`` are held at zero. A fit stops
    unconverged, keeping its previous iterate, when its linear predictor on
    positively weighted rows would leave [-eta_bound, eta_bound].
    """
    B = W.shape[0]
    n, p = X.shape
    beta = np.zeros((B, p))
    converged = np.zeros(B, dtype=np.bool_)
    iters = np.zeros(B, dtype=np.int64)
    eta = np.empty(n)
    new_eta = np.empty(n)
    score = np.empty(p)
    H = np.empty((p, p))
    for b in range(B):
        w = W[b]
        for i in range(n):
            eta[i] = offset[i]
        dev = _deviance(eta, y, w)
        for it in range(1, max_iter + 1):
            score[:] = 0.0
            H[:, :] = 0.0
            for i in range(n):
                if w[i] == 0.0:
                    continue
                mu = _expit(eta[i])
                r = w[i] * (y[i] - mu)
                v = w[i] * mu * (1.0 - mu)
                for k in range(p):
                    xk = X[i, k]
                    score[k] += r * xk
                    vx = v * xk
                    for m in range(k + 1):
                        H[k, m] += vx * X[i, m]
            smax = 0.0
            for k in range(p):
                if not masks[b, k]:
                    score[k] = 0.0
                    for m in range(p):
                        H[k, m] = 0.0
                        H[m, k] = 0.0
                    H[k, k] = 1.0
                elif abs(score[k]) > smax:
                    smax = abs(score[k])
                for m in range(k):
                    H[m, k] = H[k, m]
            if smax < tol:
                converged[b] = True
                break
            iters[b] = it
            step = np.linalg.solve(H, score)
            blown = False
            for _half in range(31):
                new_dev = 0.0
                blown = False
                for i in range(n):
                    e = offset[i]
                    for k in range(p):
                        e += X[i, k] * (beta[b, k] + step[k])
                    new_eta[i] = e
                    if w[i] != 0.0 and abs(e) > eta_bound:
                        blown = True
                new_dev = _deviance(new_eta, y, w)
                if new_dev <= dev * (1.0 + 1e-12) + 1e-12:
                    break
                for k in range(p):
                    step[k] *= 0.5
            if blown:
                break
            for k in range(p):
                beta[b, k] += step[k]
            for i in range(n):
                eta[i] = new_eta[i]
            dev = new_dev
    return beta, converged, iters


@njit(cache=True)
def _simplex_objective(P1, P0, w, n):
    s = 0.0
    for i in range(P1.shape[0]):
        v = 0.0
        for k in range(w.shape[0]):
            v += P1[i, k] * w[k]
        s += math.log(v)
    for i in range(P0.shape[0]):
        v = 0.0
        for k in range(w.shape[0]):
            v += P0[i, k] * w[k]
        s += math.log1p(-v)
    return -s / n


@njit(cache=True)
def simplex_eg(P1, P0, tol, max_iter):
    """Exponentiated-gradient descent of the log-loss over the simplex.

    ``P1``/``P0`` hold candidate predictions for observations with outcome 1/0.
    Step size doubles after an accepted step and is halved until the objective
    does not increase.
    """
    m = P1.shape[1] if P1.shape[0] > 0 else P0.shape[1]
    n = P1.shape[0] + P0.shape[0]
    w = np.full(m, 1.0 / m)
    f = _simplex_objective(P1, P0, w, n)
    grad = np.empty(m)
    cand = np.empty(m)
    step = 1.0
    for _ in range(max_iter):
        grad[:] = 0.0
        for i in range(P1.shape[0]):
            v = 0.0
            for k in range(m):
                v += P1[i, k] * w[k]
            for k in range(m):
                grad[k] -= P1[i, k] / v
        for i in range(P0.shape[0]):
            v = 0.0
            for k in range(m):
                v += P0[i, k] * w[k]
            for k in range(m):
                grad[k] += P0[i, k] / (1.0 - v)
        gmin = grad[0] / n
        for k in range(m):
            grad[k] /= n
            if grad[k] < gmin:
                gmin = grad[k]
        while True:
            lmax = -1e308
            for k in range(m):
                cand[k] = math.log(max(w[k], 1e-300)) - step * (grad[k] - gmin)
                if cand[k] > lmax:
                    lmax = cand[k]
            total = 0.0
            for k in range(m):
                cand[k] = math.exp(cand[k] - lmax)
                total += cand[k]
            for k in range(m):
                cand[k] /= total
            f_new = _simplex_objective(P1, P0, cand, n)
            if f_new <= f or step < 1e-12:
                break
            step *= 0.5
        change = f - f_new
        if f_new <= f:
            for k in range(m):
                w[k] = cand[k]
            f = f_new
        step *= 2.0
        if change < tol:
            break
    return w, f

import warnings

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from scipy.special import expit, logit

from twostage_tmle.simgen import (MeasurementModel, SimParams, measurement_probability, simulate_cluster,
                                  target_probability)
from twostage_tmle.stage1 import (DEN_FLOOR, EndpointUndefined, TargetingError, estimate_endpoint,
                                  estimate_endpoint_eligible, estimate_endpoint_screened, estimate_endpoint_tmle,
                                  estimate_endpoint_unadjusted, influence_curve_ratio, target_denominator,
                                  tmle_denominator)

from conftest import make_cluster


def four(delta, y1, y2):
    return make_cluster(w1=(0.1, 0.2, 0.3, 0.4), w2=(1, 0, 1, 0), w3=(0, 0, 1, 1), delta=delta, y1=y1, y2=y2)


def sim(seed, **kw):
    return simulate_cluster(SimParams(**kw), np.random.default_rng(seed), str(seed))


# --- naive estimators ------------------------------------------------------

def test_screened_arithmetic():
    ep = estimate_endpoint_screened(four((1, 1, 1, 0), (1, 1, 0, 0), (1, 0, 0, 0)))
    assert ep.estimate == pytest.approx(1 / 3)
    assert (ep.numerator, ep.denominator) == (pytest.approx(1 / 3), 1.0)
    assert ep.ic.size == 3


def test_screened_full_measurement_is_mean():
    ep = estimate_endpoint_screened(four((1, 1, 1, 1), (1, 1, 1, 0), (1, 1, 0, 0)))
    assert ep.estimate == 0.5


def test_eligible_arithmetic_and_ratio_identity():
    c = four((1, 1, 1, 0), (1, 1, 0, 0), (1, 0, 0, 0))
    ep = estimate_endpoint_eligible(c)
    assert ep.estimate == 0.5
    assert ep.estimate == pytest.approx(c.y2.mean() / c.y1.mean(), abs=1e-15)


def test_naive_estimators_undefined():
    with pytest.raises(EndpointUndefined):
        estimate_endpoint_screened(four((0, 0, 0, 0), (0, 0, 0, 0), (0, 0, 0, 0)))
    with pytest.raises(EndpointUndefined):
        estimate_endpoint_eligible(four((1, 1, 0, 0), (0, 0, 0, 0), (0, 0, 0, 0)))


def test_unadjusted_arithmetic():
    ep = estimate_endpoint_unadjusted(four((1, 1, 0, 0), (1, 1, 0, 0), (1, 0, 0, 0)))
    assert (ep.numerator, ep.denominator, ep.estimate) == (0.25, 1.0, 0.25)


def test_unadjusted_full_measurement_identity():
    c = four((1, 1, 1, 1), (1, 0, 1, 0), (1, 0, 0, 0))
    ep = estimate_endpoint_unadjusted(c)
    assert ep.estimate == pytest.approx(c.y2.mean() / c.y1.mean())


def test_unadjusted_zero_denominator():
    with pytest.raises(EndpointUndefined):
        estimate_endpoint_unadjusted(four((1, 1, 0, 0), (0, 0, 0, 0), (0, 0, 0, 0)))


@pytest.mark.parametrize("method", ["screened", "eligible", "unadjusted", "tmle"])
def test_se_squared_is_ic_variance_over_n(method):
    c = sim(3).record
    ep = estimate_endpoint(c, method, seed=1)
    assert ep.se ** 2 == pytest.approx(np.var(ep.ic, ddof=1) / ep.ic.size, rel=1e-12)
    if method in ("unadjusted", "tmle"):
        assert ep.ic.size == c.n
        assert ep.estimate == pytest.approx(ep.numerator / ep.denominator, rel=1e-14)
        assert abs(ep.ic.mean()) < 1e-10


# --- delta method ------------------------------------------------------------

def test_ratio_ic_degenerate_cases(rng):
    ic_num = rng.normal(size=30)
    ic_num -= ic_num.mean()
    ic, _ = influence_curve_ratio(0.3, 0.6, ic_num, np.zeros(30))
    np.testing.assert_allclose(ic, ic_num / 0.6)
    ic, _ = influence_curve_ratio(0.0, 0.6, ic_num, rng.normal(size=30))
    np.testing.assert_allclose(ic, ic_num / 0.6)
    with pytest.raises(ValueError):
        influence_curve_ratio(0.3, 0.0, ic_num, ic_num)


def test_unadjusted_se_matches_bootstrap():
    r = np.random.default_rng(4)
    n = 100
    delta = (r.random(n) < 0.6).astype(int)
    y1s = (r.random(n) < 0.5).astype(int)
    y1 = delta * y1s
    y2 = y1 * (r.random(n) < 0.5)
    c = make_cluster(w1=r.random(n), w2=np.zeros(n, int), w3=np.zeros(n, int), delta=delta, y1=y1, y2=y2)
    ep = estimate_endpoint_unadjusted(c)
    boot = []
    for _ in range(2000):
        i = r.integers(0, n, n)
        d, a1, a2 = delta[i], y1[i], y2[i]
        if d.sum() == 0 or a1[d == 1].sum() == 0:
            continue
        boot.append(a2.mean() / a1[d == 1].mean())
    assert ep.se == pytest.approx(np.std(boot, ddof=1), rel=0.15)


# --- targeting ---------------------------------------------------------------

def test_already_targeted_epsilon_zero(rng):
    n = 60
    delta = (rng.random(n) < 0.7).astype(float)
    y1 = delta * (rng.random(n) < 0.4)
    q = np.full(n, y1[delta == 1].mean())
    _, eps = target_denominator(q, np.full(n, 0.7), delta, y1)
    assert abs(eps) < 1e-8


def test_g_one_targeted_mean_equals_mean_y1(rng):
    n = 50
    y1 = (rng.random(n) < 0.4).astype(float)
    q = np.clip(rng.random(n), 0.005, 0.995)
    q_star, _ = target_denominator(q, np.ones(n), np.ones(n), y1)
    assert q_star.mean() == pytest.approx(y1.mean(), abs=1e-10)


def fluct_loglik(eps, q, g, d, y):
    p = expit(logit(q[d]) + eps / g[d])
    return np.sum(y[d] * np.log(p) + (1 - y[d]) * np.log1p(-p))


def test_epsilon_matches_grid_search():
    r = np.random.default_rng(9)
    n = 50
    g = r.uniform(0.2, 1.0, n)
    d = r.random(n) < g
    y = (d & (r.random(n) < 0.5)).astype(float)
    q = r.uniform(0.1, 0.9, n)
    _, eps = target_denominator(q, g, d.astype(float), y)
    # coarse grid then successively finer grids down to 1e-7 spacing
    lo, hi = -5.0, 5.0
    for step in (1e-2, 1e-4, 1e-6, 1e-7):
        grid = np.arange(lo, hi + step / 2, step)
        best = grid[np.argmax([fluct_loglik(e, q, g, d, y) for e in grid])]
        lo, hi = best - 10 * step, best + 10 * step
    assert eps == pytest.approx(best, abs=1e-6)


@settings(max_examples=40, deadline=None)
@given(st.integers(0, 2**31))
def test_score_identity_property(seed):
    r = np.random.default_rng(seed)
    n = int(r.integers(5, 150))
    g = r.uniform(0.025, 1.0, n)
    d = (r.random(n) < g).astype(float)
    y = d * (r.random(n) < r.uniform(0.05, 0.95))
    if d.sum() == 0 or y[d == 1].min() == y[d == 1].max():
        with pytest.raises((TargetingError, ValueError)):
            target_denominator(np.full(n, 0.5), g, d, y)
        return
    q = r.uniform(0.005, 0.995, n)
    q_star, _ = target_denominator(q, g, d, y)
    m = d == 1
    assert abs(np.sum((y[m] - q_star[m]) / g[m])) < 1e-8 * n


def test_constant_measured_outcome_raises():
    with pytest.raises(TargetingError):
        target_denominator(np.full(4, 0.5), np.ones(4), np.ones(4), np.ones(4))


# --- TMLE endpoint -----------------------------------------------------------

def test_tmle_full_measurement():
    c = sim(1, measurement=MeasurementModel(constant=1.0)).record
    ep = estimate_endpoint_tmle(c, seed=3)
    assert ep.estimate == pytest.approx(c.y2.mean() / c.y1.mean(), abs=1e-9)
    assert ep.nuisance.g is None


def test_tmle_collapses_to_unadjusted_with_mean_library():
    c = sim(2).record
    ep = estimate_endpoint_tmle(c, library="mean", seed=3)
    assert ep.denominator == pytest.approx(c.y1[c.delta == 1].mean(), abs=1e-8)
    assert abs(ep.epsilon) < 1e-8


def test_tmle_denominator_near_integrated_truth():
    z = []
    for seed in range(10):
        draw = sim(100 + seed, n_mean=200, n_sd=0)
        c = draw.record
        truth = target_probability(SimParams().target, c.e1c, c.e2c, draw.u_e1, draw.u_e2, c.w1, c.w2, c.w3).mean()
        ep = estimate_endpoint_tmle(c, seed=seed)
        g = np.clip(ep.nuisance.g.predict(c.covariates(), c.n), 0.025, 1.0)
        q = ep.nuisance.qbar_star
        ic_den = c.delta / g * (c.y1 - q) + q - ep.denominator
        z.append((ep.denominator - truth) / np.sqrt(np.var(ic_den, ddof=1) / c.n))
    assert np.max(np.abs(z)) < 3
    assert abs(np.mean(z)) < 3 / np.sqrt(len(z)) * 1.5


def test_tmle_score_identity_on_simulated_clusters():
    for seed in range(15):
        c = sim(seed).record
        ep = estimate_endpoint_tmle(c, seed=seed)
        g = np.clip(ep.nuisance.g.predict(c.covariates(), c.n), 0.025, 1.0)
        m = c.delta == 1
        assert abs(np.sum((c.y1[m] - ep.nuisance.qbar_star[m]) / g[m])) < 1e-8 * c.n


def test_tmle_reorder_invariant_with_single_candidate_library():
    c = sim(6).record
    perm = np.random.default_rng(0).permutation(c.n)
    shuffled = make_cluster(c.id, c.a, c.w1[perm], c.w2[perm], c.w3[perm], c.delta[perm], c.y1[perm],
                            c.y2[perm], c.e1c, c.e2c)
    a = estimate_endpoint_tmle(c, library="glm", seed=1)
    b = estimate_endpoint_tmle(shuffled, library="glm", seed=1)
    assert a.estimate == pytest.approx(b.estimate, abs=1e-10)
    for m in ("screened", "eligible", "unadjusted"):
        assert estimate_endpoint(c, m).estimate == pytest.approx(estimate_endpoint(shuffled, m).estimate, abs=1e-14)


def test_tmle_deterministic_given_seed():
    c = sim(8).record
    assert estimate_endpoint_tmle(c, seed=5).estimate == estimate_endpoint_tmle(c, seed=5).estimate


def test_tmle_floor_flag():
    n = 400
    delta = np.ones(n, int)
    delta[:50] = 0
    y1 = np.zeros(n, int)
    y1[60] = 1
    c = make_cluster(w1=np.linspace(0, 1, n), w2=np.zeros(n, int), w3=np.zeros(n, int), delta=delta, y1=y1,
                     y2=y1)
    with pytest.warns(UserWarning, match="floored"):
        ep = estimate_endpoint_tmle(c, library="mean", seed=0)
    assert ep.floored and ep.denominator == DEN_FLOOR


def test_tmle_undefined_cases():
    with pytest.raises(EndpointUndefined):
        estimate_endpoint_tmle(four((0, 0, 0, 0), (0, 0, 0, 0), (0, 0, 0, 0)))
    with pytest.raises(EndpointUndefined):
        estimate_endpoint_tmle(four((1, 0, 0, 0), (1, 0, 0, 0), (0, 0, 0, 0)))


def test_adjust_l_requires_column():
    with pytest.raises(ValueError, match="l"):
        estimate_endpoint_tmle(sim(1).record, adjust_l=True)


def test_unknown_method():
    with pytest.raises(ValueError):
        estimate_endpoint(sim(1).record, "oracle")


# --- large-sample properties -------------------------------------------------

def big_cluster(seed, **kw):
    return sim(seed, n_mean=100_000, n_sd=0, **kw)


def test_double_robust_true_g_wrong_q():
    draw = big_cluster(21)
    c = draw.record
    g = measurement_probability(SimParams().measurement, c.a, c.e1c, c.e2c, draw.u_e1, draw.u_e2, c.w1, c.w2, c.w3)
    g = np.clip(g, 0.025, 1.0)
    q = np.full(c.n, c.y1[c.delta == 1].mean())
    den, ic, _, _ = tmle_denominator(q, g, c.delta, c.y1)
    truth = c.latents.y1_star.mean()
    assert abs(den - truth) < 3 * np.sqrt(np.var(ic, ddof=1) / c.n)


def test_double_robust_true_q_wrong_g():
    draw = big_cluster(22)
    c = draw.record
    q = target_probability(SimParams().target, c.e1c, c.e2c, draw.u_e1, draw.u_e2, c.w1, c.w2, c.w3)
    q = np.clip(q, 0.005, 0.995)
    g = np.full(c.n, c.delta.mean())
    den, ic, _, _ = tmle_denominator(q, g, c.delta, c.y1)
    truth = c.latents.y1_star.mean()
    assert abs(den - truth) < 3 * np.sqrt(np.var(ic, ddof=1) / c.n)


def test_naive_targets_differ_from_counterfactual_endpoint():
    c = big_cluster(23).record
    m = c.latents.y1_star == 1
    ycstar = c.latents.y2_cf(c.a)[m].mean()
    for method in ("screened", "eligible", "unadjusted"):
        ep = estimate_endpoint(c, method)
        assert abs(ep.estimate - ycstar) > 3 * ep.se, method

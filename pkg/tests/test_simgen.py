import dataclasses
import json

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from scipy.special import expit, roots_hermitenorm, roots_legendre

from twostage_tmle.data import validate
from twostage_tmle.simgen import (ExtendedParams, MeasurementBranch, MeasurementModel, OutcomeModel, SimParams,
                                  TargetModel, cluster_rng, compute_truth, generate_cluster, generate_trial,
                                  generate_trial_extended, load_params, measurement_probability, simulate_cluster,
                                  truth_seed)


def no_arm_measurement():
    m = MeasurementModel()
    return MeasurementModel(dataclasses.replace(m.w3_one, a=0.0, w2_a=0.0),
                            dataclasses.replace(m.w3_zero, a=0.0, w2_a=0.0))


def test_w3_zero_uses_second_branch_only():
    m = MeasurementModel()
    other = dataclasses.replace(m, w3_one=MeasurementBranch(*[9.0] * 9))
    args = (1, 0.3, -0.2, 0.5, 0.1, np.array([0.2, 0.8]), np.array([1, 0]), np.array([0, 0]))
    np.testing.assert_array_equal(measurement_probability(m, *args), measurement_probability(other, *args))
    b = m.w3_zero
    eta = b.intercept + b.a + b.w1 * 0.2 + b.w2_a + b.e1 * 0.3 + b.e2 * -0.2 + b.u_e1 * 0.5 + b.u_e2 * 0.1
    assert measurement_probability(m, *args)[0] == pytest.approx(expit(eta), abs=1e-15)


def test_structural_zero_outside_target(default_trial):
    for c in default_trial.clusters:
        lat = c.latents
        assert np.all(lat.y2_0[lat.y1_star == 0] == 0)
        assert np.all(lat.y2_1[lat.y1_star == 0] == 0)
        assert np.all(lat.y2_0[lat.delta0 == 0] == 0)
        assert np.all(lat.y2_1[lat.delta1 == 0] == 0)


def test_generated_trials_validate(default_trial, small_trial):
    assert validate(default_trial).ok
    assert validate(small_trial).ok


def test_trial_determinism_and_ids():
    p = SimParams(j=8)
    a, b = generate_trial(p, 3), generate_trial(p, 3)
    assert a == b
    assert [c.id for c in a.clusters] == [str(j) for j in range(1, 9)]
    assert generate_trial(p, 4) != a


def test_cluster_stream_independent_of_trial_size():
    small = generate_trial(SimParams(j=3), 9)
    large = generate_trial(SimParams(j=10), 9)
    assert small.clusters == large.clusters[:3]


def test_w1_scaled_to_unit_interval(default_trial):
    w1 = np.concatenate([c.w1 for c in default_trial.clusters])
    assert w1.min() >= 0 and w1.max() <= 1


def test_mean_cluster_size(default_trial):
    sizes = [c.n for c in default_trial.clusters]
    assert abs(np.mean(sizes) - 100) < 3 * 10 / np.sqrt(150)
    assert min(sizes) >= 2


def test_cluster_size_floor():
    c = generate_cluster(SimParams(n_mean=0.5, n_sd=0.0), np.random.default_rng(0))
    assert c.n == 2


def test_arm_counts_binomial():
    p = SimParams(n_mean=2, n_sd=0)
    counts = [sum(simulate_cluster(p, cluster_rng(seed, j)).record.a for j in range(1, 151)) for seed in range(1000)]
    half_width = 2.576 * np.sqrt(150 * 1000 * 0.25) / 1000
    assert abs(np.mean(counts) - 75) < half_width


def _quadrature_delta_difference(m: MeasurementModel, params: SimParams):
    """E[P(delta=1 | A=1) - P(delta=1 | A=0)] by tensor-product Gauss quadrature."""
    xl, wl = roots_legendre(12)
    xh, wh = roots_hermitenorm(12)
    wh = wh / wh.sum()
    u1, wu1 = 0.5 * (xl + 1) * params.u_e1_high, 0.5 * wl
    u2, wu2 = 0.5 * (xl + 1) * params.u_e2_high, 0.5 * wl
    w1, ww1 = 0.5 * (xl + 1), 0.5 * wl
    U1, U2, Z1, Z2, W1 = np.meshgrid(u1, u2, xh, xh, w1, indexing="ij")
    weight = np.einsum("a,b,c,d,e->abcde", wu1, wu2, wh, wh, ww1)
    E1, E2 = U1 + Z1, U2 + Z2
    total = 0.0
    for w2, pw2 in ((1, params.p_w2), (0, 1 - params.p_w2)):
        for w3, pw3 in ((1, params.p_w3), (0, 1 - params.p_w3)):
            diff = (measurement_probability(m, 1, E1, E2, U1, U2, W1, w2, w3)
                    - measurement_probability(m, 0, E1, E2, U1, U2, W1, w2, w3))
            total += pw2 * pw3 * np.sum(weight * diff)
    return total


def test_measurement_arm_difference_matches_quadrature():
    params = SimParams()
    exact = _quadrature_delta_difference(params.measurement, params)
    n_total = diff = 0
    for j in range(10_000):
        lat = generate_cluster(params, cluster_rng(77, j)).latents
        n_total += lat.delta0.size
        diff += int(lat.delta1.sum()) - int(lat.delta0.sum())
    assert n_total > 900_000
    assert abs(diff / n_total - exact) < 0.002


@settings(max_examples=25, deadline=None)
@given(st.integers(0, 2**31), st.floats(0.01, 2.0))
def test_raising_probabilities_never_flips_one_to_zero(seed, bump):
    base = SimParams(n_mean=50)
    target = dataclasses.replace(base.target, intercept=base.target.intercept + bump)
    outcome = dataclasses.replace(base.outcome, intercept=base.outcome.intercept + bump)
    m = base.measurement
    measurement = MeasurementModel(dataclasses.replace(m.w3_one, intercept=m.w3_one.intercept + bump),
                                   dataclasses.replace(m.w3_zero, intercept=m.w3_zero.intercept + bump))
    raised = dataclasses.replace(base, target=target, outcome=outcome, measurement=measurement)
    lo = generate_cluster(base, np.random.default_rng(seed)).latents
    hi = generate_cluster(raised, np.random.default_rng(seed)).latents
    for f in ("y1_star", "delta0", "delta1", "y2_0", "y2_1"):
        assert np.all(getattr(hi, f) >= getattr(lo, f)), f


# --- truth -------------------------------------------------------------------

def test_truth_zero_without_arm_pathways():
    p = SimParams(truth_clusters=1000, outcome=OutcomeModel(a=0.0, a_w3=0.0), measurement=no_arm_measurement())
    t = compute_truth(p, 1)
    assert abs(t.psi_star) <= 3 * t.se + 1e-15
    assert t.psi_star == pytest.approx(t.yc1_mean - t.yc0_mean, abs=1e-15)


def test_indirect_effect_persists_without_direct_effect():
    p = SimParams(truth_clusters=1000, outcome=OutcomeModel(a=0.0, a_w3=0.0))
    t = compute_truth(p, 1)
    assert t.psi_star > 3 * t.se


def test_truth_counts_and_seed():
    t = compute_truth(SimParams(truth_clusters=1000), truth_seed(1))
    assert t.clusters_used + t.clusters_dropped == 1000
    assert truth_seed(1) != truth_seed(2)


def test_truth_all_dropped_is_error():
    p = SimParams(truth_clusters=1000, target=TargetModel(intercept=-60.0), n_mean=2, n_sd=0)
    with pytest.raises(ValueError, match="target-population"):
        compute_truth(p, 1)


# --- extended ----------------------------------------------------------------

ZERO_L = ExtendedParams(**{f.name: 0.0 for f in dataclasses.fields(ExtendedParams)})


def test_extended_with_zero_terms_reproduces_base():
    base = generate_trial(SimParams(j=10), 4)
    ext = generate_trial_extended(SimParams(j=10, extended=ZERO_L), 4)
    for b, e in zip(base.clusters, ext.clusters):
        for f in ("e1c", "e2c", "a"):
            assert getattr(b, f) == getattr(e, f)
        for f in ("w1", "w2", "w3", "delta", "y1", "y2"):
            np.testing.assert_array_equal(getattr(b, f), getattr(e, f))
        np.testing.assert_array_equal(e.latents.y1_star0, e.latents.y1_star1)


def test_extended_membership_changes_with_arm():
    p = SimParams(j=1100, extended=ExtendedParams())
    data = generate_trial_extended(p, 8)
    changed = sum(int(np.sum(c.latents.y1_star0 != c.latents.y1_star1)) for c in data.clusters)
    total = sum(c.n for c in data.clusters)
    assert total >= 100_000 and changed > 0
    assert validate(data).ok
    for c in data.clusters:
        lat = c.latents
        for a in (0, 1):
            assert np.all(lat.y2_cf(a)[(lat.delta_cf(a) == 0) | (lat.y1_star_cf(a) == 0)] == 0)


def test_extended_requires_params():
    with pytest.raises(ValueError):
        generate_trial_extended(SimParams(j=4), 1)


# --- parameters --------------------------------------------------------------

def test_param_validation():
    with pytest.raises(ValueError):
        SimParams(truth_clusters=999)
    with pytest.raises(ValueError):
        SimParams(n_mean=0)


def test_params_round_trip_and_partial_override(tmp_path):
    p = SimParams.from_dict({"j": 20, "outcome": {"a": 0.0}, "measurement": {"w3_one": {"a": 0.3}},
                             "extended": {"l_a": 2.0}})
    assert p.j == 20 and p.outcome.a == 0.0 and p.outcome.intercept == 0.2
    assert p.measurement.w3_one.a == 0.3 and p.measurement.w3_one.w1 == -2.0
    assert p.extended.l_a == 2.0 and p.extended.y2_l == -0.5
    assert SimParams.from_dict(p.to_dict()) == p
    path = tmp_path / "cfg.json"
    path.write_text(json.dumps({"sim": {"j": 33}}))
    assert load_params(path).j == 33
    with pytest.raises(ValueError, match="unknown parameter"):
        SimParams.from_dict({"jj": 3})


def test_membership_invariance_check(default_trial):
    from twostage_tmle.simgen import membership_invariance_violations
    assert membership_invariance_violations(default_trial) == 0
    assert membership_invariance_violations(generate_trial(SimParams(j=20, extended=ExtendedParams()), 1)) > 0

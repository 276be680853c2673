import json
import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from liperm import bounds
from liperm.ad import ConfigurationError
from liperm.bounds import (
    BoundReport,
    covering_count_check,
    default_grid_m,
    ga_function,
    ga_lower_bound_check,
    hard_lower_bound,
    inf_g0_proxy,
    lambda_threshold,
    report,
    soft_lower_bound,
    ub_decomposition,
    unit_ball_volume,
)
import oracles


def test_unit_ball_volume_examples():
    assert unit_ball_volume(1) == pytest.approx(2.0, rel=1e-15)
    assert unit_ball_volume(2) == pytest.approx(math.pi, rel=1e-15)
    assert unit_ball_volume(5) == pytest.approx(oracles.V5, rel=1e-14)
    for d in range(1, 30):
        assert unit_ball_volume(d) == pytest.approx(oracles.ball_volume_recurrence(d), rel=1e-13)
    for bad in (0, -1, 1.5):
        with pytest.raises(ConfigurationError):
            unit_ball_volume(bad)


def test_hard_lower_bound_examples():
    assert hard_lower_bound(1, 1, 1) == pytest.approx(0.1, rel=1e-14)
    assert hard_lower_bound(1, 256, 2) == pytest.approx(oracles.HARD_LB_N256_D2, rel=1e-13)
    assert hard_lower_bound(2, 37, 3) == pytest.approx(hard_lower_bound(1, 37, 3) / 2, rel=1e-15)


def test_hard_lower_bound_monotonicity():
    Ls = [0.5, 1.0, 2.0, 4.0]
    ns = [1, 2, 8, 64, 1024]
    ds = [1, 2, 3, 5, 8]
    for L in Ls:
        for n in ns:
            # (2 V_d n)^(1/d) shrinks as d grows, so the bound rises with d
            vals = [hard_lower_bound(L, n, d) for d in ds]
            assert all(a < b for a, b in zip(vals, vals[1:]))
        for d in ds:
            vals = [hard_lower_bound(L, n, d) for n in ns]
            assert all(a > b for a, b in zip(vals, vals[1:]))
    for n in ns:
        vals = [hard_lower_bound(L, n, 2) for L in Ls]
        assert all(a > b for a, b in zip(vals, vals[1:]))


def test_soft_lower_bound_examples():
    assert soft_lower_bound(1, 256, 2, 3.0, 2, 0.0) == hard_lower_bound(1, 256, 2)
    assert soft_lower_bound(1, 256, 2, 4, 2, 0.01) == pytest.approx(oracles.SOFT_LB_EXAMPLE, rel=1e-13)
    rep = report("soft_lb", L_H=1, n=256, d=2, lam=4, q=2, inf_g0_ipm=0.01)
    assert rep.flags["vacuous"]
    with pytest.raises(ConfigurationError):
        soft_lower_bound(1, 256, 2, 0.0, 2, 0.01)


def test_soft_bound_increases_to_hard_bound():
    lams = np.logspace(-2, 12, 30)
    vals = [soft_lower_bound(1, 100, 2, lam, 2, 0.05) for lam in lams]
    assert all(a < b for a, b in zip(vals, vals[1:]))
    assert vals[-1] == pytest.approx(hard_lower_bound(1, 100, 2), abs=1e-6)


def test_lambda_threshold_examples():
    assert lambda_threshold(256, 2, 2, 0.0) == 0.0
    assert lambda_threshold(1, 1, 1, 0.7) == pytest.approx(20 * 0.7, rel=1e-14)
    assert lambda_threshold(256, 2, 2, 0.02) == pytest.approx(oracles.LAMBDA_THRESHOLD_EXAMPLE, rel=1e-13)


def test_threshold_makes_soft_bound_half_the_hard_bound():
    # at the threshold the subtracted term is 1/(4 L_H G), exactly half the hard bound
    for q in (1.0, 2.0, 3.0):
        inf = 0.013
        lam = lambda_threshold(256, 2, q, inf)
        hard = hard_lower_bound(1.7, 256, 2)
        assert soft_lower_bound(1.7, 256, 2, lam, q, inf) == pytest.approx(hard / 2, rel=1e-12)


def test_inf_proxy_examples():
    assert inf_g0_proxy(0, 0, 2, 256, 0.5) == 0.0
    assert inf_g0_proxy(1, 0, 2, 256, 0.5) == pytest.approx(oracles.INF_PROXY_EXAMPLE, rel=1e-14)
    assert inf_g0_proxy(2, 0, 3, 100, 0.4) == pytest.approx(2 * inf_g0_proxy(1, 0, 3, 100, 0.4), rel=1e-15)


def test_ub_decomposition_examples():
    assert ub_decomposition(0, 0, 0, 0, 0, 2, 256, 0.5).value == 0.0
    assert ub_decomposition(0, 0, 0, 1, 0, 2, 256, 0.5).value == 4.0
    # penalty vanishes and the oracle sits at sigma*: 5 sigma* + c L* sqrt(d) n^(-1/d)
    s = 0.3
    rep = ub_decomposition(s, 0.0, 8.0, s, 1.0, 2, 256, 0.5)
    assert rep.terms["oracle_ipm"] + rep.terms["misspecification"] == pytest.approx(5 * s)
    assert rep.value == pytest.approx(5 * s + oracles.INF_PROXY_EXAMPLE, rel=1e-14)
    assert "fitted" in rep.notes
    with pytest.raises(ConfigurationError):
        ub_decomposition(-1, 0, 0, 0, 0, 2, 256, 0.5)


def test_reports_recompute_bit_exactly_and_serialize():
    reps = [
        report("hard_lb", L_H=3.1, n=77, d=3),
        report("soft_lb", L_H=1.0, n=256, d=2, lam=2.0, q=2.0, inf_g0_ipm=0.001),
        report("lambda_threshold", n=256, d=2, q=2.0, inf_g0_ipm=0.02),
        report("inf_g0_proxy", L_star=1.0, sigma_star=0.1, d=2, n=256, c_hat=0.6),
        ub_decomposition(0.1, 0.01, 4.0, 0.0, 1.0, 2, 256, 0.6),
    ]
    for r in reps:
        assert r.recompute() == r.value
        back = BoundReport.from_dict(json.loads(r.to_json()))
        assert back.recompute() == r.value
        assert back.value == r.value
    assert reps[0].derived["V_d"] == unit_ball_volume(3)
    with pytest.raises(ConfigurationError):
        report("nonsense", n=1)


def test_ga_function_examples():
    assert ga_function(np.array([0.2, 0.3]), np.array([[0.2, 0.3], [0.9, 0.9]])) == 0.0
    assert ga_function(np.array([0.3]), np.array([[0.0]])) == pytest.approx(0.3)
    assert ga_function(np.array([2.0, 0.0]), np.zeros((1, 2))) == 1.0
    x = np.random.default_rng(0).random((500, 2))
    A = np.random.default_rng(1).random((7, 2))
    v = ga_function(x, A)
    assert np.all(v >= 0) and np.all(v <= 1)
    # 1-Lipschitz
    y = x + 1e-3 * np.random.default_rng(2).standard_normal(x.shape)
    assert np.all(np.abs(ga_function(y, A) - v) <= np.linalg.norm(y - x, axis=1) + 1e-15)


def test_ga_check_center_and_corner():
    center = ga_lower_bound_check([[0.5, 0.5]], [1.0], 2, mc_samples=20_000, seed=0)
    assert center.passed
    assert center.rhs_bound == pytest.approx(1 / (2 + 2 * math.sqrt(2 * math.pi)), rel=1e-14)
    assert abs(center.exact_w1 - oracles.CENTER_MEAN_DISTANCE) <= center.grid_error
    assert center.lhs_estimate >= 0
    corner = ga_lower_bound_check([[0.0, 0.0]], [1.0], 2, mc_samples=20_000, seed=0)
    assert corner.exact_w1 > center.exact_w1
    with pytest.raises(ConfigurationError):
        ga_lower_bound_check([[0.5, 0.5]], [0.5], 2)


def test_ga_check_negative_control():
    res = ga_lower_bound_check(np.random.default_rng(0).random((64, 2)), np.full(64, 1 / 64), 2,
                               mc_samples=5000, seed=0, scale=10.0)
    assert not res.passed and res.margin < 0


def test_default_grid_m():
    # wanted resolution: grid error at most one eighth of the bound, unless capped
    m = default_grid_m(1, 1, budget=10**9)
    assert bounds.grid_error(1, m) <= hard_lower_bound(1, 1, 1) / 8
    assert default_grid_m(256, 2) == 64
    assert default_grid_m(256, 3) == 16


def test_covering_examples():
    res = covering_count_check([(np.array([0.5]), 0.5)], 1, mc_samples=10_000)
    assert res.applicable and res.holds
    assert res.k_min == pytest.approx(0.5)
    assert res.mass == pytest.approx(1.0)
    small = covering_count_check([(np.array([0.5, 0.5]), 0.05)], 2, mc_samples=10_000)
    assert not small.applicable and small.holds
    with pytest.raises(ConfigurationError):
        covering_count_check([(np.array([0.5]), -0.1)], 1)
    with pytest.raises(ConfigurationError):
        covering_count_check([], 1)


def test_covering_union_mass_monte_carlo_matches_area():
    mass = bounds.union_mass(np.array([[0.5, 0.5]]), np.array([0.25]), 2, 200_000, seed=0)
    assert mass == pytest.approx(math.pi / 16, abs=0.005)


@settings(max_examples=30, deadline=None)
@given(st.floats(0.1, 10), st.integers(1, 10_000), st.integers(1, 6), st.floats(1, 4), st.floats(0, 1))
def test_soft_never_exceeds_hard(L, n, d, q, inf):
    assert soft_lower_bound(L, n, d, 1.0, q, inf) <= hard_lower_bound(L, n, d)
    assert lambda_threshold(n, d, q, inf) >= 0

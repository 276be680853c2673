import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from liperm.ad import ConfigurationError
from liperm.flow import transport
from liperm.measures import (
    DiscreteMeasure,
    ResourceError,
    empirical_rate_study,
    exact_w1,
    grid_error,
    grid_uniform,
    loglog_slope,
    pushforward,
    sample_uniform,
    w1,
)
from oracles import lp_transport_cost


def test_measure_validation():
    with pytest.raises(ConfigurationError):
        DiscreteMeasure(np.array([[0.5]]), np.array([0.9]))
    with pytest.raises(ConfigurationError):
        DiscreteMeasure(np.array([[1.5]]), np.array([1.0]))
    with pytest.raises(ConfigurationError):
        DiscreteMeasure(np.array([[0.1], [0.2]]), np.array([1.5, -0.5]))
    m = DiscreteMeasure(np.array([0.1, 0.2]), np.array([0.5, 0.5]))
    assert m.dim == 1 and len(m) == 2


def test_csv_round_trip_is_exact():
    rng = np.random.default_rng(3)
    m = DiscreteMeasure.uniform(rng.random((9, 3)))
    back = DiscreteMeasure.parse_csv(m.to_csv())
    np.testing.assert_array_equal(back.points, m.points)
    np.testing.assert_array_equal(back.weights, m.weights)
    assert m.to_csv().splitlines()[0] == "w,x1,x2,x3"


def test_deduplicated_merges_mass():
    m = DiscreteMeasure(np.array([[0.1, 0.1], [0.1, 0.1], [0.5, 0.5]]), np.array([0.25, 0.25, 0.5]))
    dd = m.deduplicated()
    assert len(dd) == 2
    np.testing.assert_allclose(sorted(dd.weights), [0.5, 0.5])


def test_two_diracs():
    a = DiscreteMeasure.uniform(np.array([[0.0]]))
    b = DiscreteMeasure.uniform(np.array([[1.0]]))
    assert w1(a, b) == pytest.approx(1.0, abs=1e-12)


def test_split_mass_example():
    mu = DiscreteMeasure(np.array([[0.0], [1.0]]), np.array([0.5, 0.5]))
    nu = DiscreteMeasure.uniform(np.array([[0.5]]))
    assert w1(mu, nu) == pytest.approx(0.5, abs=1e-12)


def test_single_atom_against_uniform_bounded_by_diameter():
    c, plan = exact_w1(grid_uniform(2, 32), DiscreteMeasure.uniform(np.array([[0.3, 0.9]])))
    assert 0.0 <= c <= math.sqrt(2)
    P = plan.matrix(32 * 32, 1)
    np.testing.assert_allclose(P.sum(axis=1), 1.0 / 1024)


def test_plan_marginals_and_cost():
    rng = np.random.default_rng(1)
    mu = DiscreteMeasure(rng.random((30, 2)), rng.dirichlet(np.ones(30)))
    nu = DiscreteMeasure(rng.random((20, 2)), rng.dirichlet(np.ones(20)))
    cost, plan = exact_w1(mu, nu)
    P = plan.matrix(30, 20)
    np.testing.assert_allclose(P.sum(1), mu.weights, atol=1e-12)
    np.testing.assert_allclose(P.sum(0), nu.weights, atol=1e-12)
    C = np.linalg.norm(mu.points[:, None] - nu.points[None], axis=2)
    assert float((P * C).sum()) == pytest.approx(cost, abs=1e-12)
    assert cost == pytest.approx(lp_transport_cost(C, mu.weights, nu.weights), abs=1e-9)


def test_zero_weight_atoms_are_ignored():
    mu = DiscreteMeasure(np.array([[0.0], [1.0]]), np.array([1.0, 0.0]))
    nu = DiscreteMeasure.uniform(np.array([[0.25]]))
    assert w1(mu, nu) == pytest.approx(0.25)


def test_pair_cap_raises_resource_error():
    a = DiscreteMeasure.uniform(np.random.default_rng(0).random((100, 2)))
    with pytest.raises(ResourceError):
        exact_w1(a, a, pair_cap=9999)


def test_dimension_mismatch():
    with pytest.raises(ConfigurationError):
        w1(DiscreteMeasure.uniform(np.zeros((1, 1))), DiscreteMeasure.uniform(np.zeros((1, 2))))


def test_transport_degenerate_supplies():
    # many ties and zero-cost arcs exercise the anti-cycling rule
    C = np.zeros((5, 5))
    r, c, m, total, _ = transport(C, np.full(5, 0.2), np.full(5, 0.2))
    assert total == 0.0 and m.sum() == pytest.approx(1.0)


def test_grid_uniform_and_error():
    g = grid_uniform(2, 4)
    assert len(g) == 16
    assert g.points.min() == 0.125 and g.points.max() == 0.875
    assert grid_error(2, 4) == pytest.approx(math.sqrt(2) / 8)
    with pytest.raises(ResourceError):
        grid_uniform(3, 200)
    with pytest.raises(ConfigurationError):
        grid_uniform(0, 4)


def test_grid_w1_to_uniform_within_error():
    # W1(U_1, grid of m points) is exactly 1/(4m); the bound is 1/(2m)
    for m in (1, 4, 16):
        fine = grid_uniform(1, 4096)
        assert w1(grid_uniform(1, m), fine) <= grid_error(1, m) + 1e-12


def test_sample_uniform_is_seeded():
    a, b = sample_uniform(3, 10, 7), sample_uniform(3, 10, 7)
    np.testing.assert_array_equal(a.points, b.points)
    with pytest.raises(ConfigurationError):
        sample_uniform(2, 0, 1)


def test_pushforward_keeps_weights():
    lat = sample_uniform(2, 5, 0)
    out = pushforward(lambda u: u[:, :1] * 0.5, lat)
    assert out.dim == 1
    np.testing.assert_array_equal(out.weights, lat.weights)


def test_loglog_slope_exact_power_law():
    ns = np.array([10, 20, 40, 80])
    assert loglog_slope(ns, 3.0 * ns**-0.5) == pytest.approx(-0.5)


def test_rate_study_refuses_coarse_grid():
    with pytest.raises(ConfigurationError):
        empirical_rate_study(2, [32, 256], trials=1, grid_m=4, seed=0)


def test_rate_study_small_and_deterministic():
    a = empirical_rate_study(1, [8, 16, 32], trials=3, grid_m=256, seed=5)
    b = empirical_rate_study(1, [8, 16, 32], trials=3, grid_m=256, seed=5)
    assert a.to_csv() == b.to_csv()
    assert a.c_hat > 0 and a.low_dim_regime
    assert a.to_csv().splitlines()[0] == "n,mean_w1,grid_error"


points = st.integers(1, 5).flatmap(
    lambda k: st.lists(st.lists(st.floats(0, 1), min_size=2, max_size=2), min_size=k, max_size=k)
)


@settings(max_examples=40, deadline=None)
@given(points, points, points)
def test_metric_axioms(a, b, c):
    A, B, C = (DiscreteMeasure.uniform(np.array(p)) for p in (a, b, c))
    ab, ba = w1(A, B), w1(B, A)
    assert ab >= -1e-12
    assert ab == pytest.approx(ba, abs=1e-9)
    assert w1(A, A) == pytest.approx(0.0, abs=1e-9)
    assert ab <= w1(A, C) + w1(C, B) + 1e-9

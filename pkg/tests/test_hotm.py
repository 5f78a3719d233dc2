import csv
import json
import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st
from scipy.linalg import expm

from neurostab import dalgebra as da
from neurostab import hotm
from neurostab.exceptions import ValidationError
from neurostab.odeflow import ORACLE_TOL, QuadParams

P = QuadParams()

A_LIN = np.array([
    [-0.5, 1.0, 0.0, 0.0, 0.0],
    [-1.0, -0.5, 0.2, 0.0, 0.0],
    [0.0, 0.0, -1.0, 0.3, 0.0],
    [0.0, 0.0, 0.0, -0.8, 0.5],
    [0.1, 0.0, 0.0, 0.0, -1.2],
])


def linear_maps(order, T, x0=np.array([1.0, -0.5, 0.3, 0.2, -0.1])):
    return hotm.propagate_taylor_maps(lambda x: A_LIN @ x, x0, order, (0.0, T), ORACLE_TOL)


def square_maps(x0, t, order=7):
    return hotm.propagate_taylor_maps(lambda x: x * x, [x0], order, (0.0, t), ORACLE_TOL)


# -- linear oracle ----------------------------------------------------------------------


def test_linear_system_matches_matrix_exponential():
    maps = linear_maps(3, 2.0)
    x0 = np.array([1.0, -0.5, 0.3, 0.2, -0.1])
    for m in maps[1:]:
        E = expm(A_LIN * m.time)
        np.testing.assert_allclose(hotm.unfold(m.poly, 1), E, atol=1e-8)
        np.testing.assert_allclose(m.nominal, E @ x0, atol=1e-8)
        for i in (2, 3):
            assert np.max(np.abs(hotm.unfold(m.poly, i))) < 1e-10


def test_first_order_norm_tracks_exponential():
    for m in linear_maps(2, 3.0)[1:]:
        assert hotm.unfold_norms(m)[0] == pytest.approx(np.linalg.norm(expm(A_LIN * m.time), 2),
                                                        rel=1e-7)


def test_linear_map_collapses_at_large_time():
    m = linear_maps(2, 40.0)[-1]
    ok, b = hotm.check_asymptotic(m)
    assert ok and b[0] < 1e-3 and b[1] < 1e-10


def test_map_at_zero_is_nominal(lqr):
    maps = hotm.propagate_maps(lqr, x0=np.array([-1.0, 0, 0, 0, 0]), order=3, T=1.0)
    for m in maps[::5]:
        np.testing.assert_array_equal(m(np.zeros(5)), m.nominal)


# -- polynomial size ------------------------------------------------------------------------


@pytest.mark.parametrize("k,terms", [(1, 5), (2, 20), (3, 55), (4, 125), (5, 251), (6, 461), (7, 791)])
def test_component_term_counts(k, terms):
    m = hotm.TaylorMap(0.0, da.make_variables(np.zeros(5), da.AlgebraConfig(5, k)))
    assert m.poly.cfg.size - 1 == terms
    assert m.poly.coeffs.shape == (5, terms + 1)


# -- unfolding --------------------------------------------------------------------------------


def test_identity_map_norms():
    b = hotm.unfold_norms(da.make_variables(np.ones(5), da.AlgebraConfig(5, 3)))
    np.testing.assert_allclose(b, [1.0, 0.0, 0.0], atol=1e-15)


def test_scalar_unfolding_is_coefficient_magnitude():
    p = da.TPoly([2.0, 4.0, 8.0, -16.0], da.AlgebraConfig(1, 3))
    np.testing.assert_allclose(hotm.unfold_norms(p), [4.0, 8.0, 16.0])


def test_square_flow_map_norms():
    # x' = x^2, x(0) = 1 + d, t = 1/2: 2 (1 + d) / (1 - d) = 2 + 4d + 4d^2 + 4d^3
    m = square_maps(1.0, 0.5, order=3)[-1]
    assert m.nominal[0] == pytest.approx(2.0, rel=1e-7)
    np.testing.assert_allclose(hotm.unfold_norms(m), [4.0, 4.0, 4.0], rtol=1e-6)


def test_unfold_symmetric_replication(rng):
    cfg = da.AlgebraConfig(2, 2)
    x = da.make_variables([0.0, 0.0], cfg)
    p = da.stack([x[0] * x[1], x[0] * x[0]])
    A2 = hotm.unfold(p, 2)
    # columns (0,0), (1,0), (0,1), (1,1); the mixed term splits evenly
    np.testing.assert_allclose(A2, [[0, 0.5, 0.5, 0], [1, 0, 0, 0]])
    d = rng.normal(size=2)
    np.testing.assert_allclose(A2 @ np.kron(d, d), p.evaluate(d), atol=1e-14)


@given(st.integers(0, 2**32 - 1), st.integers(1, 4))
def test_unfolded_blocks_reproduce_polynomial(seed, order):
    r = np.random.default_rng(seed)
    cfg = da.AlgebraConfig(3, order)
    p = da.TPoly(r.normal(size=(3, cfg.size)), cfg)
    d = r.normal(size=3)
    total = p.constant.copy()
    kron = np.ones(1)
    for i in range(1, order + 1):
        kron = np.kron(d, kron)
        total = total + hotm.unfold(p, i) @ kron
    np.testing.assert_allclose(total, p.evaluate(d), rtol=1e-10, atol=1e-10)
    for i, b in enumerate(hotm.unfold_norms(p), start=1):
        assert b == pytest.approx(np.linalg.norm(hotm.unfold(p, i), 2), rel=1e-10)


# -- radius ---------------------------------------------------------------------------------


@given(st.floats(0.1, 10.0), st.integers(2, 8))
def test_geometric_radius(c, k):
    est = hotm.convergence_radius(c ** np.arange(1, k + 1))
    assert est.epsilon == pytest.approx(1 / c, rel=1e-12)
    assert est.orders == (k - 1, k)
    np.testing.assert_allclose(hotm.radius_ratios(c ** np.arange(1, k + 1)), 1 / c, rtol=1e-12)


def test_polynomial_map_has_infinite_radius():
    est = hotm.convergence_radius([1.0, 2.0, 0.0])
    assert est.infinite
    with pytest.raises(ValidationError):
        hotm.convergence_radius([1.0])


def test_square_flow_radius():
    m = square_maps(1.0, 0.5)[-1]
    est = hotm.convergence_radius(hotm.unfold_norms(m))
    assert abs(est.epsilon - 1.0) < 0.2


def test_radius_profile_and_csv(tmp_path):
    maps = square_maps(1.0, 0.4, order=4)
    prof, eps = hotm.radius_profile(maps)
    exact = np.abs(1 / prof.times[1:] - 1.0)
    np.testing.assert_allclose(eps[1:], exact, rtol=0.3)
    path = tmp_path / "r.csv"
    hotm.write_radius_csv(path, prof, eps)
    rows = list(csv.reader(open(path)))
    assert rows[0] == ["t", "b_1", "b_2", "b_3", "b_4", "epsilon"]
    assert len(rows) == len(maps) + 1


# -- consistency across orders ---------------------------------------------------------------


def test_order_consistency(lqr):
    x0 = np.array([-2.0, 0.5, 1.0, 0, 0.1])
    hi = hotm.propagate_maps(lqr, x0=x0, order=5, T=1.0)
    lo = hotm.propagate_maps(lqr, x0=x0, order=2, T=1.0)
    assert [m.time for m in hi] == [m.time for m in lo]
    np.testing.assert_allclose(hi[-1].poly.truncate(2).coeffs, lo[-1].poly.coeffs, rtol=1e-9, atol=1e-12)


def test_nominal_matches_float_integration(lqr):
    x0 = np.array([-2.0, 0.5, 1.0, 0, 0.1])
    maps = hotm.propagate_maps(lqr, x0=x0, order=2, T=2.0)
    prof = hotm.map_vs_truth(maps, hotm.closed_loop(lqr), x0, np.zeros(5))
    assert np.max(prof.error) < 10 * 1e-8 * max(1.0, np.max(np.abs(prof.truth)))


def test_map_error_shrinks_with_order(lqr):
    x0 = np.array([-2.0, 0.5, 1.0, 0, 0.1])
    dx0 = 0.01 * np.array([1.0, -1.0, 0.5, 0.5, 0.2])
    errs = []
    for k in (1, 2, 3):
        maps = hotm.propagate_maps(lqr, x0=x0, order=k, T=2.0)
        errs.append(np.max(hotm.map_vs_truth(maps, hotm.closed_loop(lqr), x0, dx0).error))
    assert errs[0] < 1e-3
    assert errs[2] < errs[1] < errs[0]


def test_map_error_csv(lqr, tmp_path):
    maps = hotm.propagate_maps(lqr, x0=np.ones(5) * 0.1, order=2, T=0.5)
    prof = hotm.map_vs_truth(maps, hotm.closed_loop(lqr), np.ones(5) * 0.1, np.full(5, 1e-3))
    path = tmp_path / "e.csv"
    prof.to_csv(path)
    header = next(csv.reader(open(path)))
    assert header[0] == "t" and header[1] == "map_y" and header[6] == "true_y" and header[-1] == "error"


# -- bound ------------------------------------------------------------------------------------


def test_perturbation_bound_values():
    assert hotm.perturbation_bound([1.0, 2.0, 3.0], 0.5) == pytest.approx(0.5 + 0.5 + 0.375)
    np.testing.assert_allclose(hotm.perturbation_bound([4.0], [0.0, 1.0]), [0.0, 4.0])


def test_monte_carlo_bound_holds(lqr):
    maps = hotm.propagate_maps(lqr, x0=np.array([-4.0, 0, 0, 0, 0]), order=4, T=3.0)
    for m in maps[1::max(1, len(maps) // 6)]:
        eps = hotm.convergence_radius(hotm.unfold_norms(m)).epsilon
        radius = min(eps, 1.0)
        assert hotm.bound_violations(m, radius, n_samples=1000, rng=0) <= 1 + 1e-12


# -- asymptotic check --------------------------------------------------------------------------


def test_constant_map_at_equilibrium_is_asymptotic():
    cfg = da.AlgebraConfig(5, 3)
    m = hotm.TaylorMap(1.0, da.TPoly(np.zeros((5, cfg.size)), cfg))
    ok, b = hotm.check_asymptotic(m)
    assert ok and np.all(b == 0)
    ok, _ = hotm.check_asymptotic(m, x_e=np.full(5, 0.1))
    assert not ok


def test_lqr_map_collapses(lqr):
    maps = hotm.propagate_maps(lqr, x0=np.array([-4.0, 0, 0, 0, 0]), order=3, T=12.0)
    ok, b = hotm.check_asymptotic(maps[-1], tol=1e-3)
    assert ok
    early, _ = hotm.check_asymptotic(maps[len(maps) // 4], tol=1e-3)
    assert not early


# -- plumbing ---------------------------------------------------------------------------------


def test_map_json(lqr):
    m = hotm.propagate_maps(lqr, x0=np.ones(5) * 0.1, order=2, T=0.2)[-1]
    obj = json.loads(json.dumps(m.to_json()))
    assert obj["t"] == pytest.approx(0.2)
    back = da.TPoly.from_json(obj["components"])
    np.testing.assert_array_equal(back.coeffs, m.poly.coeffs)


@pytest.mark.parametrize("kw", [dict(order=0), dict(order=9), dict(T=0.0)])
def test_propagate_validation(lqr, kw):
    with pytest.raises(ValidationError):
        hotm.propagate_maps(lqr, x0=np.zeros(5), **{"order": 2, "T": 1.0, **kw})


def test_default_start_is_equilibrium(lqr):
    maps = hotm.propagate_maps(lqr, order=1, T=0.5)
    np.testing.assert_allclose(maps[-1].nominal, 0.0, atol=1e-14)
    assert math.isclose(maps[-1].time, 0.5)

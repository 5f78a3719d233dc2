"""Numbered acceptance criteria; a pass/fail line per criterion is printed at the end of the run."""
import math
import time

import numpy as np
import pytest

from neurostab import dalgebra as da
from neurostab import hotm, linstab
from neurostab.gcnet import Layer, NetSpec, find_equilibrium, shift_axes
from neurostab.odeflow import ORACLE_TOL, IntegratorConfig, QuadParams, simulate_delayed
from neurostab.pipeline.pmp import solve_tpbvp

P = QuadParams()
X0_NOMINAL = np.array([-4.0, 0.0, 0.0, 0.0, 0.0])
TIGHT = IntegratorConfig(rel_tol=1e-13, abs_tol=1e-13)


@pytest.fixture(scope="module")
def nominal():
    return solve_tpbvp(X0_NOMINAL)


@pytest.fixture(scope="module")
def shifted(desk):
    eq = find_equilibrium(desk.net)
    return eq.x_hat, shift_axes(desk.net, eq.x_hat)


@pytest.fixture(scope="module")
def desk_maps(shifted, nominal):
    x_hat, net = shifted
    t0 = time.perf_counter()
    maps = hotm.propagate_maps(net, x0=X0_NOMINAL - x_hat, order=7, T=1.5 * nominal.tf)
    return maps, time.perf_counter() - t0


# -- 1 ------------------------------------------------------------------------------------


@pytest.mark.acceptance(1, "monomial counts 5, 20, 55, 125, 251, 461, 791")
def test_monomial_counts():
    got = [da.monomial_count(5, k, include_constant=False) for k in range(1, 8)]
    assert got == [5, 20, 55, 125, 251, 461, 791]
    assert [da.AlgebraConfig(5, k).size - 1 for k in range(1, 8)] == got


# -- 2 ------------------------------------------------------------------------------------

UNARY = [
    np.sin,
    np.cos,
    np.tanh,
    da.softplus,
    lambda u: np.exp(0.5 * np.tanh(u)),
    lambda u: np.sqrt(1 + u * u),
    lambda u: np.log(2 + np.sin(u)),
    lambda u: 1 / (1.5 + np.cos(u)),
]
BINARY = [
    lambda a, b: a + b,
    lambda a, b: a - b,
    lambda a, b: a * b,
    lambda a, b: a / (1 + b * b),
]


def random_expression(rng, nvars, depth):
    if depth == 0 or rng.random() < 0.2:
        i = int(rng.integers(nvars))
        c = rng.uniform(-1.5, 1.5)
        return lambda x: c * x[i]
    if rng.random() < 0.5:
        f = UNARY[rng.integers(len(UNARY))]
        g = random_expression(rng, nvars, depth - 1)
        return lambda x: f(g(x))
    f = BINARY[rng.integers(len(BINARY))]
    g = random_expression(rng, nvars, depth - 1)
    h = random_expression(rng, nvars, depth - 1)
    return lambda x: f(g(x), h(x))


def fd_partial(f, x, idx, h=2e-3):
    """Central differences, Richardson-extrapolated, for multi-indices of order 1 or 2."""
    nz = [i for i, a in enumerate(idx) for _ in range(a)]
    e = np.eye(len(x))

    def stencil(s):
        if len(nz) == 1:
            i = nz[0]
            return (f(x + s * e[i]) - f(x - s * e[i])) / (2 * s)
        i, j = nz
        if i == j:
            return (f(x + s * e[i]) - 2 * f(x) + f(x - s * e[i])) / (s * s)
        return (f(x + s * e[i] + s * e[j]) - f(x + s * e[i] - s * e[j])
                - f(x - s * e[i] + s * e[j]) + f(x - s * e[i] - s * e[j])) / (4 * s * s)

    return (4 * stencil(h / 2) - stencil(h)) / 3


@pytest.mark.acceptance(2, "1000 composite expressions, TPoly partials vs finite differences")
def test_derivative_oracle():
    rng = np.random.default_rng(2024)
    worst = 0.0
    for _ in range(1000):
        n = int(rng.integers(1, 4))
        f = random_expression(rng, n, int(rng.integers(2, 5)))
        x = rng.uniform(-1, 1, n)
        poly = f(da.make_variables(x, da.AlgebraConfig(n, 2)))
        multi = [tuple(int(k == i) for k in range(n)) for i in range(n)]
        multi += [tuple(int(k == i) + int(k == j) for k in range(n)) for i in range(n) for j in range(i, n)]
        for idx in multi:
            exact = poly.partial(idx)
            approx = fd_partial(lambda y: float(f(y)), x, idx)
            worst = max(worst, abs(exact - approx) / max(1.0, abs(approx)))
    assert worst < 1e-6, worst


# -- 3 ------------------------------------------------------------------------------------


@pytest.mark.acceptance(3, "hover plant Jacobian to 1e-10")
def test_analytic_plant_jacobian():
    net = NetSpec((Layer(np.zeros((2, 5)), np.zeros(2), "linear"),), post_shift=P.hover_control)
    lin = linstab.linearize(net)
    want = np.zeros((5, 5))
    want[0, 1] = want[2, 3] = 1.0
    want[1, 1] = want[3, 3] = -0.5
    want[1, 4] = 9.81
    assert np.max(np.abs(lin.A_s - want)) < 1e-10
    np.testing.assert_array_equal(lin.A_N, 0.0)


# -- 4 ------------------------------------------------------------------------------------


@pytest.mark.acceptance(4, "scalar delay benchmark: Pade within 2%, refined within 1e-6 of pi/2")
def test_delay_benchmark():
    dm = linstab.critical_delay(linstab.LinModel.from_matrices([[0.0]], [[-1.0]]))
    assert abs(dm.tau_pade - math.pi / 2) < 0.02 * math.pi / 2
    assert dm.tau_refined is not None and abs(dm.tau_refined - math.pi / 2) < 1e-6


# -- 5 ------------------------------------------------------------------------------------


@pytest.mark.acceptance(5, "map-vs-truth error slopes in [k, k+2] for k = 1, 2, 3")
def test_map_order_convergence(shifted, nominal):
    x_hat, net = shifted
    x0 = X0_NOMINAL - x_hat
    rhs = hotm.closed_loop(net)
    hs = np.array([0.04, 0.02, 0.01])
    direction = np.ones(5) / math.sqrt(5)
    for T in (nominal.tf, 1.5 * nominal.tf):
        for k in (1, 2, 3):
            end = hotm.propagate_maps(net, x0=x0, order=k, T=T, cfg=TIGHT)[-1]
            errs = [np.linalg.norm(end(h * direction) - hotm.truth_at(rhs, x0 + h * direction, [0, T], TIGHT)[-1])
                    for h in hs]
            slope = np.polyfit(np.log(hs), np.log(errs), 1)[0]
            assert k <= slope <= k + 2, (T, k, errs, slope)


# -- 6 ------------------------------------------------------------------------------------


@pytest.mark.acceptance(6, "radius of x' = x^2 maps within 25% across the (x0, t) grid")
def test_radius_calibration():
    for x0 in np.linspace(0.5, 2.0, 7):
        for t in np.linspace(0.1, 0.4, 7):
            m = hotm.propagate_taylor_maps(lambda x: x * x, [x0], 7, (0.0, t), ORACLE_TOL)[-1]
            eps = hotm.convergence_radius(hotm.unfold_norms(m)).epsilon
            exact = abs(1 / t - x0)
            assert abs(eps - exact) < 0.25 * exact, (x0, t, eps, exact)


# -- 7 ------------------------------------------------------------------------------------


@pytest.mark.acceptance(7, "free-time optimal transfer from [-4, 0, 0, 0, 0]")
def test_pmp_nominal(nominal):
    assert np.linalg.norm(nominal.states[-1]) < 1e-6
    assert np.max(np.abs(nominal.hamiltonian())) < 1e-6
    assert abs(nominal.tf - 2.06) < 0.15 * 2.06


# -- 8 ------------------------------------------------------------------------------------


@pytest.mark.acceptance(8, "desk pipeline: offset, stability, finite delay margin, map collapse")
def test_desk_pipeline(desk, desk_maps):
    rep = desk.report
    assert rep["equilibrium_offset"] < 0.1
    assert rep["stable"] and np.all(np.array(rep["eigenvalues_re"]) < 0)
    tau = rep["tau_star_refined"]
    assert tau is not None and 0 < tau < math.inf
    maps, t_maps = desk_maps
    ok, b = hotm.check_asymptotic(maps[-1], tol=1e-2)
    assert ok, (np.linalg.norm(maps[-1].nominal), b)
    assert sum(desk.timings.values()) + t_maps < 3600


# -- 9 ------------------------------------------------------------------------------------


@pytest.mark.acceptance(9, "delayed simulation decays at 0.9 tau* and grows at 1.1 tau*")
def test_time_frequency_consistency(desk, shifted):
    _, net = shifted
    tau = desk.report["tau_star_refined"]
    x0 = np.full(5, 1e-3)
    cfg = IntegratorConfig(rel_tol=1e-8, abs_tol=1e-10)
    late = {}
    for f in (0.9, 1.1):
        tr = simulate_delayed(net, P, x0, f * tau, (0.0, 15.0), cfg)
        late[f] = np.max(np.linalg.norm(tr.states[tr.times > 13], axis=1))
    assert late[0.9] < np.linalg.norm(x0), late
    assert late[1.1] > np.linalg.norm(x0), late


# -- 10 -----------------------------------------------------------------------------------


@pytest.mark.acceptance(10, "Monte-Carlo check of the norm bound inside the estimated radius")
def test_norm_bound(desk_maps):
    maps, _ = desk_maps
    worst = 0.0
    for j, m in enumerate(maps):
        eps = hotm.convergence_radius(hotm.unfold_norms(m)).epsilon
        radius = min(eps, 1.0)
        worst = max(worst, hotm.bound_violations(m, radius, n_samples=1000, rng=j))
    assert worst <= 1 + 1e-12, worst

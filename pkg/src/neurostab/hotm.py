"""
High-order Taylor maps of neurocontrolled trajectories.

Integrating the closed loop over polynomials seeded at ``x0 + dx0`` yields,
at every accepted step ``T_j``, the flow as an order-``k`` polynomial in the
five initial perturbations.  Unfolding each order's derivative tensor into an
``n x n**i`` matrix gives operator norms ``b_i`` with

    ||dx(T_j)|| <= sum_i b_i ||dx0||**i,

and the ratio ``b_{k-1} / b_k`` serves as a convergence-radius estimate.
"""
from __future__ import annotations

import csv
import functools
import itertools
import math
from dataclasses import dataclass

import numpy as np

from . import dalgebra as da
from .exceptions import ValidationError
from .odeflow import MAP_TOL, ORACLE_TOL, QuadParams, integrate, quad_rhs


@dataclass(frozen=True)
class TaylorMap:
    time: float
    poly: da.TPoly  # shape (n,)

    @property
    def order(self):
        return self.poly.cfg.order

    @property
    def nominal(self):
        return self.poly.constant

    def __call__(self, dx0):
        return self.poly.evaluate(dx0)

    def to_json(self):
        return {"t": float(self.time), "components": self.poly.to_json()}


def propagate_taylor_maps(rhs, x0, order, t_span, cfg=MAP_TOL):
    """Taylor maps of ``dx/dt = rhs(x)`` at every accepted integrator step."""
    x0 = np.asarray(x0, dtype=float)
    acfg = da.AlgebraConfig(len(x0), order)
    traj = integrate(rhs, da.make_variables(x0, acfg), t_span, cfg)
    return [TaylorMap(float(t), traj.states[i]) for i, t in enumerate(traj.times)]


def propagate_maps(net, plant=QuadParams(), x0=None, order=7, T=3.09, cfg=MAP_TOL):
    """Order-``order`` maps of the network-controlled plant from ``x0`` up to ``T``."""
    if not 1 <= order <= 8:
        raise ValidationError("supported orders are 1..8")
    if not T > 0:
        raise ValidationError("horizon must be positive")
    x0 = np.zeros(plant.n_states) if x0 is None else x0
    return propagate_taylor_maps(lambda x: plant.rhs(x, net(x)), x0, order, (0.0, T), cfg)


# -- tensor unfolding ---------------------------------------------------------------


@functools.lru_cache(maxsize=None)
def _unfold_layout(n, order, i):
    """Column -> monomial index and symmetric-tensor weight for the order-i block.

    Column ``j`` stands for the index tuple whose first entry varies fastest.
    A monomial with exponent ``alpha`` occupies ``i! / alpha!`` columns, each
    carrying ``alpha! / i!`` of its coefficient.
    """
    tab = da.AlgebraConfig(n, order).tables
    cols = np.array(list(itertools.product(range(n), repeat=i)), dtype=np.int64)[:, ::-1]
    counts = np.zeros((len(cols), n), dtype=np.int64)
    for v in range(n):
        counts[:, v] = (cols == v).sum(axis=1)
    mono = np.array([tab.index[tuple(c)] for c in counts.tolist()], dtype=np.int64)
    weight = tab.factorial_weight[mono] / math.factorial(i)
    return mono, weight


def unfold(poly, i):
    """Explicit ``n x n**i`` unfolded matrix of the order-``i`` terms of ``poly``."""
    mono, weight = _unfold_layout(poly.cfg.nvars, poly.cfg.order, i)
    return poly.coeffs[..., mono] * weight


def _block_norm(poly, i):
    # ||A_i||_2 from the Gram matrix A_i A_i^T = C diag(alpha!/i!) C^T
    tab = poly.cfg.tables
    lo, hi = tab.offsets[i], tab.offsets[i + 1]
    C = poly.coeffs[..., lo:hi]
    w = tab.factorial_weight[lo:hi] / math.factorial(i)
    G = (C * w) @ C.T
    return float(np.sqrt(max(np.linalg.eigvalsh(G)[-1], 0.0)))


def unfold_norms(m):
    """Operator 2-norms ``b_1 .. b_k`` of the unfolded order blocks."""
    poly = m.poly if isinstance(m, TaylorMap) else m
    if poly.ndim == 0:
        poly = da.TPoly.stack([poly])
    return np.array([_block_norm(poly, i) for i in range(1, poly.cfg.order + 1)])


@dataclass(frozen=True)
class NormProfile:
    times: np.ndarray
    b: np.ndarray  # (len(times), k)
    offset: np.ndarray  # distance of the nominal state from x_e


def norm_profile(maps, x_e=None):
    n = maps[0].poly.shape[0]
    x_e = np.zeros(n) if x_e is None else np.asarray(x_e, dtype=float)
    return NormProfile(
        np.array([m.time for m in maps]),
        np.array([unfold_norms(m) for m in maps]),
        np.array([np.linalg.norm(m.nominal - x_e) for m in maps]),
    )


@dataclass(frozen=True)
class RadiusEstimate:
    epsilon: float
    orders: tuple
    time: float | None = None

    @property
    def infinite(self):
        return math.isinf(self.epsilon)


def convergence_radius(b, time=None):
    """Ratio-test radius ``b_{k-1} / b_k`` from the top two orders.

    ``b`` holds ``b_1 .. b_k``.  A vanishing top coefficient means the map is
    a polynomial of lower degree and the radius is reported as infinite.
    """
    b = np.abs(np.asarray(b, dtype=float))
    k = len(b)
    if k < 2:
        raise ValidationError("need at least two orders")
    if b[-1] < 1e-300:
        return RadiusEstimate(math.inf, (k - 1, k), time)
    return RadiusEstimate(float(b[-2] / b[-1]), (k - 1, k), time)


def radius_ratios(b):
    """All consecutive ratios ``b_i / b_{i+1}`` (diagnostics only)."""
    b = np.abs(np.asarray(b, dtype=float))
    with np.errstate(divide="ignore", invalid="ignore"):
        return np.where(b[1:] > 1e-300, b[:-1] / b[1:], np.inf)


def radius_profile(maps):
    prof = norm_profile(maps)
    eps = np.array([convergence_radius(b).epsilon for b in prof.b])
    return prof, eps


def write_radius_csv(path, prof, eps):
    k = prof.b.shape[1]
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["t"] + [f"b_{i}" for i in range(1, k + 1)] + ["epsilon"])
        for t, b, e in zip(prof.times, prof.b, eps):
            w.writerow([repr(float(t))] + [repr(float(v)) for v in b] + [repr(float(e))])


def check_asymptotic(m, x_e=None, tol=1e-3):
    """True when the map has collapsed onto ``x_e``: constant part and every
    ``b_j`` below ``tol``.  Returns ``(ok, b)``.
    """
    n = m.poly.shape[0]
    x_e = np.zeros(n) if x_e is None else np.asarray(x_e, dtype=float)
    b = unfold_norms(m)
    ok = bool(np.linalg.norm(m.nominal - x_e) < tol and np.all(b < tol))
    return ok, b


def perturbation_bound(b, rho):
    """``sum_i b_i rho**i``."""
    b = np.asarray(b, dtype=float)
    rho = np.asarray(rho, dtype=float)
    powers = rho[..., None] ** np.arange(1, len(b) + 1)
    return powers @ b


def bound_violations(m, radius, n_samples=1000, rng=None):
    """Monte-Carlo check of the norm bound inside ``radius``.

    Samples directions uniformly on the sphere and radii uniformly in
    ``(0, radius)``; returns the largest ratio ``||dx|| / bound`` observed,
    which must not exceed one.
    """
    rng = np.random.default_rng(rng)
    n = m.poly.cfg.nvars
    d = rng.normal(size=(n_samples, n))
    d /= np.linalg.norm(d, axis=1, keepdims=True)
    rho = rng.uniform(0.0, radius, size=n_samples)
    dx0 = d * rho[:, None]
    dx = m.poly.evaluate(dx0) - m.nominal[:, None]
    lhs = np.linalg.norm(dx, axis=0)
    rhs = perturbation_bound(unfold_norms(m), rho)
    return float(np.max(lhs / rhs))


# -- map versus ground truth --------------------------------------------------------------


def truth_at(rhs, x0, times, cfg=ORACLE_TOL):
    """Float integration from ``x0`` sampled exactly at ``times`` (segment by segment)."""
    times = np.asarray(times, dtype=float)
    out = np.empty((len(times), len(x0)))
    x = np.asarray(x0, dtype=float)
    t = times[0]
    out[0] = x
    for j in range(1, len(times)):
        if times[j] > t:
            x = integrate(rhs, x, (t, times[j]), cfg).final
            t = times[j]
        out[j] = x
    return out


@dataclass(frozen=True)
class MapErrorProfile:
    times: np.ndarray
    predicted: np.ndarray
    truth: np.ndarray

    @property
    def error(self):
        return np.linalg.norm(self.predicted - self.truth, axis=1)

    def to_csv(self, path, names=("y", "vy", "z", "vz", "theta")):
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["t"] + [f"map_{s}" for s in names] + [f"true_{s}" for s in names]
                       + ["error"])
            for t, p, q, e in zip(self.times, self.predicted, self.truth, self.error):
                w.writerow([repr(float(v)) for v in (t, *p, *q, e)])


def map_vs_truth(maps, rhs, x0, dx0, cfg=ORACLE_TOL):
    """Compare ``map(dx0)`` with an integration from ``x0 + dx0`` at every ``T_j``."""
    times = np.array([m.time for m in maps])
    predicted = np.array([m(dx0) for m in maps])
    truth = truth_at(rhs, np.asarray(x0, dtype=float) + np.asarray(dx0, dtype=float), times, cfg)
    return MapErrorProfile(times, predicted, truth)


def closed_loop(net, p=QuadParams()):
    """Closed-loop rhs usable for both float and polynomial states."""
    return lambda x: quad_rhs(x, net(x), p)

"""
Minimum-effort transfers of the planar quadcopter by indirect multiple shooting.

The cost is ``J = int c1^2 u1^2 + c2^2 u2^2 dt`` with free final time and the
origin as target.  Minimising the Hamiltonian over the control box gives the
feedback ``u(lambda, theta)``.  The boundary conditions are ``x(t_f) = 0`` and
``H(0) = 0`` (the Hamiltonian is conserved, so this is the free-time
condition).

Near hover the attitude/costate pair behaves like a saddle with a growth rate
of several per second, so single shooting over a whole transfer amplifies
errors by ~1e4.  The arc is therefore split into equal segments whose
interior nodes are unknowns as well; every Jacobian block comes from the
variational equations.
"""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
from scipy.integrate import simpson

from ..exceptions import ConvergenceError, ValidationError
from ..odeflow import QuadParams, quad_rhs
from . import _kernels

SHOOT_TOL = 1e-12  # integrator tolerance for final solves
PATH_TOL = 1e-10  # integrator tolerance along continuation paths
PATH_RESIDUAL = 1e-6
MAX_STEPS = 50_000  # diverging trial arcs are abandoned quickly
N_SEGMENTS = 5


def _pvec(p):
    return np.array([p.m, p.g, p.c1, p.c2, p.drag])


def pmp_control(lam, theta, p=QuadParams()):
    """Box-constrained minimiser of the Hamiltonian over ``u``.

    ``lam`` is the costate ``[l_y, l_vy, l_z, l_vz, l_theta]``; leading axes
    may be batched.  Returns ``[u1, u2]`` with ``u1 in [0, 1]``, ``u2 in [-1, 1]``.
    """
    lam = np.asarray(lam, dtype=float)
    u1 = -(lam[..., 1] * np.sin(theta) + lam[..., 3] * np.cos(theta)) / (2 * p.c1 * p.m)
    u2 = -lam[..., 4] / (2 * p.c2)
    return np.stack([np.clip(u1, 0.0, 1.0), np.clip(u2, -1.0, 1.0)], axis=-1)


def hamiltonian(x, lam, u=None, p=QuadParams()):
    """``c1^2 u1^2 + c2^2 u2^2 + lam . f(x, u)``; ``u`` defaults to the PMP control.

    Generic over floats and Taylor polynomials when ``u`` is given.
    """
    if u is None:
        u = pmp_control(lam, x[4], p)
    f = quad_rhs(x, u, p)
    h = p.c1**2 * u[0] * u[0] + p.c2**2 * u[1] * u[1]
    for i in range(5):
        h = h + lam[i] * f[i]
    return h


def augmented_rhs(x, lam, p=QuadParams()):
    """State and costate derivatives along an extremal, ``(dx/dt, dlam/dt)``."""
    out = np.empty(10)
    _kernels.aug_rhs(np.concatenate([np.asarray(x, dtype=float), np.asarray(lam, dtype=float)]),
                     _pvec(p), out)
    return out[:5], out[5:]


def hover_costate(p=QuadParams()):
    """Costate that makes the PMP control equal the hover thrust at ``theta = 0``."""
    return np.array([0.0, 0.0, 0.0, -2.0 * p.m**2 * p.g, 0.0])


@dataclass(frozen=True)
class OptimalTrajectory:
    times: np.ndarray
    states: np.ndarray  # (M, 5)
    costates: np.ndarray  # (M, 5)
    controls: np.ndarray  # (M, 2)
    tf: float
    J: float
    residual: float = 0.0
    nodes: np.ndarray = None  # converged shooting unknowns, reused for warm starts

    @property
    def lambda0(self):
        return self.costates[0]

    def hamiltonian(self, p=QuadParams()):
        pv = _pvec(p)
        return np.array([_kernels.hamiltonian(y, pv)
                         for y in np.hstack([self.states, self.costates])])


def shooting_residual(z, x0, p=QuadParams()):
    """Single-shooting residual ``[x(t_f); H(0)]`` for ``z = [lambda0 (5), t_f]``."""
    pv = _pvec(p)
    z = np.asarray(z, dtype=float)
    if not z[5] > 0:
        raise ValidationError("final time must be positive")
    y0 = np.concatenate([np.asarray(x0, dtype=float), z[:5]])
    out, ok = _kernels.integrate_aug(y0, np.array([0.0, z[5]]), pv, 1e-13, 1e-13, MAX_STEPS)
    if not ok:
        return np.full(6, np.nan)
    return np.append(out[-1, :5], _kernels.hamiltonian(y0, pv))


# -- multiple shooting ----------------------------------------------------------
#
# Unknowns v = [lambda0 (5), log t_f, Y_1, ..., Y_{M-1}] with Y_k the augmented
# state at t_f * k / M.  Residual rows: continuity of segments 0..M-2 (10
# each), x(t_f) (5), H(0) (1).


def _node_slice(k):
    return slice(6 + 10 * (k - 1), 6 + 10 * k)


def _n_unknowns(M):
    return 10 * (M - 1) + 6


def _starts(x0, v, M):
    return [np.concatenate([x0, v[:5]])] + [v[_node_slice(k)] for k in range(1, M)]


def _flow(y0, h, pv, itol):
    """End point and transition matrix of one segment."""
    y = np.concatenate([y0, np.eye(10).ravel()])
    out, ok = _kernels.integrate_aug(y, np.array([0.0, h]), pv, itol, itol, MAX_STEPS)
    end = out[-1]
    ok = ok and bool(np.all(np.isfinite(end)))
    return end[:10], end[10:].reshape(10, 10), ok


def _system(x0, v, pv, M, itol, d=None):
    """Residual, Jacobian w.r.t. ``v`` and derivative along ``x0 + s d``."""
    if not abs(v[5]) < 5.0:
        return None
    n = _n_unknowns(M)
    h = math.exp(v[5]) / M
    r = np.empty(n)
    J = np.zeros((n, n))
    js = np.zeros(n)
    fe = np.empty(10)
    starts = _starts(x0, v, M)
    for k, y in enumerate(starts):
        end, Phi, ok = _flow(y, h, pv, itol)
        if not ok:
            return None
        _kernels.aug_rhs(end, pv, fe)
        last = k == M - 1
        m = 5 if last else 10
        rows = slice(10 * k, 10 * k + m)
        r[rows] = end[:m] if last else end - starts[k + 1]
        if not last:
            J[rows, _node_slice(k + 1)] = -np.eye(10)
        if k == 0:
            J[rows, :5] = Phi[:m, 5:]
            if d is not None:
                js[rows] = Phi[:m, :5] @ d
        else:
            J[rows, _node_slice(k)] = Phi[:m]
        J[rows, 5] = fe[:m] * h
    f0 = np.empty(10)
    _kernels.aug_rhs(starts[0], pv, f0)
    r[-1] = _kernels.hamiltonian(starts[0], pv)
    # dH/dlambda at fixed x is f (control terms vanish by optimality); dH/dx = -dlambda/dt
    J[-1, :5] = f0[:5]
    if d is not None:
        js[-1] = -f0[5:] @ d
    if not (np.all(np.isfinite(r)) and np.all(np.isfinite(J))):
        return None
    return r, J, js


def _newton(x0, v0, pv, M, tol, itol=SHOOT_TOL, max_iter=15, d=None):
    """Damped Newton; returns ``(v, residual, iterations, (J, js))``, ``v`` None on failure."""
    v = np.array(v0, dtype=float)
    sysv = _system(x0, v, pv, M, itol, d)
    if sysv is None:
        return None, math.inf, 0, None
    r, J, js = sysv
    nr = float(np.linalg.norm(r))
    it = 0
    while nr >= tol:
        if it == max_iter:
            return None, nr, it, None
        it += 1
        try:
            step = np.linalg.solve(J, -r)
        except np.linalg.LinAlgError:
            return None, nr, it, None
        for _ in range(6):
            trial = _system(x0, v + step, pv, M, itol, d)
            if trial is not None and np.linalg.norm(trial[0]) < nr:
                break
            step = step / 2
        else:
            return None, nr, it, None
        v = v + step
        r, J, js = trial
        nr = float(np.linalg.norm(r))
    return v, nr, it, (J, js)


def _continuation(x_ref, v_ref, x0, pv, M, tol, ds=1.0, min_step=1e-3, max_steps=200):
    """Follow the solution of ``x_ref + s (x0 - x_ref)`` from ``s = 0`` to 1.

    Tangent predictor from the exact sensitivities, Newton corrector, step
    size driven by the corrector's iteration count.  The path is tracked
    loosely; only the end point is solved to ``tol``.
    """
    d = x0 - x_ref
    v, r, _, jacs = _newton(x_ref, v_ref, pv, M, PATH_RESIDUAL, PATH_TOL, d=d)
    if v is None:
        return None, r
    s = 0.0
    for _ in range(max_steps):
        if s >= 1.0:
            return _newton(x0, v, pv, M, tol)[:2]
        J, js = jacs
        try:
            dvds = np.linalg.solve(J, -js)
        except np.linalg.LinAlgError:
            return None, r
        while True:
            s_try = min(1.0, s + ds)
            v_new, r, it, jacs_new = _newton(x_ref + s_try * d, v + (s_try - s) * dvds, pv, M,
                                             PATH_RESIDUAL, PATH_TOL, max_iter=8, d=d)
            if v_new is not None:
                break
            ds /= 2
            if ds < min_step:
                return None, r
        s, v, jacs = s_try, v_new, jacs_new
        ds = min(ds * (2.0 if it <= 2 else 1.0 if it <= 4 else 0.5), 1.0)
    return None, r


# -- reference transfers --------------------------------------------------------

# 4 m sideways to the origin.  The numbers only seed a polishing solve.
ANCHOR_X0 = np.array([-4.0, 0.0, 0.0, 0.0, 0.0])
_ANCHOR_GUESS = np.array([-3.9810206, -3.48088038, -1.37974141, -2.71916234, -7.60595212,
                          1.99044522])

# y -> -y, vy -> -vy, theta -> -theta maps extremals to extremals when the
# matching costates change sign too
_MIRROR = np.array([-1.0, -1.0, 1.0, 1.0, -1.0])


def _nodes_from_costate(x0, lam0, tf, pv, M):
    """Shooting unknowns generated by a single integration from ``(x0, lam0)``."""
    y0 = np.concatenate([x0, lam0])
    out, ok = _kernels.integrate_aug(y0, np.linspace(0.0, tf, M + 1), pv, 1e-13, 1e-13,
                                     MAX_STEPS)
    return np.concatenate([lam0, [math.log(tf)], out[1:M].ravel()]), ok


_anchor_cache = {}


def _anchors(p, M):
    """Solved reference transfers ``(x_ref, v_ref)``: the anchor and its mirror image."""
    key = (p, M)
    if key not in _anchor_cache:
        pv = _pvec(p)
        v0, ok = _nodes_from_costate(ANCHOR_X0, _ANCHOR_GUESS[:5], _ANCHOR_GUESS[5], pv, M)
        v = _newton(ANCHOR_X0, v0, pv, M, 1e-10)[0] if ok else None
        out = []
        if v is not None:
            mir = np.concatenate([_MIRROR, _MIRROR])
            vm = v.copy()
            vm[:5] *= _MIRROR
            for k in range(1, M):
                vm[_node_slice(k)] *= mir
            out = [(ANCHOR_X0, v), (ANCHOR_X0 * _MIRROR, vm)]
        _anchor_cache[key] = out
    return _anchor_cache[key]


def solve_tpbvp(x0, p=QuadParams(), warm=None, *, tol=1e-8, n_samples=59,
                n_segments=N_SEGMENTS):
    """Solve the free-time transfer from ``x0`` to the origin.

    Attempts, cheapest first: Newton from ``warm``, continuation from
    ``warm``, continuation from a built-in reference transfer or its mirror
    image.

    Parameters
    ----------
    x0 : array_like, shape (5,)
    warm : OptimalTrajectory, optional
        Solution of a nearby problem (same ``n_segments``).
    tol : float
        Required norm of the shooting residual.
    n_samples : int
        Number of equispaced output samples on ``[0, t_f]``.
    n_segments : int
        Multiple-shooting segments.

    Raises
    ------
    ConvergenceError
        When every attempt fails.
    """
    x0 = np.asarray(x0, dtype=float)
    if x0.shape != (5,) or not np.all(np.isfinite(x0)):
        raise ValidationError("x0 must be a finite 5-vector")
    if n_samples < 2:
        raise ValidationError("need at least two output samples")
    if n_segments < 1:
        raise ValidationError("need at least one segment")
    if not np.any(x0):
        return _trivial(x0, p, n_samples)
    pv = _pvec(p)
    M = int(n_segments)
    refs = sorted(_anchors(p, M), key=lambda a: np.linalg.norm(a[0] - x0))
    if warm is not None and warm.nodes is not None and len(warm.nodes) == _n_unknowns(M):
        v, r = _newton(x0, warm.nodes, pv, M, tol, max_iter=8)[:2]
        if v is not None:
            return _assemble(x0, v, r, pv, p, M, n_samples)
        refs.insert(0, (warm.states[0], warm.nodes))
    best = math.inf
    for x_ref, v_ref in refs:
        v, r = _continuation(x_ref, v_ref, x0, pv, M, tol)
        best = min(best, r)
        if v is not None:
            return _assemble(x0, v, r, pv, p, M, n_samples)
    raise ConvergenceError("shooting did not converge", None, best)


def _trivial(x0, p, n_samples):
    u = np.tile(p.hover_control, (n_samples, 1))
    lam = np.tile(hover_costate(p), (n_samples, 1))
    return OptimalTrajectory(np.zeros(n_samples), np.tile(x0, (n_samples, 1)), lam, u, 0.0, 0.0)


def _assemble(x0, v, r, pv, p, M, n_samples, dense_per_segment=400):
    """Sample the converged arc segment by segment and integrate the cost."""
    tf = math.exp(v[5])
    h = tf / M
    times = np.linspace(0.0, tf, n_samples)
    seg = np.minimum((times / h).astype(int), M - 1)
    Y = np.empty((n_samples, 10))
    cost = 0.0
    for k, y0 in enumerate(_starts(x0, v, M)):
        local = np.clip(times[seg == k] - k * h, 0.0, h)
        grid = np.union1d(np.linspace(0.0, h, dense_per_segment + 1), local)
        out, ok = _kernels.integrate_aug(y0, grid, pv, SHOOT_TOL, SHOOT_TOL, MAX_STEPS)
        if not ok:
            raise ConvergenceError("trajectory integration failed", v, r)
        Y[seg == k] = out[np.searchsorted(grid, local)]
        u = pmp_control(out[:, 5:], out[:, 4], p)
        cost += simpson(p.c1**2 * u[:, 0] ** 2 + p.c2**2 * u[:, 1] ** 2, x=grid)
    return OptimalTrajectory(times, Y[:, :5], Y[:, 5:], pmp_control(Y[:, 5:], Y[:, 4], p), tf,
                             float(cost), r, v)

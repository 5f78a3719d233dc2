"""
Planar quadcopter dynamics and an adaptive Runge-Kutta-Fehlberg integrator.

The integrator only needs ``+``, scalar ``*`` and a constant part from the
state, so the same code propagates plain float vectors and arrays of
truncated Taylor polynomials (:class:`~neurostab.dalgebra.TPoly`).  Step
size control always looks at constant parts only, which is what makes the
nominal trajectory of a Taylor map coincide with a plain float run.

State layout is ``[y, vy, z, vz, theta]`` everywhere in the package.
"""
from __future__ import annotations

import bisect
import csv
from dataclasses import dataclass, field

import numpy as np

from .dalgebra import TPoly, const_part, stack
from .exceptions import IntegrationError, ValidationError

STATE_NAMES = ("y", "vy", "z", "vz", "theta")
CONTROL_NAMES = ("u1", "u2")


@dataclass(frozen=True)
class QuadParams:
    """Physical constants of the planar quadcopter (Parrot Bebop values)."""

    m: float = 0.38905
    g: float = 9.81
    c1: float = 9.1
    c2: float = 35.0
    drag: float = 0.5

    n_states = 5
    n_controls = 2

    def __post_init__(self):
        for name in ("m", "g", "c1", "c2", "drag"):
            if not getattr(self, name) > 0:
                raise ValidationError(f"{name} must be positive")

    @property
    def hover_control(self):
        """Control holding the vehicle still at any upright state."""
        return np.array([self.m * self.g / self.c1, 0.0])

    def rhs(self, x, u):
        return quad_rhs(x, u, self)


def quad_rhs(x, u, p=QuadParams()):
    """Time derivative of ``x = [y, vy, z, vz, theta]`` under control ``u``.

    Works for float arrays and for :class:`TPoly` arrays alike.
    """
    vy, vz, th = x[1], x[3], x[4]
    u1, u2 = u[0], u[1]
    thrust = p.c1 / p.m * u1
    return stack(
        [
            vy,
            thrust * np.sin(th) - p.drag * vy,
            vz,
            thrust * np.cos(th) - p.g - p.drag * vz,
            p.c2 * u2,
        ]
    )


def closed_loop_rhs(x, net, p=QuadParams()):
    """``f(x, N(x))``: the plant driven by the network ``net``."""
    return quad_rhs(x, net(x), p)


# -- integration ---------------------------------------------------------------


@dataclass(frozen=True)
class IntegratorConfig:
    rel_tol: float = 1e-8
    abs_tol: float = 1e-8
    h_init: float = 1e-3
    h_min: float = 1e-12
    h_max: float = 1.0
    max_steps: int = 200_000

    def __post_init__(self):
        if not (self.rel_tol > 0 and self.abs_tol > 0):
            raise ValidationError("tolerances must be positive")
        if not 0 < self.h_min <= self.h_init <= self.h_max:
            raise ValidationError("need 0 < h_min <= h_init <= h_max")
        if self.max_steps < 1:
            raise ValidationError("max_steps must be positive")


ORACLE_TOL = IntegratorConfig(rel_tol=1e-10, abs_tol=1e-10)
MAP_TOL = IntegratorConfig(rel_tol=1e-8, abs_tol=1e-8)


@dataclass
class Trajectory:
    """Accepted grid points of an integration run.

    ``states`` is an ``(M, n)`` float array, or a :class:`TPoly` of shape
    ``(M, n)`` when the run was over Taylor polynomials.
    """

    times: np.ndarray
    states: object
    errors: np.ndarray = field(default_factory=lambda: np.zeros(0))
    n_rejected: int = 0

    def __len__(self):
        return len(self.times)

    @property
    def final(self):
        return self.states[-1]

    @property
    def nominal(self):
        """Float trajectory (constant parts when the run was over polynomials)."""
        return const_part(self.states)


# Fehlberg 4(5): nodes, stage matrix, 4th-order weights, error weights (b5 - b4)
_C = np.array([0.0, 1 / 4, 3 / 8, 12 / 13, 1.0, 1 / 2])
_A = (
    (),
    (1 / 4,),
    (3 / 32, 9 / 32),
    (1932 / 2197, -7200 / 2197, 7296 / 2197),
    (439 / 216, -8.0, 3680 / 513, -845 / 4104),
    (-8 / 27, 2.0, -3544 / 2565, 1859 / 4104, -11 / 40),
)
_B4 = (25 / 216, 0.0, 1408 / 2565, 2197 / 4104, -1 / 5, 0.0)
_B5 = (16 / 135, 0.0, 6656 / 12825, 28561 / 56430, -9 / 50, 2 / 55)
_E = tuple(b5 - b4 for b4, b5 in zip(_B4, _B5))


def _lincomb(x, h, weights, ks):
    acc = None
    for w, k in zip(weights, ks):
        if w == 0.0:
            continue
        acc = k * w if acc is None else acc + k * w
    return x if acc is None else x + acc * h


def _rkf_step(rhs_at, x, h, k1):
    """One Fehlberg step. ``rhs_at(c, x)`` evaluates the rhs at stage node c."""
    ks = [k1]
    for i in range(1, 6):
        ks.append(rhs_at(_C[i], _lincomb(x, h, _A[i], ks)))
    x4 = _lincomb(x, h, _B4, ks)
    err = const_part(_lincomb(0.0 * const_part(x), h, _E, [const_part(k) for k in ks]))
    return x4, err


def _error_norm(err, x, x_new, cfg):
    scale = cfg.abs_tol + cfg.rel_tol * np.maximum(np.abs(const_part(x)), np.abs(const_part(x_new)))
    return float(np.max(np.abs(err) / scale))


def _next_h(h, err_norm):
    if err_norm == 0.0:
        return 5.0 * h
    return h * min(5.0, max(0.2, 0.9 * err_norm ** (-0.2)))


def _collect(states):
    if isinstance(states[0], TPoly):
        return TPoly.stack(states)
    return np.array(states, dtype=float)


def integrate(rhs, x0, t_span, cfg=MAP_TOL, *, h_max=None):
    """Integrate the autonomous system ``dx/dt = rhs(x)`` with RKF4(5).

    Parameters
    ----------
    rhs : callable
        ``rhs(x) -> dx/dt``; must accept whatever type ``x0`` is.
    x0 : array_like or TPoly
        Initial state.
    t_span : (float, float)
    cfg : IntegratorConfig

    Returns
    -------
    Trajectory
        All accepted grid points including both ends.
    """
    return _integrate(lambda c, t, x: rhs(x), x0, t_span, cfg, h_max=h_max)


def _integrate(rhs_tc, x0, t_span, cfg, h_max=None, on_accept=None):
    t0, t1 = map(float, t_span)
    if not t1 > t0:
        raise ValidationError("t_span must be increasing")
    x = x0 if isinstance(x0, TPoly) else np.asarray(x0, dtype=float)
    if not np.all(np.isfinite(const_part(x))):
        raise ValidationError("initial state must be finite")
    h_max = cfg.h_max if h_max is None else min(h_max, cfg.h_max)
    h = min(cfg.h_init, h_max, t1 - t0)
    t = t0
    times, states, errors = [t0], [x], []
    n_rej = 0
    k1 = rhs_tc(0.0, t, x)
    for _ in range(cfg.max_steps):
        if t >= t1:
            break
        last = False
        if t + h >= t1 or (t1 - (t + h)) < 1e-12 * max(1.0, abs(t1)):
            h = t1 - t
            last = True
        x_new, err = _rkf_step(lambda c, xs: rhs_tc(c, t + c * h, xs), x, h, k1)
        en = _error_norm(err, x, x_new, cfg)
        if not np.isfinite(en):
            en = np.inf
        if en <= 1.0:
            t = t1 if last else t + h
            x = x_new
            times.append(t)
            states.append(x)
            errors.append(en)
            if on_accept is not None:
                on_accept(t, x)
            if t < t1:
                k1 = rhs_tc(0.0, t, x)
                if on_accept is not None and hasattr(on_accept, "derivative"):
                    on_accept.derivative(k1)
            h = min(_next_h(h, en), h_max)
        else:
            n_rej += 1
            h = max(0.2, 0.9 * en ** (-0.2)) * h if np.isfinite(en) else 0.2 * h
            if h < cfg.h_min:
                raise IntegrationError("step size underflow", t)
    else:
        raise IntegrationError(f"exceeded max_steps={cfg.max_steps}", t)
    return Trajectory(np.array(times), _collect(states), np.array(errors), n_rej)


# -- delayed feedback ------------------------------------------------------------


class _History:
    """Accepted (t, x, dx/dt) samples with cubic Hermite interpolation."""

    def __init__(self, t0, x0):
        self.t0 = t0
        self.x0 = np.asarray(x0, dtype=float)
        self.ts = [t0]
        self.xs = [self.x0]
        self.fs = []

    def __call__(self, t, x):
        self.ts.append(t)
        self.xs.append(np.asarray(x, dtype=float))

    def derivative(self, f):
        self.fs.append(np.asarray(f, dtype=float))

    def at(self, s):
        if s <= self.t0:
            return self.x0
        i = bisect.bisect_right(self.ts, s) - 1
        if i >= len(self.ts) - 1:
            return self.xs[-1]
        ta, tb = self.ts[i], self.ts[i + 1]
        xa, xb = self.xs[i], self.xs[i + 1]
        h = tb - ta
        th = (s - ta) / h
        if i + 1 >= len(self.fs):
            # newest interval before its end derivative exists; only reached
            # when a step of exactly tau leaves s a rounding error past ta
            return xa + h * self.fs[i] * th + (xb - xa - h * self.fs[i]) * th**2
        fa, fb = self.fs[i], self.fs[i + 1]
        h00 = 2 * th**3 - 3 * th**2 + 1
        h10 = th**3 - 2 * th**2 + th
        h01 = -2 * th**3 + 3 * th**2
        h11 = th**3 - th**2
        return h00 * xa + h10 * h * fa + h01 * xb + h11 * h * fb


def integrate_delayed(rhs, x0, tau, t_span, cfg=ORACLE_TOL):
    """Integrate ``dx/dt = rhs(x(t), x(t - tau))`` with constant pre-history ``x0``.

    Steps are capped at ``tau`` so every delayed stage falls on already
    accepted history; ``tau = 0`` runs the plain integrator on ``rhs(x, x)``.
    """
    if tau < 0:
        raise ValidationError("delay must be non-negative")
    x0 = np.asarray(x0, dtype=float)
    if tau == 0:
        return integrate(lambda x: rhs(x, x), x0, t_span, cfg)
    hist = _History(float(t_span[0]), x0)

    def rhs_tc(c, t, x):
        return rhs(x, hist.at(t - tau))

    # derivative at the first point is needed for the first interval
    hist.derivative(rhs(x0, x0))
    return _integrate(rhs_tc, x0, t_span, cfg, h_max=tau, on_accept=hist)


def simulate_delayed(net, p, x0, tau, t_span, cfg=ORACLE_TOL):
    """Closed loop with the network fed the state delayed by ``tau`` seconds."""
    return integrate_delayed(lambda x, xd: quad_rhs(x, net(xd), p), x0, tau, t_span, cfg)


def simulate(net, p, x0, t_span, cfg=ORACLE_TOL):
    return integrate(lambda x: closed_loop_rhs(x, net, p), np.asarray(x0, dtype=float), t_span, cfg)


def write_trajectory_csv(path, traj, net, tau=0.0):
    """Dump ``t, y, vy, z, vz, theta, u1, u2``; controls are recomputed from ``net``.

    With a delay the control column is the one applied, i.e. evaluated on the
    delayed state (constant history before ``t0``).
    """
    xs = traj.nominal
    t0 = traj.times[0]
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(("t",) + STATE_NAMES + CONTROL_NAMES)
        for t, x in zip(traj.times, xs):
            if tau > 0:
                xd = _interp_nominal(traj, t - tau) if t - tau > t0 else xs[0]
            else:
                xd = x
            u = net(xd)
            w.writerow([repr(float(v)) for v in (t, *x, *u)])


def _interp_nominal(traj, s):
    xs = traj.nominal
    return np.array([np.interp(s, traj.times, xs[:, i]) for i in range(xs.shape[1])])

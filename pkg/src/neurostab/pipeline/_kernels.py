"""Compiled state/costate dynamics and a Fehlberg integrator for shooting.

The augmented vector is ``[y, vy, z, vz, theta, ly, lvy, lz, lvz, lth]``,
optionally followed by a row-major ``10 x k`` block of sensitivities that
obeys the variational equation ``dS/dt = J S``.
"""
import math

import numpy as np
from numba import njit

# Fehlberg 4(5), same tableau as odeflow
_A2 = 1 / 4
_A3 = (3 / 32, 9 / 32)
_A4 = (1932 / 2197, -7200 / 2197, 7296 / 2197)
_A5 = (439 / 216, -8.0, 3680 / 513, -845 / 4104)
_A6 = (-8 / 27, 2.0, -3544 / 2565, 1859 / 4104, -11 / 40)
_B4 = (25 / 216, 1408 / 2565, 2197 / 4104, -1 / 5)
_E = (1 / 360, -128 / 4275, -2197 / 75240, 1 / 50, 2 / 55)


@njit(cache=True)
def controls(y, m, c1, c2):
    s = math.sin(y[4])
    c = math.cos(y[4])
    u1 = -(y[6] * s + y[8] * c) / (2.0 * c1 * m)
    u1 = min(max(u1, 0.0), 1.0)
    u2 = -y[9] / (2.0 * c2)
    u2 = min(max(u2, -1.0), 1.0)
    return u1, u2


@njit(cache=True)
def aug_rhs(y, p, out):
    m, g, c1, c2, drag = p[0], p[1], p[2], p[3], p[4]
    s = math.sin(y[4])
    c = math.cos(y[4])
    u1, u2 = controls(y, m, c1, c2)
    a = c1 * u1 / m
    out[0] = y[1]
    out[1] = a * s - drag * y[1]
    out[2] = y[3]
    out[3] = a * c - g - drag * y[3]
    out[4] = c2 * u2
    out[5] = 0.0
    out[6] = -y[5] + drag * y[6]
    out[7] = 0.0
    out[8] = -y[7] + drag * y[8]
    out[9] = -a * (y[6] * c - y[8] * s)


@njit(cache=True)
def aug_jacobian(y, p, J):
    """Jacobian of :func:`aug_rhs` w.r.t. the 10 augmented variables.

    Saturated controls are constant, so their derivatives vanish there.
    """
    m, c1, c2, drag = p[0], p[2], p[3], p[4]
    s = math.sin(y[4])
    c = math.cos(y[4])
    J[:, :] = 0.0
    k = 1.0 / (2.0 * c1 * m)
    u1 = -(y[6] * s + y[8] * c) * k
    du_th = du_lvy = du_lvz = 0.0
    if 0.0 < u1 < 1.0:
        du_th = -(y[6] * c - y[8] * s) * k
        du_lvy = -s * k
        du_lvz = -c * k
    u1 = min(max(u1, 0.0), 1.0)
    a = c1 * u1 / m
    r = c1 / m
    J[0, 1] = 1.0
    J[1, 1] = -drag
    J[1, 4] = a * c + s * r * du_th
    J[1, 6] = s * r * du_lvy
    J[1, 8] = s * r * du_lvz
    J[2, 3] = 1.0
    J[3, 3] = -drag
    J[3, 4] = -a * s + c * r * du_th
    J[3, 6] = c * r * du_lvy
    J[3, 8] = c * r * du_lvz
    if abs(y[9] / (2.0 * c2)) < 1.0:
        J[4, 9] = -0.5
    J[6, 5] = -1.0
    J[6, 6] = drag
    J[8, 7] = -1.0
    J[8, 8] = drag
    q = y[6] * c - y[8] * s
    J[9, 4] = -r * (du_th * q + u1 * (-y[6] * s - y[8] * c))
    J[9, 6] = -r * (du_lvy * q + u1 * c)
    J[9, 8] = -r * (du_lvz * q - u1 * s)


@njit(cache=True)
def full_rhs(y, p, out, J):
    aug_rhs(y, p, out)
    k = (y.shape[0] - 10) // 10
    if k == 0:
        return
    aug_jacobian(y, p, J)
    for i in range(10):
        for j in range(k):
            acc = 0.0
            for l in range(10):
                acc += J[i, l] * y[10 + l * k + j]
            out[10 + i * k + j] = acc


@njit(cache=True)
def hamiltonian(y, p):
    m, c1, c2 = p[0], p[2], p[3]
    f = np.empty(10)
    aug_rhs(y, p, f)
    u1, u2 = controls(y, m, c1, c2)
    h = c1 * c1 * u1 * u1 + c2 * c2 * u2 * u2
    for i in range(5):
        h += y[5 + i] * f[i]
    return h


@njit(cache=True)
def integrate_aug(y0, t_out, p, rtol, atol, max_steps):
    """RKF4(5) through the increasing times ``t_out``; returns (states, ok).

    ``y0`` may carry a sensitivity block (length ``10 + 10 k``); error control
    covers all components.
    """
    n = y0.shape[0]
    J = np.empty((10, 10))
    out = np.empty((t_out.shape[0], n))
    y = y0.copy()
    out[0] = y
    t = t_out[0]
    h = 1e-3
    k1 = np.empty(n)
    k2 = np.empty(n)
    k3 = np.empty(n)
    k4 = np.empty(n)
    k5 = np.empty(n)
    k6 = np.empty(n)
    tmp = np.empty(n)
    ynew = np.empty(n)
    steps = 0
    for j in range(1, t_out.shape[0]):
        t_end = t_out[j]
        while t < t_end:
            if steps > max_steps:
                return out, False
            last = False
            h_free = h
            if t + h >= t_end:
                h = t_end - t
                last = True
            full_rhs(y, p, k1, J)
            for i in range(n):
                tmp[i] = y[i] + h * _A2 * k1[i]
            full_rhs(tmp, p, k2, J)
            for i in range(n):
                tmp[i] = y[i] + h * (_A3[0] * k1[i] + _A3[1] * k2[i])
            full_rhs(tmp, p, k3, J)
            for i in range(n):
                tmp[i] = y[i] + h * (_A4[0] * k1[i] + _A4[1] * k2[i] + _A4[2] * k3[i])
            full_rhs(tmp, p, k4, J)
            for i in range(n):
                tmp[i] = y[i] + h * (_A5[0] * k1[i] + _A5[1] * k2[i] + _A5[2] * k3[i]
                                     + _A5[3] * k4[i])
            full_rhs(tmp, p, k5, J)
            for i in range(n):
                tmp[i] = y[i] + h * (_A6[0] * k1[i] + _A6[1] * k2[i] + _A6[2] * k3[i]
                                     + _A6[3] * k4[i] + _A6[4] * k5[i])
            full_rhs(tmp, p, k6, J)
            err = 0.0
            for i in range(n):
                ynew[i] = y[i] + h * (_B4[0] * k1[i] + _B4[1] * k3[i] + _B4[2] * k4[i]
                                      + _B4[3] * k5[i])
                e = h * (_E[0] * k1[i] + _E[1] * k3[i] + _E[2] * k4[i] + _E[3] * k5[i]
                         + _E[4] * k6[i])
                sc = atol + rtol * max(abs(y[i]), abs(ynew[i]))
                r = abs(e) / sc
                if r > err:
                    err = r
            if not math.isfinite(err):
                h *= 0.2
                if h < 1e-14:
                    return out, False
                continue
            steps += 1
            if err <= 1.0:
                t = t_end if last else t + h
                for i in range(n):
                    y[i] = ynew[i]
                fac = 5.0 if err == 0.0 else min(5.0, max(0.2, 0.9 * err ** -0.2))
                h = h * fac if not last else max(h_free, h * fac)
            else:
                h *= max(0.2, 0.9 * err ** -0.2)
                if h < 1e-14:
                    return out, False
        out[j] = y
    return out, True


"""
Linear stability of a neurocontrolled equilibrium and its time-delay margin.

The closed-loop Jacobian splits into a plant part and a network-feedback part,
``A = A_s + A_N`` with ``A_N = (df/du) (dN/dx)``.  Feeding the network a
state delayed by ``tau`` gives ``dx/dt = A_s x + A_N x(t - tau)``; its first
imaginary-axis crossing is bracketed with a [5/5] Pade realization of the
delay and then refined on the exact characteristic equation.
"""
from __future__ import annotations

import csv
import math
import warnings
from dataclasses import dataclass

import numpy as np
from scipy.optimize import linear_sum_assignment

from . import dalgebra as da
from .exceptions import ConvergenceError, ValidationError
from .gcnet import input_jacobian
from .odeflow import QuadParams

LN_TENTH = math.log(0.1)


@dataclass(frozen=True)
class LinModel:
    x_e: np.ndarray
    u_e: np.ndarray
    A_s: np.ndarray
    A_N: np.ndarray

    @property
    def A(self):
        return self.A_s + self.A_N

    @property
    def n(self):
        return self.A_s.shape[0]

    @classmethod
    def from_matrices(cls, A_s, A_N):
        A_s = np.atleast_2d(np.asarray(A_s, dtype=float))
        A_N = np.atleast_2d(np.asarray(A_N, dtype=float))
        if A_s.shape != A_N.shape or A_s.shape[0] != A_s.shape[1]:
            raise ValidationError("A_s and A_N must be square and of equal size")
        n = A_s.shape[0]
        return cls(np.zeros(n), np.zeros(0), A_s, A_N)


def plant_jacobians(plant, x_e, u_e):
    """``(df/dx, df/du)`` at ``(x_e, u_e)`` via first-order polynomials."""
    n, m = plant.n_states, plant.n_controls
    cfg = da.AlgebraConfig(n + m, 1)
    z = da.make_variables(np.concatenate([x_e, u_e]), cfg)
    J = plant.rhs(z[:n], z[n:]).gradient()
    return J[:, :n], J[:, n:]


def linearize(net, plant=QuadParams(), x_e=None):
    """Split closed-loop Jacobian at ``x_e`` into plant and network parts."""
    x_e = np.zeros(plant.n_states) if x_e is None else np.asarray(x_e, dtype=float)
    u_e = np.asarray(net(x_e), dtype=float)
    A_s, B = plant_jacobians(plant, x_e, u_e)
    A_N = B @ input_jacobian(net, x_e)
    return LinModel(x_e, u_e, A_s, A_N)


def closed_loop_jacobian(net, plant=QuadParams(), x_e=None):
    """``d f(x, N(x)) / dx`` in one pass (no plant/network split)."""
    x_e = np.zeros(plant.n_states) if x_e is None else np.asarray(x_e, dtype=float)
    cfg = da.AlgebraConfig(plant.n_states, 1)
    X = da.make_variables(x_e, cfg)
    return plant.rhs(X, net(X)).gradient()


# -- spectra -----------------------------------------------------------------------


@dataclass(frozen=True)
class Spectrum:
    eigenvalues: np.ndarray

    @property
    def alpha(self):
        return self.eigenvalues.real

    @property
    def omega(self):
        return self.eigenvalues.imag

    @property
    def abscissa(self):
        return float(np.max(self.alpha))

    @property
    def stable(self):
        return self.abscissa < 0


def eig(A, check=True):
    """All eigenvalues of a real square matrix (LAPACK Hessenberg + shifted QR).

    With ``check`` every eigenpair residual ``||Av - lv||`` is verified against
    ``1e-8 ||A||``.
    """
    A = np.asarray(A, dtype=float)
    if not np.all(np.isfinite(A)):
        raise ValidationError("matrix has non-finite entries")
    try:
        w, V = np.linalg.eig(A)
    except np.linalg.LinAlgError as exc:
        raise ConvergenceError(f"eigenvalue iteration failed: {exc}") from None
    if check:
        res = np.linalg.norm(A @ V - V * w, axis=0) / np.linalg.norm(V, axis=0)
        if np.any(res > 1e-8 * max(np.linalg.norm(A, 2), 1e-300)):
            raise ConvergenceError("eigenpair residual above tolerance")
    order = np.lexsort((w.imag, w.real))
    return Spectrum(w[order])


def spectral_abscissa(A):
    return float(np.max(np.linalg.eigvals(A).real))


@dataclass(frozen=True)
class Margins:
    zeta10: float | None
    period: float | None
    stable: bool


def margins_from_spectrum(spec, imag_tol=1e-10):
    """Slowest 10% decay time and longest oscillation period.

    ``zeta10`` is ``None`` (and ``stable`` false) when any mode has
    non-negative real part; ``period`` is ``None`` when all modes are real.
    """
    w = np.asarray(spec.eigenvalues if isinstance(spec, Spectrum) else spec)
    alpha, omega = w.real, w.imag
    stable = bool(np.all(alpha < 0))
    zeta = float(np.max(LN_TENTH / alpha)) if stable else None
    osc = np.abs(omega) > imag_tol * max(1.0, float(np.max(np.abs(w))))
    period = float(np.max(2 * np.pi / np.abs(omega[osc]))) if np.any(osc) else None
    return Margins(zeta, period, stable)


# -- Pade delay model ---------------------------------------------------------------


def pade_coefficients(m=5):
    """``p_j`` with ``exp(-x) ~ sum p_j (-x)^j / sum p_j x^j`` (diagonal [m/m])."""
    f = math.factorial
    return np.array(
        [f(2 * m - j) * f(m) / (f(2 * m) * f(j) * f(m - j)) for j in range(m + 1)]
    )


def pade_realization(tau, m=5):
    """SISO state-space ``(Ap, Bp, Cp, Dp)`` approximating ``exp(-s tau)``.

    Controllable canonical form built in the scaled variable ``s tau`` and
    then rescaled, which keeps the entries O(1/tau) instead of O(tau^-m).
    """
    if not tau > 0:
        raise ValidationError("delay must be positive")
    p = pade_coefficients(m)
    d = p / p[m]
    num = p * (-1.0) ** np.arange(m + 1) / p[m]
    Dp = num[m]
    r = num[:m] - Dp * d[:m]
    Ap = np.zeros((m, m))
    Ap[:-1, 1:] = np.eye(m - 1)
    Ap[-1, :] = -d[:m]
    Bp = np.zeros((m, 1))
    Bp[-1, 0] = 1.0
    Cp = r.reshape(1, m)
    return Ap / tau, Bp / tau, Cp, np.array([[Dp]])


def pade_augment(lin, tau, m=5):
    """Augmented matrix ``[[A_s + A_N D_p, A_N C_p], [B_p, A_p]]``.

    Every state gets its own Pade block, so the size is ``n + n * m``.
    """
    Ap, Bp, Cp, Dp = pade_realization(tau, m)
    n = lin.n
    eye = np.eye(n)
    A_p = np.kron(eye, Ap)
    B_p = np.kron(eye, Bp)
    C_p = np.kron(eye, Cp)
    D_p = Dp[0, 0] * eye
    top = np.hstack([lin.A_s + lin.A_N @ D_p, lin.A_N @ C_p])
    bottom = np.hstack([B_p, A_p])
    return np.vstack([top, bottom])


def delay_char_det(lin, lam, tau):
    """``det(A_s + A_N exp(-lam tau) - lam I)`` (LU with partial pivoting)."""
    M = lin.A_s + lin.A_N * np.exp(-lam * tau) - lam * np.eye(lin.n)
    return np.linalg.det(M)


@dataclass(frozen=True)
class DelayMargin:
    tau_pade: float
    tau_refined: float | None
    omega: float | None
    status: str  # "ok", "refinement-failed", "no-crossing"
    det_residual: float | None = None

    @property
    def tau_star(self):
        return self.tau_refined if self.tau_refined is not None else self.tau_pade


def _refine_crossing(lin, omega, tau, max_iter=50, tol=1e-13):
    n = lin.n
    eye = np.eye(n)
    for _ in range(max_iter):
        lam = 1j * omega
        e = np.exp(-lam * tau)
        M = lin.A_s + lin.A_N * e - lam * eye
        g = np.linalg.det(M)
        if abs(g) < tol:
            return omega, tau, abs(g)
        Minv = np.linalg.inv(M)
        dM_dw = lin.A_N * (-1j * tau * e) - 1j * eye
        dM_dt = lin.A_N * (-lam * e)
        gw = g * np.trace(Minv @ dM_dw)
        gt = g * np.trace(Minv @ dM_dt)
        J = np.array([[gw.real, gt.real], [gw.imag, gt.imag]])
        step = np.linalg.solve(J, -np.array([g.real, g.imag]))
        omega, tau = omega + step[0], tau + step[1]
        if np.max(np.abs(step) / np.maximum(np.abs([omega, tau]), 1e-300)) < 1e-15:
            break
    lam = 1j * omega
    return omega, tau, abs(delay_char_det(lin, lam, tau))


def critical_delay(lin, tau_min=1e-4, tau_max=10.0, ratio=1.3, m=5, abscissa_tol=1e-9):
    """Smallest destabilizing feedback delay.

    A geometric scan over the Pade-augmented spectral abscissa brackets the
    first sign change, bisection pins it down, and Newton on the exact
    characteristic equation (real and imaginary parts in ``(omega, tau)``)
    refines it from the Pade crossing pair.
    """
    if spectral_abscissa(lin.A) >= 0:
        raise ValidationError("non-delayed system is not stable; no delay margin")
    if not np.any(lin.A_N):
        return DelayMargin(math.inf, None, None, "no-crossing")

    def absc(tau):
        return spectral_abscissa(pade_augment(lin, tau, m))

    lo, hi = 0.0, None
    tau = tau_min
    while tau <= tau_max:
        if absc(tau) > 0:
            hi = tau
            break
        lo = tau
        tau *= ratio
    if hi is None:
        return DelayMargin(math.inf, None, None, "no-crossing")
    while hi - lo > 1e-12 * hi:
        mid = 0.5 * (lo + hi)
        a = absc(mid)
        if abs(a) < abscissa_tol:
            lo = hi = mid
            break
        if a > 0:
            hi = mid
        else:
            lo = mid
    tau_pade = 0.5 * (lo + hi)
    w = np.linalg.eigvals(pade_augment(lin, tau_pade, m))
    seed = w[np.argmax(w.real)]
    omega0 = abs(seed.imag)
    try:
        omega, tau_ref, res = _refine_crossing(lin, omega0, tau_pade)
    except np.linalg.LinAlgError:
        return DelayMargin(tau_pade, None, omega0, "refinement-failed")
    if not (np.isfinite(tau_ref) and tau_ref > 0 and abs(tau_ref - tau_pade) < 0.1 * tau_pade
            and res < 1e-8):
        return DelayMargin(tau_pade, None, omega0, "refinement-failed", res)
    return DelayMargin(tau_pade, float(tau_ref), float(abs(omega)), "ok", float(res))


# -- root locus ----------------------------------------------------------------------


@dataclass(frozen=True)
class RootLocus:
    taus: np.ndarray
    roots: np.ndarray  # (len(taus), n) complex, columns are tracked branches
    ambiguous: np.ndarray  # bool per grid point

    def to_csv(self, path):
        n = self.roots.shape[1]
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(
                ["tau"] + [f"re_{i + 1}" for i in range(n)] + [f"im_{i + 1}" for i in range(n)]
            )
            for tau, r in zip(self.taus, self.roots):
                w.writerow([repr(float(tau))] + [repr(float(v)) for v in r.real]
                           + [repr(float(v)) for v in r.imag])


def root_locus(lin, taus, m=5, ambiguity_ratio=0.5):
    """Physical eigenvalues of the delayed system tracked along ``taus``.

    Branches start at ``eig(A)`` and are continued by minimum-distance
    assignment from one grid point to the next.  A grid point is flagged when
    a runner-up candidate is nearly as close as the chosen one.
    """
    taus = np.asarray(taus, dtype=float)
    if taus.ndim != 1 or np.any(taus <= 0) or np.any(np.diff(taus) <= 0):
        raise ValidationError("tau grid must be positive and strictly ascending")
    prev = np.linalg.eigvals(lin.A)
    out = np.empty((len(taus), lin.n), dtype=complex)
    amb = np.zeros(len(taus), dtype=bool)
    for i, tau in enumerate(taus):
        cand = np.linalg.eigvals(pade_augment(lin, tau, m))
        cost = np.abs(prev[:, None] - cand[None, :])
        rows, cols = linear_sum_assignment(cost)
        chosen = cost[rows, cols]
        sorted_cost = np.sort(cost, axis=1)
        runner_up = sorted_cost[:, 1] if cand.size > 1 else np.full(lin.n, np.inf)
        # a branch is ambiguous if another root sits about as close as its match
        amb[i] = bool(np.any(chosen > ambiguity_ratio * runner_up) & np.any(chosen > 0))
        cur = np.empty(lin.n, dtype=complex)
        cur[rows] = cand[cols]
        out[i] = cur
        prev = cur
    if amb.any():
        warnings.warn(f"root tracking ambiguous at {int(amb.sum())} grid points; refine the grid")
    return RootLocus(taus, out, amb)


def analyze(net, plant=QuadParams(), **delay_kwargs):
    """Equilibrium, shift, linearization, spectrum, margins and delay margin.

    Returns a JSON-ready dict.  An unstable equilibrium is reported with
    ``stable = False`` rather than raising.
    """
    from .gcnet import find_equilibrium, shift_axes

    eq = find_equilibrium(net, plant)
    shifted = shift_axes(net, eq.x_hat)
    lin = linearize(shifted, plant)
    spec = eig(lin.A)
    marg = margins_from_spectrum(spec)
    out = {
        "x_hat": eq.x_hat.tolist(),
        "equilibrium_offset": float(np.linalg.norm(eq.x_hat)),
        "equilibrium_residual": eq.residual,
        "u_e": eq.u_e.tolist(),
        "eigenvalues_re": spec.alpha.tolist(),
        "eigenvalues_im": spec.omega.tolist(),
        "stable": marg.stable,
        "zeta10": marg.zeta10,
        "T": marg.period,
        "tau_star_pade": None,
        "tau_star_refined": None,
        "delay_status": None,
    }
    if marg.stable:
        dm = critical_delay(lin, **delay_kwargs)
        out["tau_star_pade"] = None if math.isinf(dm.tau_pade) else dm.tau_pade
        out["tau_star_refined"] = dm.tau_refined
        out["crossing_omega"] = dm.omega
        out["delay_status"] = dm.status
    return out

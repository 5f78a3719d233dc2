"""
State-control databases sampled from optimal transfers to the origin.

Each trajectory contributes ``samples_per_traj`` time-equispaced pairs; the
last one is replaced by ``(origin, hover control)`` so the learned feedback
is asked to hold the target.
"""
from __future__ import annotations

import csv
import json
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from ..exceptions import ConvergenceError, ValidationError
from ..odeflow import CONTROL_NAMES, STATE_NAMES, QuadParams
from .pmp import solve_tpbvp

log = logging.getLogger(__name__)

# sampling box for initial conditions: y, vy, z, vz, theta
DEFAULT_BOUNDS = np.array([
    [-10.0, 10.0],
    [-5.0, 5.0],
    [-10.0, 10.0],
    [-5.0, 5.0],
    [-math.pi / 4, math.pi / 4],
])

CHUNK = 25  # trajectories solved in sequence, warm-starting from each other


@dataclass
class Database:
    X: np.ndarray  # (N, 5) states
    U: np.ndarray  # (N, 2) controls
    traj: np.ndarray  # (N,) trajectory index of each row
    meta: dict = field(default_factory=dict)

    def __len__(self):
        return len(self.X)

    def to_csv(self, path):
        """Write the rows and a ``.json`` metadata sidecar next to ``path``."""
        path = Path(path)
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(STATE_NAMES + CONTROL_NAMES)
            for x, u in zip(self.X, self.U):
                w.writerow([repr(float(v)) for v in (*x, *u)])
        with open(sidecar_path(path), "w") as fh:
            json.dump(self.meta, fh, sort_keys=True, indent=1)
            fh.write("\n")


def sidecar_path(path):
    path = Path(path)
    return path.with_name(path.stem + ".meta.json")


def load_database(path):
    path = Path(path)
    try:
        data = np.loadtxt(path, delimiter=",", skiprows=1, ndmin=2)
    except (OSError, ValueError) as exc:
        raise ValidationError(f"cannot read database {path}: {exc}") from None
    if data.shape[1] != 7:
        raise ValidationError(f"database {path} must have 7 columns, found {data.shape[1]}")
    meta = {}
    side = sidecar_path(path)
    if side.exists():
        with open(side) as fh:
            meta = json.load(fh)
    spt = meta.get("samples_per_traj")
    traj = np.arange(len(data)) // spt if spt else np.zeros(len(data), dtype=int)
    return Database(data[:, :5], data[:, 5:], traj, meta)


def check_bounds(bounds):
    b = np.asarray(bounds, dtype=float)
    if b.shape != (5, 2) or not np.all(np.isfinite(b)) or np.any(b[:, 0] >= b[:, 1]):
        raise ValidationError("bounds must be five finite [low, high] pairs with low < high")
    return b


def _solve_chunk(slots, seeds, bounds, p, spt, max_failures):
    """Solve trajectory slots in order; each resamples from its own stream on failure."""
    out = []
    solved = []
    scale = bounds[:, 1] - bounds[:, 0]
    for slot, ss in zip(slots, seeds):
        rng = np.random.default_rng(ss)
        failures = 0
        while True:
            x0 = rng.uniform(bounds[:, 0], bounds[:, 1])
            warm = None
            if solved:
                d = [np.linalg.norm((s.states[0] - x0) / scale) for s in solved]
                warm = solved[int(np.argmin(d))]
            try:
                sol = solve_tpbvp(x0, p, warm=warm, n_samples=spt)
                break
            except ConvergenceError as exc:
                failures += 1
                log.warning("trajectory %d: shooting failed from %s (residual %.2e), resampling",
                            slot, np.array2string(x0, precision=3), exc.residual)
                if failures >= max_failures:
                    raise ConvergenceError(
                        f"trajectory {slot}: {failures} consecutive shooting failures",
                        x0, exc.residual) from None
        solved.append(sol)
        out.append((slot, sol, failures))
    return out


def build_database(n_traj, bounds=DEFAULT_BOUNDS, samples_per_traj=59, seed=0, p=QuadParams(),
                   n_jobs=1, max_failures=20):
    """Sample initial conditions, solve the transfers and collect state-control pairs.

    Parameters
    ----------
    n_traj : int
    bounds : array_like, shape (5, 2)
        Uniform sampling box for ``[y, vy, z, vz, theta]``.
    samples_per_traj : int
    seed : int
    n_jobs : int
        Worker processes.  The result does not depend on it.
    max_failures : int
        Consecutive failures tolerated for one trajectory slot.

    Raises
    ------
    ValidationError
        Malformed arguments.
    ConvergenceError
        A slot exhausted its failure budget.
    """
    if int(n_traj) != n_traj or n_traj < 1:
        raise ValidationError("n_traj must be a positive integer")
    if samples_per_traj < 2:
        raise ValidationError("need at least two samples per trajectory")
    bounds = check_bounds(bounds)
    n_traj = int(n_traj)
    seeds = np.random.SeedSequence(seed).spawn(n_traj)
    chunks = [(list(range(i, min(i + CHUNK, n_traj))), seeds[i:i + CHUNK])
              for i in range(0, n_traj, CHUNK)]
    args = [(s, ss, bounds, p, samples_per_traj, max_failures) for s, ss in chunks]
    if n_jobs == 1:
        results = [_solve_chunk(*a) for a in args]
    else:
        from joblib import Parallel, delayed

        results = Parallel(n_jobs=n_jobs)(delayed(_solve_chunk)(*a) for a in args)
    results = sorted((r for chunk in results for r in chunk), key=lambda r: r[0])

    X = np.concatenate([r[1].states for r in results])
    U = np.concatenate([r[1].controls for r in results])
    last = np.arange(1, n_traj + 1) * samples_per_traj - 1
    X[last] = 0.0
    U[last] = p.hover_control
    traj = np.repeat(np.arange(n_traj), samples_per_traj)
    failures = int(sum(r[2] for r in results))
    tf = np.array([r[1].tf for r in results])
    meta = {
        "seed": int(seed),
        "bounds": bounds.tolist(),
        "n_traj": n_traj,
        "samples_per_traj": int(samples_per_traj),
        "rows": int(len(X)),
        "failures_resampled": failures,
        "tf_range": [float(tf.min()), float(tf.max())],
        "saturation": {
            "u1_low": float(np.mean(U[:, 0] <= 0.0)),
            "u1_high": float(np.mean(U[:, 0] >= 1.0)),
            "u2": float(np.mean(np.abs(U[:, 1]) >= 1.0)),
        },
    }
    log.info("database: %d trajectories, %d rows, %d failures resampled", n_traj, len(X), failures)
    return Database(X, U, traj, meta)

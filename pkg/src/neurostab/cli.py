"""
Command-line driver.

Every command writes its outputs plus a ``<stem>.config.json`` sidecar with
the resolved parameters, so a run can be repeated from the sidecar alone
(``--config``).  Relative output paths are placed under ``$NEUROSTAB_OUT``
when it is set.

Exit codes: 0 success, 2 invalid input, 3 numerical failure.
"""
from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from pathlib import Path

import numpy as np

from .exceptions import ConvergenceError, IntegrationError, ValidationError

OUT_ENV = "NEUROSTAB_OUT"
EXIT_OK, EXIT_INVALID, EXIT_NUMERIC = 0, 2, 3

log = logging.getLogger("neurostab")


def _out_path(value, default_name):
    path = Path(value if value is not None else default_name)
    if not path.is_absolute() and os.environ.get(OUT_ENV):
        path = Path(os.environ[OUT_ENV]) / path
    path.parent.mkdir(parents=True, exist_ok=True)
    return path


def _config_sidecar(path):
    path = Path(path)
    return path.with_name(path.stem + ".config.json") if path.suffix else path / "config.json"


def _write_config(path, args):
    cfg = {k: v for k, v in vars(args).items() if k not in ("func", "config", "verbose")}
    with open(_config_sidecar(path), "w") as fh:
        json.dump(cfg, fh, sort_keys=True, indent=1, default=str)
        fh.write("\n")


def _dump_json(path, obj):
    with open(path, "w") as fh:
        json.dump(obj, fh, sort_keys=True, indent=1)
        fh.write("\n")


def _load_net(path):
    from .gcnet import load_weights

    try:
        return load_weights(path)
    except OSError as exc:
        raise ValidationError(f"cannot read network {path}: {exc}") from None


# -- commands ------------------------------------------------------------------------


def cmd_generate_data(args):
    from .pipeline.database import DEFAULT_BOUNDS, build_database

    bounds = DEFAULT_BOUNDS
    if args.bounds_file:
        try:
            with open(args.bounds_file) as fh:
                bounds = json.load(fh)
        except (OSError, json.JSONDecodeError) as exc:
            raise ValidationError(f"cannot read bounds file: {exc}") from None
        if isinstance(bounds, dict):
            bounds = bounds.get("bounds")
    out = _out_path(args.out, "db.csv")
    db = build_database(args.n_traj, bounds, args.samples_per_traj, args.seed,
                        n_jobs=args.jobs, max_failures=args.max_failures)
    db.to_csv(out)
    _write_config(out, args)
    log.info("wrote %s (%d rows, %d failed solves resampled)", out, len(db),
             db.meta["failures_resampled"])


def cmd_train(args):
    from .gcnet import make_network, parse_arch, save_weights
    from .pipeline.database import load_database
    from .pipeline.training import train

    hidden = parse_arch(args.arch)
    db = load_database(args.db)
    init = make_network(hidden, seed=args.seed)
    res = train(init, db.X, db.U, epochs=args.epochs, batch_size=args.batch_size,
                learning_rate=args.lr, lr_decay=args.lr_decay, val_fraction=args.val_fraction,
                seed=args.seed, groups=db.traj)
    out = _out_path(args.out, "net.json")
    save_weights(res.net, out)
    res.to_csv(out.with_name(out.stem + ".metrics.csv"))
    _write_config(out, args)
    log.info("wrote %s; held-out MAE %.4g", out, res.metrics[-1]["val_mae"])


def cmd_analyze(args):
    from .linstab import analyze

    net = _load_net(args.net)
    out = _out_path(args.out, "margins.json")
    report = analyze(net, tau_max=args.tau_max)
    report["config"] = {"net": str(args.net), "tau_max": args.tau_max}
    _dump_json(out, report)
    _write_config(out, args)
    log.info("stable=%s tau*=%s", report["stable"], report["tau_star_refined"])


def _parse_grid(spec):
    """``"start:stop:num"`` (geometric when prefixed with ``log``) or a comma list."""
    try:
        if ":" in spec:
            geometric = spec.startswith("log")
            a, b, n = spec[3:].split(":") if geometric else spec.split(":")
            f = np.geomspace if geometric else np.linspace
            grid = f(float(a), float(b), int(n))
        else:
            grid = np.array([float(s) for s in spec.split(",")])
    except ValueError:
        raise ValidationError(f"cannot parse grid {spec!r}") from None
    if grid.size < 1 or np.any(grid <= 0) or np.any(np.diff(grid) <= 0):
        raise ValidationError("grid must be positive and strictly increasing")
    return grid


def cmd_root_locus(args):
    from .gcnet import find_equilibrium, shift_axes
    from .linstab import linearize, root_locus

    net = _load_net(args.net)
    eq = find_equilibrium(net)
    lin = linearize(shift_axes(net, eq.x_hat))
    rl = root_locus(lin, _parse_grid(args.tau_grid))
    out = _out_path(args.out, "root_locus.csv")
    rl.to_csv(out)
    _write_config(out, args)


def _nominal_tf(x0, given):
    if given is not None:
        if not given > 0:
            raise ValidationError("--tf must be positive")
        return given
    from .pipeline.pmp import solve_tpbvp

    return solve_tpbvp(x0).tf


def cmd_taylor_map(args):
    from .gcnet import find_equilibrium, shift_axes
    from .hotm import check_asymptotic, convergence_radius, norm_profile, propagate_maps, \
        radius_ratios, write_radius_csv

    if not 1 <= args.order <= 8:
        raise ValidationError("--order must lie in 1..8")
    if not args.horizon_factor > 0:
        raise ValidationError("--horizon-factor must be positive")
    net = _load_net(args.net)
    x0 = np.array(args.x0)
    tf = _nominal_tf(x0, args.tf)
    T = args.horizon_factor * tf
    eq = find_equilibrium(net)
    shifted = shift_axes(net, eq.x_hat)
    maps = propagate_maps(shifted, x0=x0 - eq.x_hat, order=args.order, T=T)
    out = _out_path(args.out, "taylor_map")
    out.mkdir(parents=True, exist_ok=True)
    prof = norm_profile(maps)
    eps = np.array([convergence_radius(b).epsilon for b in prof.b]) if args.order > 1 \
        else np.full(len(maps), np.inf)
    write_radius_csv(out / "radius.csv", prof, eps)
    with open(out / "maps.jsonl", "w") as fh:
        for m in maps:
            fh.write(json.dumps(m.to_json()) + "\n")
    ok, b = check_asymptotic(maps[-1], tol=args.tol)
    final = {
        "T": T,
        "tf": tf,
        "x_hat": eq.x_hat.tolist(),
        "asymptotic": ok,
        "tol": args.tol,
        "b_final": b.tolist(),
        "epsilon_final": None if np.isinf(eps[-1]) else float(eps[-1]),
        "ratios_final": [None if np.isinf(r) else float(r) for r in radius_ratios(b)],
        "n_steps": len(maps),
    }
    _dump_json(out / "summary.json", final)
    _write_config(out, args)
    log.info("%d maps to T=%.3f; asymptotic=%s", len(maps), T, ok)


def cmd_simulate(args):
    from .odeflow import QuadParams, simulate, simulate_delayed, write_trajectory_csv

    net = _load_net(args.net)
    x0 = np.array(args.x0)
    if args.delay < 0:
        raise ValidationError("--delay must be non-negative")
    if args.delay > 0:
        traj = simulate_delayed(net, QuadParams(), x0, args.delay, (0.0, args.t_final))
    else:
        traj = simulate(net, QuadParams(), x0, (0.0, args.t_final))
    out = _out_path(args.out, "trajectory.csv")
    write_trajectory_csv(out, traj, net, args.delay)
    _write_config(out, args)
    log.info("final distance to origin %.3e", np.linalg.norm(traj.final))


# -- parser --------------------------------------------------------------------------


def build_parser():
    p = argparse.ArgumentParser(prog="neurostab", description=__doc__.split("\n\n")[0].strip())
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    def command(name, func, help):
        sp = sub.add_parser(name, help=help)
        sp.add_argument("--config", help="JSON file with parameter values (flags override)")
        sp.set_defaults(func=func)
        return sp

    sp = command("generate-data", cmd_generate_data, "solve optimal transfers into a database")
    sp.add_argument("--n-traj", type=int, default=2000)
    sp.add_argument("--seed", type=int, default=0)
    sp.add_argument("--samples-per-traj", type=int, default=59)
    sp.add_argument("--bounds-file", help="JSON [[lo, hi], ...] for y, vy, z, vz, theta")
    sp.add_argument("--jobs", type=int, default=1)
    sp.add_argument("--max-failures", type=int, default=20)
    sp.add_argument("--out")

    sp = command("train", cmd_train, "fit a network to a database")
    sp.add_argument("--db", required=True)
    sp.add_argument("--arch", default="3x32", help="DEPTHxWIDTH, e.g. 3x32")
    sp.add_argument("--epochs", type=int, default=200)
    sp.add_argument("--batch-size", type=int, default=128)
    sp.add_argument("--lr", type=float, default=1.2e-3)
    sp.add_argument("--lr-decay", type=float, default=0.98)
    sp.add_argument("--val-fraction", type=float, default=0.1)
    sp.add_argument("--seed", type=int, default=0)
    sp.add_argument("--out")

    sp = command("analyze", cmd_analyze, "equilibrium, spectrum and delay margin")
    sp.add_argument("--net", required=True)
    sp.add_argument("--tau-max", type=float, default=10.0)
    sp.add_argument("--out")

    sp = command("root-locus", cmd_root_locus, "eigenvalue paths over a delay grid")
    sp.add_argument("--net", required=True)
    sp.add_argument("--tau-grid", default="log1e-4:0.2:200",
                    help="start:stop:num, logstart:stop:num or a comma list")
    sp.add_argument("--out")

    sp = command("taylor-map", cmd_taylor_map, "high-order maps and radius profile")
    sp.add_argument("--net", required=True)
    sp.add_argument("--x0", type=float, nargs=5, default=[-4.0, 0.0, 0.0, 0.0, 0.0])
    sp.add_argument("--order", type=int, default=7)
    sp.add_argument("--horizon-factor", type=float, default=1.5)
    sp.add_argument("--tf", type=float, help="optimal transfer time; solved for when omitted")
    sp.add_argument("--tol", type=float, default=1e-3)
    sp.add_argument("--out")

    sp = command("simulate", cmd_simulate, "closed-loop trajectory, optionally delayed")
    sp.add_argument("--net", required=True)
    sp.add_argument("--x0", type=float, nargs=5, required=True)
    sp.add_argument("--delay", type=float, default=0.0)
    sp.add_argument("--t-final", type=float, default=10.0)
    sp.add_argument("--out")
    return p


def parse_args(argv=None):
    parser = build_parser()
    args = parser.parse_args(argv)
    if args.config:
        try:
            with open(args.config) as fh:
                cfg = json.load(fh)
        except (OSError, json.JSONDecodeError) as exc:
            raise ValidationError(f"cannot read config {args.config}: {exc}") from None
        cfg = {k.replace("-", "_"): v for k, v in cfg.items() if k != "command"}
        sub = parser._subparsers._group_actions[0].choices[args.command]
        known = {a.dest for a in sub._actions}
        unknown = set(cfg) - known
        if unknown:
            raise ValidationError(f"unknown config keys: {sorted(unknown)}")
        # flags given explicitly win over the file
        for a in sub._actions:
            if a.dest in cfg:
                a.required = False
        sub.set_defaults(**cfg)
        args = parser.parse_args(argv)
    return args


def main(argv=None):
    try:
        args = parse_args(argv)
    except ValidationError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INVALID
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        args.func(args)
    except ValidationError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INVALID
    except (ConvergenceError, IntegrationError) as exc:
        print(f"numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())

"""Command-line interface.

Exit codes: 0 success, 1 invalid input (bad config, unknown subcommand,
missing seed), 2 runtime failure.
"""
from __future__ import annotations

import argparse
import csv
import json
import sys
from pathlib import Path

import numpy as np

from . import __version__
from .errors import HawkesLabError, ModelValidationError, ParseError
from .io import SCHEMA_VERSION, dump_model, parse_model, write_event_log
from .model import stability_check

STOCHASTIC = {"simulate", "cluster-size", "experiment"}


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(f"{self.format_usage()}{self.prog}: error: {message}")


def _floats(text: str):
    return [float(x) for x in text.split(",")] if text else []


def _emit(payload, out):
    text = json.dumps(payload, indent=2, sort_keys=True) + "\n"
    if out:
        Path(out).write_text(text)
    else:
        sys.stdout.write(text)


# ---------------------------------------------------------------------------
# subcommands
# ---------------------------------------------------------------------------

def cmd_check_stability(args):
    model = parse_model(args.config)
    radius, stable = stability_check(model)
    _emit({"spectral_radius": radius, "stable": stable}, args.out)
    return 0 if stable else 1


def cmd_simulate(args):
    model = parse_model(args.config)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    if args.engine == "thinning":
        from .thinning import simulate_network_many
        logs = simulate_network_many(model, args.horizon, args.reps, args.seed, threads=args.threads)
    else:
        from .cluster import simulate_paths_many
        logs = simulate_paths_many(model, args.horizon, args.reps, args.seed, threads=args.threads)
    width = max(1, len(str(args.reps - 1)))
    for k, log in enumerate(logs):
        write_event_log(log, out / f"rep_{k:0{width}d}.csv")
    meta = {"engine": args.engine, "horizon": args.horizon, "reps": args.reps, "seed": args.seed,
            "schema_version": SCHEMA_VERSION, "model": json.loads(dump_model(model))}
    (out / "run.json").write_text(json.dumps(meta, indent=2, sort_keys=True) + "\n")
    return 0


def cmd_moments(args):
    from .moments import factorial_to_raw, solve_moments_transient
    model = parse_model(args.config)
    grid = np.linspace(0.0, args.t, args.grid + 1)
    table = solve_moments_transient(model, args.order, grid, steps=args.steps)
    if args.raw:
        table = factorial_to_raw(table)
    _emit(table.to_dict(), args.out)
    return 0


def cmd_transform(args):
    model = parse_model(args.config)
    z = _floats(args.z)
    s = _floats(args.s)
    if args.method == "characteristics":
        from .moments import characteristics_transform
        value = characteristics_transform(model, args.t, z, s, steps=args.steps)
        payload = {"value": value, "iterations": None, "residual": None, "method": "characteristics"}
    else:
        from .transform import solve_fixed_point
        res = solve_fixed_point(model, args.t, z, s, tol=args.tol, max_iter=args.max_iter, steps=args.steps)
        payload = {"value": res.value, "iterations": res.iterations, "residual": res.residual,
                   "method": "fixed-point"}
    _emit(payload, args.out)
    return 0


def cmd_cluster_size(args):
    from .cluster import sample_cluster_sizes
    from .cluster_stats import cluster_size_pmf, hitting_time_pmf, offspring_pmf
    model = parse_model(args.config)
    if model.d != 1:
        raise ModelValidationError("cluster-size expects a univariate model")
    mark = model.marks[0][0]
    rho = model.kernels[0][0].l1
    n = np.arange(1, args.n_max + 1)
    closed = cluster_size_pmf(mark, rho, n)
    oracle = hitting_time_pmf(offspring_pmf(mark, rho, 4 * args.n_max), n)
    sizes = sample_cluster_sizes(model, 0, args.clusters, args.seed, threads=args.threads)
    freq = np.bincount(sizes, minlength=args.n_max + 1)[1:args.n_max + 1] / len(sizes)
    fh = open(args.out, "w", newline="") if args.out else sys.stdout
    try:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["n", "closed_form", "oracle", "simulated_freq"])
        for row in zip(n, closed, oracle, freq):
            w.writerow([int(row[0]), repr(float(row[1])), repr(float(row[2])), repr(float(row[3]))])
    finally:
        if args.out:
            fh.close()
    return 0


def _experiment_config(path):
    if path is None:
        return {}
    cfg = json.loads(Path(path).read_text())
    base = Path(path).parent
    for key in ("model", "model_b"):
        if isinstance(cfg.get(key), str):
            cfg[key] = str(base / cfg[key])
    return cfg


def cmd_experiment(args):
    from . import experiments as ex
    cfg = _experiment_config(args.config)
    seed = args.seed
    threads = args.threads

    def model(key="model"):
        if key not in cfg:
            raise ParseError(f"experiment config needs '{key}'", field=key)
        return parse_model(cfg[key])

    name = args.name
    if name == "fclt":
        res = ex.fclt_run(model(), cfg.get("T", 5000.0), cfg.get("alpha", 0.0), cfg.get("reps", 2000),
                          cfg.get("v_grid", [0.2, 0.4, 0.6, 0.8, 1.0]), seed, threads=threads)
    elif name == "flln":
        res = ex.flln_check(model(), cfg.get("T_ladder", [500, 1000, 2000]), cfg.get("reps", 200), seed,
                            threads=threads)
    elif name == "dominance":
        res = ex.dominance_check(model(), model("model_b"), cfg.get("times", [1.0, 2.0, 5.0]),
                                 cfg.get("reps", 10000), seed, threads=threads)
    elif name == "stationarity":
        res = ex.stationarity_equality_check(model(), cfg.get("t", 100.0), cfg.get("reps", 10000), seed,
                                             threads=threads)
    elif name == "heavy-traffic":
        res = ex.heavy_traffic_run(cfg.get("rhos", [0.8, 0.9, 0.95]), cfg.get("reps", 10000), seed,
                                   lambda0=cfg.get("lambda0", 1.0), mu=cfg.get("mu", 1.0),
                                   mode=cfg.get("mode", "delayed"), threads=threads)
    elif name == "tail":
        from .cluster import sample_state
        m = model()
        t = cfg.get("t", 20.0)
        s = sample_state(m, [t], cfg.get("reps", 100000), seed, threads=threads, want=("Q",))
        res = ex.tail_index_estimate(s.Q[:, 0, :].sum(axis=1), cfg.get("k_fraction", 0.01), seed)
        res.config.update({"model": m, "t": t, "reps": cfg.get("reps", 100000)})
    else:
        raise UsageError(f"unknown experiment '{name}'")
    _emit(res.to_dict(), args.out)
    return 0


# ---------------------------------------------------------------------------
# parser
# ---------------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="hawkeslab", description="Self-exciting infinite-server networks.")
    p.add_argument("--version", action="store_true", help="print version and config schema version")
    sub = p.add_subparsers(dest="command", parser_class=_Parser)

    def threads(sp):
        sp.add_argument("--threads", type=int, default=None,
                        help="worker threads (default: HAWKESLAB_THREADS or 1); results do not depend on it")

    def common(sp, seed=False):
        sp.add_argument("--config", required=True, help="model JSON file")
        sp.add_argument("--out", default=None, help="output path (stdout when omitted)")
        threads(sp)
        if seed:
            sp.add_argument("--seed", type=int, default=None, help="master seed (required)")

    sp = sub.add_parser("simulate", help="simulate event logs")
    common(sp, seed=True)
    sp.add_argument("--horizon", type=float, required=True)
    sp.add_argument("--reps", type=int, default=1)
    sp.add_argument("--engine", choices=("cluster", "thinning"), default="cluster")
    sp.set_defaults(func=cmd_simulate)

    sp = sub.add_parser("moments", help="transient moments of a Markovian model")
    common(sp)
    sp.add_argument("--order", type=int, required=True)
    sp.add_argument("--t", type=float, required=True)
    sp.add_argument("--grid", type=int, default=10, help="number of intervals in [0, t]")
    sp.add_argument("--steps", type=int, default=4096, help="RK4 steps over [0, t]")
    sp.add_argument("--raw", action="store_true", help="report raw instead of factorial Q moments")
    sp.set_defaults(func=cmd_moments)

    sp = sub.add_parser("transform", help="joint transform E[z^Q exp(-s Lambda)]")
    common(sp)
    sp.add_argument("--t", type=float, required=True)
    sp.add_argument("--z", default="1", help="comma separated, one per coordinate")
    sp.add_argument("--s", default="0", help="comma separated, one per coordinate")
    sp.add_argument("--tol", type=float, default=1e-10)
    sp.add_argument("--max-iter", type=int, default=200)
    sp.add_argument("--steps", type=int, default=2048)
    sp.add_argument("--method", choices=("fixed-point", "characteristics"), default="fixed-point")
    sp.set_defaults(func=cmd_transform)

    sp = sub.add_parser("cluster-size", help="cluster-size pmf: closed form, oracle, simulation")
    common(sp, seed=True)
    sp.add_argument("--n-max", type=int, default=30)
    sp.add_argument("--clusters", type=int, default=100000)
    sp.set_defaults(func=cmd_cluster_size)

    sp = sub.add_parser("experiment", help="Monte Carlo experiments")
    sp.add_argument("name", choices=("fclt", "flln", "dominance", "stationarity", "heavy-traffic", "tail"))
    sp.add_argument("--config", default=None, help="experiment JSON (model paths or objects plus parameters)")
    sp.add_argument("--out", default=None)
    sp.add_argument("--seed", type=int, default=None)
    threads(sp)
    sp.set_defaults(func=cmd_experiment)

    sp = sub.add_parser("check-stability", help="spectral radius of the branching matrix")
    common(sp)
    sp.set_defaults(func=cmd_check_stability)
    return p


def run_cli(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except UsageError as exc:
        sys.stderr.write(str(exc) + "\n")
        return 1
    except SystemExit as exc:  # --help
        return int(exc.code or 0)
    if args.version:
        sys.stdout.write(f"hawkeslab {__version__} (config schema {SCHEMA_VERSION})\n")
        return 0
    if args.command is None:
        sys.stderr.write(parser.format_usage())
        return 1
    if args.command in STOCHASTIC and args.seed is None:
        sys.stderr.write(f"hawkeslab {args.command}: --seed is required (missing seed)\n")
        return 1
    try:
        return args.func(args)
    except (ParseError, ModelValidationError, UsageError, FileNotFoundError) as exc:
        sys.stderr.write(f"error: {exc}\n")
        return 1
    except (HawkesLabError, ArithmeticError, RuntimeError, ValueError) as exc:
        sys.stderr.write(f"runtime error: {exc}\n")
        return 2


def main():
    sys.exit(run_cli())


if __name__ == "__main__":
    main()

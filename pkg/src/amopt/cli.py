"""Command line front-end.

Subcommands:

    run          run one experiment from a TOML config, write the trace
    compare      run several configs over shared seeds, print a table
    gmres-check  certify the mixer against the GMRES reference solver
    report       render PNG figures from trace files

Exit codes: 0 on success, 1 on validation or usage errors, 2 on
numerical failure (a run that blew up, or gmres-check exceeding its
deviation bound).

`run` writes the trace to --out, falling back to the config's
[trace].out, falling back to stdout. When the trace shares stdout the
summary moves to stderr so the record stream stays parseable.
"""

import argparse
import dataclasses
import sys

import numpy as np

from . import __version__
from .harness import (
    ConfigError,
    compare_experiments,
    format_compare_table,
    format_summary,
    format_trace,
    load_config,
    run_experiment,
    write_trace,
)
from .krylov import gmres
from .mixer import MixerConfig, make_state, sam_step
from .plots import render_trace_figures
from .problems import make_quadratic

EXIT_OK = 0
EXIT_USAGE = 1
EXIT_NUMERICAL = 2

GMRES_CHECK_SEEDS = 20
GMRES_CHECK_TOL = 1e-6


class _Parser(argparse.ArgumentParser):
    """argparse exits 2 on usage errors; the CLI contract reserves 2 for
    numerical failures, so remap usage errors to 1."""

    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


def _positive_int(text):
    try:
        value = int(text)
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected an integer, got {text!r}")
    if value < 1:
        raise argparse.ArgumentTypeError(f"expected a positive integer, got {value}")
    return value


def mixing_vs_gmres_deviation(dim, cond, steps, num_seeds=GMRES_CHECK_SEEDS):
    """Max relative gap between projected mixing iterates and GMRES.

    For each seed builds an SPD quadratic, runs the plain mixer (no
    regularization, no moving average, no safeguard, full memory,
    alpha = beta = 1) from x0 = 0, and compares the projected iterate
    after k secant pairs against the k-th GMRES iterate of the same
    system. Returns the largest ||x_bar_k - x_k|| / ||x_k|| seen.
    """
    if dim < 2:
        raise ValueError("dim must be >= 2")
    if steps < 1:
        raise ValueError("steps must be >= 1")
    cfg = MixerConfig(
        m=steps,
        alpha0=1.0,
        beta0=1.0,
        reg_mode="none",
        use_ma=False,
        pd_mode="off",
    )
    worst = 0.0
    for seed in range(num_seeds):
        _, system = make_quadratic(dim, cond, seed=seed)
        x0 = np.zeros(dim)
        xs = gmres(system, x0, steps, tol=0.0)
        state = make_state(x0, cfg)
        r = system.b - system.A @ state.x
        state, _ = sam_step(state, r, cfg)  # k=0: pure mixing, seeds history
        for k in range(1, len(xs)):
            r = system.b - system.A @ state.x
            state, rep = sam_step(state, r, cfg)
            gap = np.linalg.norm(rep.x_bar - xs[k]) / np.linalg.norm(xs[k])
            worst = max(worst, float(gap))
    return worst


def _cmd_run(args):
    cfg = load_config(args.config, overrides=args.overrides)
    if args.seed is not None:
        cfg = dataclasses.replace(cfg, seed=args.seed)
    result = run_experiment(cfg, timings=args.timings)
    out = args.out if args.out is not None else cfg.trace["out"]
    if out in (None, "-"):
        sys.stdout.write(format_trace(result.records))
        print(format_summary(result.summary), file=sys.stderr)
    else:
        write_trace(result.records, out)
        print(format_summary(result.summary))
    return EXIT_OK if result.status == "ok" else EXIT_NUMERICAL


def _cmd_compare(args):
    cfgs = [load_config(path) for path in args.configs]
    rows = compare_experiments(cfgs, num_seeds=args.seeds)
    print(format_compare_table(rows))
    if any(row["status"] != "ok" for row in rows):
        return EXIT_NUMERICAL
    return EXIT_OK


def _cmd_gmres_check(args):
    worst = mixing_vs_gmres_deviation(args.dim, args.cond, args.steps)
    print(
        f"max deviation {worst:.3e} over {GMRES_CHECK_SEEDS} seeds "
        f"(dim={args.dim}, cond={args.cond:g}, steps={args.steps})"
    )
    if worst > GMRES_CHECK_TOL:
        print(f"FAIL: deviation exceeds {GMRES_CHECK_TOL:g}", file=sys.stderr)
        return EXIT_NUMERICAL
    return EXIT_OK


def _cmd_report(args):
    written = render_trace_figures(
        args.traces, prefix=args.out_prefix, labels=args.labels, x_field=args.x
    )
    for path in written:
        print(path)
    return EXIT_OK


def build_parser():
    parser = _Parser(prog="amopt", description="Anderson mixing benchmark harness.")
    parser.add_argument(
        "--version", action="version", version=f"%(prog)s {__version__}"
    )
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p_run = sub.add_parser("run", help="run one experiment from a config file")
    p_run.add_argument("--config", required=True, help="TOML experiment config")
    p_run.add_argument(
        "--out", default=None, help="trace file; overrides [trace].out, '-' for stdout"
    )
    p_run.add_argument("--seed", type=int, default=None, help="override config seed")
    p_run.add_argument(
        "--set",
        dest="overrides",
        action="append",
        default=[],
        metavar="KEY=VALUE",
        help="override a config entry by dotted path (repeatable)",
    )
    p_run.add_argument(
        "--timings",
        action="store_true",
        help="fill wall_ms in trace records (breaks byte-identical reruns)",
    )
    p_run.set_defaults(func=_cmd_run)

    p_cmp = sub.add_parser("compare", help="run configs over shared seeds")
    p_cmp.add_argument(
        "--config",
        dest="configs",
        action="append",
        required=True,
        metavar="FILE",
        help="experiment config (repeatable)",
    )
    p_cmp.add_argument(
        "--seeds", type=_positive_int, required=True, help="number of seeds (0..N-1)"
    )
    p_cmp.set_defaults(func=_cmd_compare)

    p_gc = sub.add_parser(
        "gmres-check", help="verify mixing iterates against the GMRES reference"
    )
    p_gc.add_argument("--dim", type=_positive_int, default=30)
    p_gc.add_argument("--cond", type=float, default=1e3)
    p_gc.add_argument("--steps", type=_positive_int, default=15)
    p_gc.set_defaults(func=_cmd_gmres_check)

    p_rep = sub.add_parser("report", help="render PNG figures from trace files")
    p_rep.add_argument("traces", nargs="+", metavar="TRACE", help="trace files")
    p_rep.add_argument(
        "--out-prefix", default=None, help="output stem (default: first trace's stem)"
    )
    p_rep.add_argument("--x", choices=("iter", "sfo"), default="iter", help="x axis")
    p_rep.add_argument(
        "--label",
        dest="labels",
        action="append",
        default=None,
        metavar="NAME",
        help="legend label per trace (repeatable)",
    )
    p_rep.set_defaults(func=_cmd_report)
    return parser


def main(argv=None):
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except ConfigError as exc:
        print(f"amopt: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (ValueError, OSError) as exc:
        print(f"amopt: {exc}", file=sys.stderr)
        return EXIT_USAGE


if __name__ == "__main__":
    sys.exit(main())

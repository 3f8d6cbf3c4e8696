"""Command-line interface: ``alkiax <command> ...``.

Exit codes: 0 success, 2 validation found error-bound violations, 1 any
other failure (including malformed arguments or config files).
"""

from __future__ import annotations

import argparse
import sys
import time
from dataclasses import replace

import numpy as np

from . import __version__
from .config import SCHEMA, load_config
from .errors import AlkiaxError, InfeasibleRegionError
from .evaluator import evaluate, evaluate_batch, stats
from .io import load, save
from .partition import export_partition
from .validation import complexity_sweep, fit_complexity_slope, validate_error_grid, write_table

EXIT_OK, EXIT_ERROR, EXIT_VIOLATIONS = 0, 1, 2


class _UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise _UsageError(f"{self.prog}: {message}")


def _config_help():
    width = max(map(len, SCHEMA))
    return "config keys:\n" + "\n".join(f"  {k.ljust(width)}  {v}" for k, v in SCHEMA.items())


def _parse_point(text, dim):
    try:
        values = [float(v) for v in text.replace(",", " ").split()]
    except ValueError:
        raise _UsageError(f"cannot parse point {text!r}") from None
    if len(values) != dim:
        raise _UsageError(f"point {text!r} has {len(values)} components, model expects {dim}")
    return np.array(values)


def cmd_approximate(args):
    settings = load_config(args.config)
    cfg = settings.approx
    if args.workers:
        cfg = replace(cfg, workers=args.workers)
    if args.verbose:
        cfg = replace(cfg, verbose=True)
    from .approximator import approximate

    oracle = settings.make_oracle()
    try:
        model, report = approximate(oracle, settings.domain or oracle.domain, cfg)
    finally:
        oracle.close()
    save(model, args.out)
    print(report.summary())
    print(f"model written to {args.out}")
    return EXIT_OK


def cmd_evaluate(args):
    model = load(args.model)
    if args.point is not None:
        try:
            values = evaluate(model, _parse_point(args.point, model.dim))
        except InfeasibleRegionError:
            print(f"point {args.point} lies in an infeasible region", file=sys.stderr)
            return EXIT_ERROR
        print(",".join(f"{v:.17g}" for v in values))
        return EXIT_OK
    try:
        points = np.loadtxt(args.points_file, delimiter=None if args.whitespace else ",", ndmin=2)
    except (OSError, ValueError) as exc:
        raise _UsageError(f"cannot read points file {args.points_file}: {exc}") from None
    res = evaluate_batch(model, points)
    names = {0: "ok", 1: "infeasible", 2: "outside"}
    header = [f"x{j + 1}" for j in range(model.dim)] + [f"h{k + 1}" for k in range(model.output_dim)] + ["status"]
    print(",".join(header))
    for x, h, s in zip(points, res.values, res.status):
        print(",".join([f"{v:.17g}" for v in x] + [f"{v:.17g}" for v in h] + [names[int(s)]]))
    return EXIT_OK


def cmd_validate(args):
    model = load(args.model)
    settings = load_config(args.config, require_epsilon=False)
    oracle = settings.make_oracle()
    try:
        result = validate_error_grid(model, oracle, args.grid)
    finally:
        oracle.close()
    row = {
        "epsilon": model.epsilon,
        "checked": result["checked"],
        "skipped_infeasible": result["skipped_infeasible"],
        "uncovered": result["uncovered"],
        "violations": result["violations"],
        "max_err": result["max_err"],
    }
    write_table([row])
    for j, point in enumerate(result["argmax"]):
        print(f"# output {j + 1}: max error at {point.tolist()}", file=sys.stderr)
    for point in result["violation_points"][: args.show]:
        print(f"# violation at {point}", file=sys.stderr)
    return EXIT_VIOLATIONS if result["violations"] else EXIT_OK


def cmd_inspect(args):
    model = load(args.model)
    info = stats(model)
    print("key,value")
    print(f"dim,{model.dim}")
    print(f"output_dim,{model.output_dim}")
    print(f"kernel,{model.kernel}")
    print(f"epsilon,{model.epsilon:.10g}")
    print(f"p_lo,{model.p_lo}")
    print(f"p_hi,{model.p_hi}")
    print(f"lower,{' '.join(f'{v:.10g}' for v in model.transform.lower)}")
    print(f"upper,{' '.join(f'{v:.10g}' for v in model.transform.upper)}")
    for key, value in info.items():
        print(f"{key},{value:.6g}" if isinstance(value, float) else f"{key},{value}")
    print(f"build_digest,{model.report_digest}")
    if args.export_partition:
        with open(args.export_partition, "w", encoding="utf-8") as fh:
            fh.write("".join(line + "\n" for line in export_partition(model.tree)))
    return EXIT_OK


def cmd_bench(args):
    model = load(args.model)
    rng = np.random.default_rng(args.seed)
    lo, hi = np.array(model.transform.lower), np.array(model.transform.upper)
    points = lo + (hi - lo) * rng.random((args.queries, model.dim))
    ok = evaluate_batch(model, points).ok
    points = points[ok]
    if not len(points):
        raise _UsageError("no random query landed in a feasible region")
    for x in points[: min(100, len(points))]:  # warm-up (JIT compilation, caches)
        evaluate(model, x)
    latency = np.empty(len(points))
    for i, x in enumerate(points):
        t0 = time.perf_counter_ns()
        evaluate(model, x)
        latency[i] = (time.perf_counter_ns() - t0) * 1e-3
    t0 = time.perf_counter()
    evaluate_batch(model, points)
    batch = (time.perf_counter() - t0) / len(points) * 1e6
    write_table([{
        "queries": len(points),
        "mean_us": float(latency.mean()),
        "median_us": float(np.median(latency)),
        "p99_us": float(np.percentile(latency, 99)),
        "batch_us_per_point": batch,
    }])
    return EXIT_OK


def cmd_sweep(args):
    settings = load_config(args.config)
    try:
        epsilons = [float(e) for e in args.epsilons.replace(",", " ").split()]
    except ValueError:
        raise _UsageError(f"cannot parse epsilons {args.epsilons!r}") from None
    oracle = settings.make_oracle()
    try:
        rows = complexity_sweep(oracle, settings.approx, epsilons, settings.domain)
    finally:
        oracle.close()
    write_table(rows)
    if len(rows) >= 2:
        print(f"# fitted slope of log(samples) vs log(1/epsilon): {fit_complexity_slope(rows):.4f}")
    return EXIT_OK


def build_parser():
    parser = _Parser(prog="alkiax", description="Adaptive localized kernel interpolation with error certificates.",
                     epilog=_config_help(), formatter_class=argparse.RawDescriptionHelpFormatter)
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p = sub.add_parser("approximate", help="build a model from a config file",
                       description="Build a model and print the build report.")
    p.add_argument("--config", required=True)
    p.add_argument("--out", required=True, help="model file to write")
    p.add_argument("--workers", type=int, help="override alkiax.workers")
    p.add_argument("--verbose", action="store_true", help="one line per processed sub-domain on stderr")
    p.set_defaults(func=cmd_approximate)

    p = sub.add_parser("evaluate", help="evaluate a model",
                       description="Print model outputs. --points-file prints CSV with columns x1..xn, h1..hm, "
                                   "status (ok | infeasible | outside).")
    p.add_argument("--model", required=True)
    group = p.add_mutually_exclusive_group(required=True)
    group.add_argument("--point", help='comma separated coordinates, e.g. "0.1,0.2"')
    group.add_argument("--points-file", help="one point per row, comma separated")
    p.add_argument("--whitespace", action="store_true", help="points file is whitespace separated")
    p.set_defaults(func=cmd_evaluate)

    p = sub.add_parser("validate", help="compare a model with its oracle on a grid",
                       description="CSV columns: epsilon, checked, skipped_infeasible, uncovered, violations, "
                                   "max_err (one value per output). Exit code 2 if any violation.")
    p.add_argument("--model", required=True)
    p.add_argument("--config", required=True, help="config naming the oracle")
    p.add_argument("--grid", type=int, required=True, help="points per axis")
    p.add_argument("--show", type=int, default=10, help="violations listed on stderr")
    p.set_defaults(func=cmd_validate)

    p = sub.add_parser("inspect", help="model statistics and partition export",
                       description="CSV key,value statistics. The partition export has one line per leaf: "
                                   "depth, origin (n values), edge, status, p (unit-cube coordinates).")
    p.add_argument("--model", required=True)
    p.add_argument("--export-partition", metavar="FILE")
    p.set_defaults(func=cmd_inspect)

    p = sub.add_parser("bench", help="evaluation latency",
                       description="CSV columns: queries, mean_us, median_us, p99_us (single-point calls), "
                                   "batch_us_per_point.")
    p.add_argument("--model", required=True)
    p.add_argument("--queries", type=int, default=10000)
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=cmd_bench)

    p = sub.add_parser("sweep", help="complexity table over decreasing epsilons",
                       description="CSV columns: epsilon, samples, subdomains, leaves, max_depth, min_edge, "
                                   "min_length_scale; then the fitted log-log slope as a comment line.")
    p.add_argument("--config", required=True)
    p.add_argument("--epsilons", required=True, help='decreasing list, e.g. "1e-1,1e-2,1e-3"')
    p.set_defaults(func=cmd_sweep)
    return parser


def main(argv=None) -> int:
    try:
        args = build_parser().parse_args(argv)
        return args.func(args)
    except _UsageError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_ERROR
    except (AlkiaxError, OSError, ValueError) as exc:
        print(f"error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_ERROR


if __name__ == "__main__":  # pragma: no cover
    sys.exit(main())

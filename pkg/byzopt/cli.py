from __future__ import annotations

import argparse
import json
import logging
import math
import sys
from pathlib import Path
from typing import Tuple

from .aggregation import Aggregator, certify
from .harness import compute_fstar, build_dataset, build_worker_pool, load_config, parse_override, read_document, run
from .models import ConfigError
from .problems import LossModel
from .theory import TheoryInputs, evaluate, nonconvex_bound, pl_bound, predict_rounds

EXIT_CONFIG = 2
EXIT_ALL_DIVERGED = 3

CERTIFY_KEYS = {
    "aggregator": str,
    "bucket_size": int,
    "krum_byz": int,
    "rfa_iters": int,
    "rfa_smoothing": float,
    "good": int,
    "delta": float,
    "sigma": float,
    "dim": int,
    "trials": int,
    "seed": int,
    "far": float,
}


def _add_overrides(parser: argparse.ArgumentParser) -> None:
    parser.add_argument(
        "--override",
        action="append",
        default=[],
        metavar="KEY=VALUE",
        help="Replace one config key; VALUE is parsed as YAML (repeatable)",
    )


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="byzopt", description="Byzantine-robust distributed optimization simulator")
    parser.add_argument("--log-level", default="WARNING", help="Logging level (DEBUG, INFO, WARNING, ...)")
    subparsers = parser.add_subparsers(dest="command", required=True)

    run_p = subparsers.add_parser("run", help="Run every (step size, seed) cell of an experiment")
    run_p.add_argument("config", nargs="?", help="Path to a YAML/JSON run config")
    run_p.add_argument("--config", dest="config_flag", help="Path to a YAML/JSON run config")
    run_p.add_argument("--out", type=Path, help="Directory for trace CSVs and the summary JSON")
    run_p.add_argument("--threads", type=int, help="Parallel cells (0 = one per CPU)")
    _add_overrides(run_p)

    fstar = subparsers.add_parser("fstar", help="Compute the reference optimum of a config's problem")
    fstar.add_argument("config", help="Path to a YAML/JSON run config")
    _add_overrides(fstar)

    cert = subparsers.add_parser("certify-aggregator", help="Empirical robustness audit of an aggregation rule")
    cert.add_argument("settings", help="YAML/JSON document with aggregator settings and audit parameters")
    _add_overrides(cert)

    theory = subparsers.add_parser("theory", help="Evaluate step-size ceilings and convergence bounds")
    theory.add_argument("inputs", help="YAML/JSON document with the theory constants")
    theory.add_argument("--phi0", type=float, help="Initial potential for the bound values")
    theory.add_argument("--rounds", type=int, help="Round count K for the bound values")
    theory.add_argument("--gamma", type=float, help="Step size (defaults to the ceiling)")
    theory.add_argument("--epsilon", type=float, help="Target accuracy for the round prediction")

    plot = subparsers.add_parser("plot", help="Plot trace CSVs written by 'run'")
    plot.add_argument("traces", nargs="+", type=Path, help="Trace CSV files or directories")
    plot.add_argument("--kind", choices=("gap", "compression"), default="gap")
    plot.add_argument("--x", choices=("epochs", "k"), default="epochs", help="x axis of the gap plot")
    plot.add_argument("--gamma", type=float, help="Only plot traces of this step size")
    plot.add_argument("--value-bits", type=int, default=64)
    plot.add_argument("--dim", type=int, help="Model dimension (compression plot)")
    plot.add_argument("--samples-per-worker", type=float, help="Local dataset size m (compression plot)")
    plot.add_argument("--save", type=Path, help="Save the figure to this file")
    plot.add_argument("--no-show", action="store_true", help="Do not open a window")
    return parser


def _print_problems(problems) -> int:
    for problem in problems:
        print(f"config error: {problem}", file=sys.stderr)
    return EXIT_CONFIG


def _run(args, parser) -> int:
    config = args.config_flag or args.config
    if config is None:
        parser.error("run needs a config path")
    cfg = load_config(config, args.override)
    output = run(cfg, out_dir=args.out, threads=args.threads)
    print(json.dumps(output.summary, indent=2))
    if output.summary["best_gamma"] is None:
        return EXIT_ALL_DIVERGED
    return 0


def _fstar(args) -> int:
    cfg = load_config(args.config, args.override)
    pool = build_worker_pool(cfg, build_dataset(cfg))
    result = compute_fstar(LossModel(cfg.model, cfg.lam), pool.good)
    print(f"f*: {result.value:.17g}")
    print(f"approximate: {str(result.approximate).lower()}")
    return 0


def _certify(args) -> int:
    data = read_document(args.settings)
    for text in args.override:
        key, value = parse_override(text)
        data[key] = value
    unknown = [f"unknown key: {key}" for key in data if key not in CERTIFY_KEYS]
    if unknown:
        raise ConfigError(unknown)
    agg_keys = ("bucket_size", "krum_byz", "rfa_iters", "rfa_smoothing")
    try:
        agg = Aggregator(base=data.get("aggregator", "cm"), **{k: data[k] for k in agg_keys if k in data})
    except ValueError as exc:
        raise ConfigError([str(exc)]) from exc
    audit = {k: CERTIFY_KEYS[k](data[k]) for k in ("good", "delta", "sigma", "dim", "trials", "seed", "far") if k in data}
    cert = certify(agg, **audit)
    delta_max, c_order = agg.robustness_profile()
    print(f"rule: {cert.rule}")
    print(f"workers: {cert.n} ({cert.byz} Byzantine, delta={cert.delta:.4f})")
    print(f"mean squared error: {cert.mean_error:.6g} ± {cert.stderr:.2g}")
    print(f"pairwise variance: {cert.pairwise_var:.6g}")
    print(f"fitted c: {cert.c_hat:.6g}")
    print(f"most contaminated buckets: {cert.max_bad_buckets}")
    print(f"tolerated delta: < {delta_max} with c = {c_order}")
    return 0


def _theory(args) -> int:
    inputs = TheoryInputs.from_mapping(read_document(args.inputs))
    out = evaluate(inputs)
    for key, value in out.to_dict().items():
        print(f"{key}: {value}")
    if args.phi0 is not None and args.rounds is not None:
        gamma_nc = args.gamma if args.gamma is not None else out.gamma_max_nc
        if out.feasible_nc:
            bound = nonconvex_bound(inputs, args.phi0, args.rounds, gamma_nc)
            print(f"grad_norm_bound: {bound.value:.6g}{'' if bound.admissible else ' (inadmissible step size)'}")
        if out.feasible_pl and inputs.mu > 0:
            gamma_pl = args.gamma if args.gamma is not None else out.gamma_max_pl
            bound = pl_bound(inputs, args.phi0, args.rounds, gamma_pl)
            print(f"gap_bound: {bound.value:.6g}{'' if bound.admissible else ' (inadmissible step size)'}")
    if args.phi0 is not None and args.epsilon is not None:
        print(f"rounds_nc: {predict_rounds(inputs, args.epsilon, args.phi0, args.gamma)}")
        if inputs.mu > 0:
            print(f"rounds_pl: {predict_rounds(inputs, args.epsilon, args.phi0, args.gamma, pl=True)}")
    return 0


def _plot(args, parser) -> int:
    from .plotting import load_traces, plot_optimality_gap, plot_relative_compression

    traces = load_traces(args.traces)
    if traces.empty:
        parser.error("no trace files found")
    if args.gamma is not None:
        traces = traces[traces["gamma"].apply(lambda g: math.isclose(g, args.gamma))]
    show = not args.no_show
    if args.kind == "gap":
        band = plot_optimality_gap(traces, x=args.x, show=show)
    else:
        if args.dim is None or args.samples_per_worker is None:
            parser.error("the compression plot needs --dim and --samples-per-worker")
        band = plot_relative_compression(traces, args.value_bits, args.dim, args.samples_per_worker, show=show)
    if args.save and not band.empty:
        import matplotlib.pyplot as plt

        plt.gcf().savefig(args.save)
    return 0


def main(argv: Tuple[str, ...] | None = None):
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=getattr(logging, str(args.log_level).upper(), logging.WARNING))

    try:
        if args.command == "run":
            return _run(args, parser)
        if args.command == "fstar":
            return _fstar(args)
        if args.command == "certify-aggregator":
            return _certify(args)
        if args.command == "theory":
            return _theory(args)
        if args.command == "plot":
            return _plot(args, parser)
    except ConfigError as exc:
        return _print_problems(exc.problems)
    except FileNotFoundError as exc:
        parser.error(str(exc))
    return 0


if __name__ == "__main__":
    sys.exit(main())

"""Command-line interface: run sweeps, validate configs, re-render figures."""

import argparse
import sys

from .experiments import (ConfigError, parse_config, read_rows,
                          run_experiment, setup_logging)


def build_parser():
    p = argparse.ArgumentParser(prog="aoamp",
                                description="Orthogonal-AMP relay simulator")
    p.add_argument("--log-level", default="INFO",
                   choices=["DEBUG", "INFO", "WARNING", "ERROR"])
    sub = p.add_subparsers(dest="command", required=True)

    run_p = sub.add_parser("run", help="execute a sweep described by a config")
    run_p.add_argument("-c", "--config", required=True, help="TOML config path")
    run_p.add_argument("-o", "--out", required=True, help="output directory")
    run_p.add_argument("--seed", type=int, default=None,
                       help="override the master seed")
    run_p.add_argument("--workers", type=int, default=1,
                       help="parallel trial workers")
    run_p.add_argument("--no-figures", action="store_true",
                       help="emit CSV only")

    val_p = sub.add_parser("validate", help="check a config and exit")
    val_p.add_argument("-c", "--config", required=True)

    plot_p = sub.add_parser("plot", help="re-render figures from results.csv")
    plot_p.add_argument("-o", "--out", required=True,
                        help="directory containing results.csv")
    plot_p.add_argument("--axis", default=None,
                        help="sweep axis name (inferred from config if given)")
    plot_p.add_argument("-c", "--config", default=None)
    return p


def _load_spec(path, seed_override=None):
    with open(path, encoding="utf-8") as fh:
        text = fh.read()
    spec = parse_config(text)
    if seed_override is not None:
        spec.seed = seed_override
    return spec


def main(argv=None):
    args = build_parser().parse_args(argv)
    setup_logging(args.log_level)
    try:
        if args.command == "validate":
            _load_spec(args.config)
            print("config ok")
            return 0
        if args.command == "run":
            spec = _load_spec(args.config, args.seed)
            run_experiment(spec, args.out, workers=args.workers,
                           render=not args.no_figures)
            return 0
        if args.command == "plot":
            import os
            from .plotting import render_report
            rows = read_rows(os.path.join(args.out, "results.csv"))
            axis = args.axis
            if axis is None and args.config:
                axis = _load_spec(args.config).sweep_axis
            if axis is None:
                axis = "snr_rd"
            for p in render_report(rows, axis, args.out):
                print(p)
            return 0
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 2
    except FileNotFoundError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    return 1


if __name__ == "__main__":
    sys.exit(main())

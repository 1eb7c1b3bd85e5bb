"""Command line entry point: ``screenbo run|sweep|gen-synth|validate-data``."""

from __future__ import annotations

import argparse
import json
import logging
import math
import sys

import yaml

from .bench import ConfigError, ExperimentConfig, METHODS, PRESETS, preset, run_experiment, sweep
from .data_io import DataError, SchemaConfig, SchemaError, validate, write_dataset
from .synth import SynthConfig, generate_problem

EXIT_USAGE = 2
EXIT_DATA = 3

# flag name -> (config field, type)
_OVERRIDES = {
    "method": str, "n": int, "theta": float, "data": str, "schema": str, "model": str,
    "budget": float, "c_cheap": float, "c_expensive": float, "N": int, "workers": int,
    "trials": int, "seed": int, "p1": float, "init_random": int, "refit_every": int,
    "m_acquisition": int, "m_threshold": int, "m_outer": int, "trace_dir": str, "jobs": int,
}


def _add_overrides(p: argparse.ArgumentParser) -> None:
    for name, typ in _OVERRIDES.items():
        p.add_argument(f"--{name.replace('_', '-')}", dest=name, type=typ, default=None)


def _base_config(args) -> tuple[ExperimentConfig, dict]:
    overrides = {k: getattr(args, k) for k in _OVERRIDES if getattr(args, k) is not None}
    if args.preset and args.config:
        raise ConfigError("give either --preset or --config, not both")
    if args.preset:
        return preset(args.preset, **overrides)
    if args.config:
        with open(args.config, encoding="utf-8") as fh:
            raw = yaml.safe_load(fh) or {}
        if not isinstance(raw, dict):
            raise ConfigError(f"{args.config}: config must be a mapping")
        grid = raw.pop("grid", {}) or {}
        return ExperimentConfig.from_dict({**raw, **overrides}), grid
    return ExperimentConfig.from_dict(overrides), {}


def _parse_grid(items: list[str]) -> dict:
    grid = {}
    for item in items or []:
        key, sep, values = item.partition("=")
        if not sep or not values:
            raise ConfigError(f"grid entries look like name=v1,v2; got {item!r}")
        grid[key.strip()] = [yaml.safe_load(v) for v in values.split(",")]
    return grid


def cmd_run(args) -> int:
    cfg, _ = _base_config(args)
    res = run_experiment(cfg, args.output)
    summary = {k: res["mean"][k] for k in res["mean"]}
    summary.update({f"{k}_se": v for k, v in res["se"].items()})
    print(json.dumps({"method": cfg.method, "trials": cfg.trials, **summary}, sort_keys=True))
    return 0


def cmd_sweep(args) -> int:
    cfg, grid = _base_config(args)
    grid.update(_parse_grid(args.grid))
    methods = args.methods.split(",") if args.methods else None
    for m in methods or []:
        if m not in METHODS:
            raise ConfigError(f"unknown method {m!r}")
    rows = sweep(cfg, grid, args.output_dir, methods)
    print(f"wrote {len(rows)} result files and summary.csv to {args.output_dir}")
    return 0


def cmd_gen_synth(args) -> int:
    theta = args.theta if args.theta is not None else math.pi / 4
    data = generate_problem(SynthConfig(n=args.n, theta=theta, seed=args.seed))
    write_dataset(args.output, data)
    print(f"wrote {data.n} candidates to {args.output}")
    return 0


def cmd_validate(args) -> int:
    stats = validate(args.data, SchemaConfig.load(args.schema))
    print(json.dumps(stats, sort_keys=True))
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="screenbo", description="Two-test Bayesian screening experiments.")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    run = sub.add_parser("run", help="run R trials of one method and write a result CSV")
    run.add_argument("--config")
    run.add_argument("--preset", choices=sorted(PRESETS))
    run.add_argument("--output", "-o")
    _add_overrides(run)
    run.set_defaults(func=cmd_run)

    sw = sub.add_parser("sweep", help="run a cartesian grid of experiments")
    sw.add_argument("--config")
    sw.add_argument("--preset", choices=sorted(PRESETS))
    sw.add_argument("--grid", action="append", metavar="NAME=V1,V2,...")
    sw.add_argument("--methods", help="comma-separated methods, each swept over the grid")
    sw.add_argument("--output-dir", required=True)
    _add_overrides(sw)
    sw.set_defaults(func=cmd_sweep)

    gen = sub.add_parser("gen-synth", help="write one synthetic problem as CSV")
    gen.add_argument("--n", type=int, default=500)
    gen.add_argument("--theta", type=float)
    gen.add_argument("--seed", type=int, default=0)
    gen.add_argument("--output", "-o", required=True)
    gen.set_defaults(func=cmd_gen_synth)

    val = sub.add_parser("validate-data", help="check a dataset against a schema")
    val.add_argument("--data", required=True)
    val.add_argument("--schema", required=True)
    val.set_defaults(func=cmd_validate)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    try:
        return args.func(args)
    except (ConfigError, yaml.YAMLError) as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (SchemaError, DataError) as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except (FileNotFoundError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE


if __name__ == "__main__":  # pragma: no cover
    sys.exit(main())

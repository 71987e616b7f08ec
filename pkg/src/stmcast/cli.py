"""Command-line front end: scenario runs, mode sweeps, data generation, and a
key-derivation debugging aid.

Exit codes: 0 on success, 2 on configuration errors, 3 on runtime errors.
``STMCAST_MASTER_SEED`` overrides the configured master seed (useful in CI);
the report records where the seed came from.
"""

from __future__ import annotations

import argparse
import dataclasses
import json
import os
import sys
import time

import yaml

from .crypto import Seed, derive_key, region_id, rp_id, rp_index
from .sim import (
    ConfigError,
    RunResult,
    ScenarioConfig,
    TraceLoadError,
    generate_mobility,
    run,
    sweep,
)
from .topology import Site, SiteLoadError, load_sites

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_RUNTIME = 3

SEED_ENV_VAR = "STMCAST_MASTER_SEED"

_CSV_FIELDS = (
    "mode",
    "repetition",
    "num_ues",
    "ues_polling",
    "total_poll_messages",
    "mean_polls_per_ue",
    "total_received",
    "false_positives",
    "false_positive_ratio",
    "delivery_ratio",
    "ground_truth_total",
    "num_stds",
    "stds_sent",
    "deposits_total",
    "deposits_per_std",
    "addressing_failures",
    "decrypt_failures",
    "delivered_copies",
)


def _load_config(path: str) -> tuple[ScenarioConfig, str]:
    try:
        with open(path) as fh:
            data = yaml.safe_load(fh)
    except OSError as exc:
        raise ConfigError(f"cannot read config file {path}: {exc}") from exc
    except yaml.YAMLError as exc:
        raise ConfigError(f"config file {path} is not valid YAML: {exc}") from exc
    if not isinstance(data, dict):
        raise ConfigError(f"config file {path} must contain a mapping")
    config = ScenarioConfig.from_dict(data, base_dir=os.path.dirname(os.path.abspath(path)))
    provenance = "config"
    override = os.environ.get(SEED_ENV_VAR)
    if override is not None:
        try:
            seed = int(override)
        except ValueError as exc:
            raise ConfigError(f"{SEED_ENV_VAR} must be an integer, got {override!r}") from exc
        config = dataclasses.replace(config, master_seed=seed)
        provenance = f"env:{SEED_ENV_VAR}"
    return config, provenance


def _write_outputs(out_dir: str, config: ScenarioConfig, results: dict[str, RunResult], runtime_s: float, provenance: str) -> None:
    os.makedirs(out_dir, exist_ok=True)
    report = {
        "config": config.to_dict(),
        "seed_provenance": provenance,
        "modes": {mode: result.to_dict() for mode, result in results.items()},
        "runtime_s": runtime_s,
    }
    with open(os.path.join(out_dir, "report.json"), "w") as fh:
        json.dump(report, fh, indent=2, sort_keys=True)
        fh.write("\n")
    with open(os.path.join(out_dir, "metrics.csv"), "w") as fh:
        fh.write(",".join(_CSV_FIELDS) + "\n")
        for mode, result in results.items():
            for rep in result.per_repetition:
                row = rep.to_dict()
                row["mode"] = mode
                fh.write(",".join(repr(row[f]) if isinstance(row[f], float) else str(row[f]) for f in _CSV_FIELDS))
                fh.write("\n")


def _print_summary(results: dict[str, RunResult]) -> None:
    print(f"{'mode':>4}  {'polls/ue':>10}  {'fp_ratio':>8}  {'delivery':>8}")
    for mode, result in results.items():
        agg = result.aggregate
        print(
            f"{mode:>4}  {agg['mean_polls_per_ue']['mean']:>10.2f}"
            f"  {agg['false_positive_ratio']['mean']:>8.4f}"
            f"  {agg['delivery_ratio']['mean']:>8.4f}"
        )


def _cmd_run(args: argparse.Namespace) -> int:
    config, provenance = _load_config(args.config)
    started = time.perf_counter()
    result = run(config)
    runtime = time.perf_counter() - started
    results = {config.aggregation_mode: result}
    _write_outputs(args.out, config, results, runtime, provenance)
    _print_summary(results)
    print(f"report written to {args.out}")
    return EXIT_OK


def _cmd_sweep(args: argparse.Namespace) -> int:
    config, provenance = _load_config(args.config)
    started = time.perf_counter()
    results = sweep(config)
    runtime = time.perf_counter() - started
    _write_outputs(args.out, config, results, runtime, provenance)
    _print_summary(results)
    print(f"report written to {args.out}")
    return EXIT_OK


def _cmd_gen_sites(args: argparse.Namespace) -> int:
    sites: list[Site] = []
    if args.grid:
        try:
            nx, ny = (int(v) for v in args.grid.lower().split("x"))
        except ValueError as exc:
            raise ConfigError(f"--grid must look like 5x5, got {args.grid!r}") from exc
        if nx < 1 or ny < 1:
            raise ConfigError("grid dimensions must be >= 1")
        cell = 0
        for j in range(ny):
            for i in range(nx):
                sites.append(Site(cell, i * args.spacing, j * args.spacing))
                cell += 1
    elif args.random is not None:
        if args.random < 1:
            raise ConfigError("--random must be >= 1")
        import numpy as np

        rng = np.random.default_rng(args.seed)
        xs = rng.uniform(0, args.extent, size=args.random)
        ys = rng.uniform(0, args.extent, size=args.random)
        sites = [Site(i, float(x), float(y)) for i, (x, y) in enumerate(zip(xs, ys))]
    else:
        raise ConfigError("choose --grid NxM or --random N")
    with open(args.out, "w") as fh:
        for s in sites:
            fh.write(f"{s.cell_id},{s.x},{s.y}\n")
    print(f"{len(sites)} sites written to {args.out}")
    return EXIT_OK


def _cmd_gen_trace(args: argparse.Namespace) -> int:
    cell_map = load_sites(args.sites)
    trace = generate_mobility(cell_map, args.num_ues, args.speed, args.pause, args.duration, args.seed)
    rows = 0
    with open(args.out, "w") as fh:
        for ue in trace.ue_ids():
            for residence in trace.residences[ue]:
                fh.write(f"{residence.start_s:g},{ue},{residence.cell_id}\n")
                rows += 1
    print(f"{rows} cell-switch rows for {len(trace)} handsets written to {args.out}")
    return EXIT_OK


def _cmd_derive(args: argparse.Namespace) -> int:
    try:
        seed = Seed.from_hex(args.seed)
    except ValueError as exc:
        raise ConfigError(f"--seed must be 64 hex characters: {exc}") from exc
    if args.level < 0 or args.slot < 0:
        raise ConfigError("--level and --slot must be >= 0")
    if args.num_rps < 1:
        raise ConfigError("--num-rps must be >= 1")
    key = derive_key(seed, args.level, args.slot)
    region = region_id(key)
    shard = rp_index(region, args.num_rps)
    print("WARNING: debug command; prints raw key material, do not use on production seeds")
    print(f"key:       {key.hex()}")
    print(f"region_id: {region.digest.hex()}")
    print(f"rp_id:     {rp_id(region).digest.hex()}")
    print(f"rp_index:  {shard} (of {args.num_rps})")
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="stmcast", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True)

    p_run = sub.add_parser("run", help="run the configured aggregation mode")
    p_run.add_argument("--config", required=True, help="scenario config (YAML)")
    p_run.add_argument("--out", required=True, help="output directory for report.json and metrics.csv")
    p_run.set_defaults(func=_cmd_run)

    p_sweep = sub.add_parser("sweep", help="run all four aggregation modes on identical traces")
    p_sweep.add_argument("--config", required=True, help="scenario config (YAML)")
    p_sweep.add_argument("--out", required=True, help="output directory for report.json and metrics.csv")
    p_sweep.set_defaults(func=_cmd_sweep)

    p_gen = sub.add_parser("gen", help="generate site files and synthetic traces")
    gen_sub = p_gen.add_subparsers(dest="kind", required=True)

    p_sites = gen_sub.add_parser("sites", help="write a cell_id,x,y site CSV")
    p_sites.add_argument("--out", required=True)
    p_sites.add_argument("--grid", help="grid layout, e.g. 5x5")
    p_sites.add_argument("--spacing", type=float, default=1000.0, help="grid spacing in meters")
    p_sites.add_argument("--random", type=int, help="number of uniformly random sites")
    p_sites.add_argument("--extent", type=float, default=5000.0, help="square extent for --random")
    p_sites.add_argument("--seed", type=int, default=0)
    p_sites.set_defaults(func=_cmd_gen_sites)

    p_trace = gen_sub.add_parser("trace", help="write a synthetic mobility trace CSV")
    p_trace.add_argument("--out", required=True)
    p_trace.add_argument("--sites", required=True, help="site CSV the walkers move over")
    p_trace.add_argument("--num-ues", type=int, required=True)
    p_trace.add_argument("--speed", type=float, default=14.0, help="meters per second")
    p_trace.add_argument("--pause", type=float, default=30.0, help="pause at each waypoint, seconds")
    p_trace.add_argument("--duration", type=float, default=7200.0, help="seconds of mobility")
    p_trace.add_argument("--seed", type=int, default=0)
    p_trace.set_defaults(func=_cmd_gen_trace)

    p_derive = sub.add_parser("derive", help="derive one key and its identifier chain (debug; prints key material)")
    p_derive.add_argument("--seed", required=True, help="32-byte seed as 64 hex characters")
    p_derive.add_argument("--level", type=int, required=True)
    p_derive.add_argument("--slot", type=int, required=True)
    p_derive.add_argument("--num-rps", type=int, default=16)
    p_derive.set_defaults(func=_cmd_derive)

    return parser


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except (ConfigError, SiteLoadError, TraceLoadError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except OSError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_RUNTIME
    except Exception as exc:  # pragma: no cover - defensive
        print(f"internal error: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())

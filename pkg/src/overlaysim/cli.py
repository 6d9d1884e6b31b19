"""Command-line front end for the experiment drivers.

One subcommand per experiment; every flag can also come from a flat
``key=value`` config file (``--config``), with command-line values taking
precedence.  Exit status: 0 on success, 1 when any run was flagged (a join
that never converged, a failed crawl, a revoked user that got accepted),
2 on configuration errors.
"""

from __future__ import annotations

import argparse
import sys
from pathlib import Path
from typing import List, Optional

from . import experiments
from .config import (
    ConfigError,
    ExperimentConfig,
    build_config,
    load_config_file,
    parse_sizes,
    parse_synthetic,
)

DEFAULT_SIZES = {
    "single-join": [32],
    "mass-join": [32, 128, 256],
    "bandwidth": [64],
    "revoke": [50, 200],
    "model": [16, 32, 64, 128, 256],
}

DEFAULT_REPS = {
    "single-join": 30,
    "mass-join": 1,
    "bandwidth": 1,
    "revoke": 1,
    "model": 30,
}


def _build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="overlaysim",
        description="Deterministic overlay-network experiments",
    )
    sub = parser.add_subparsers(dest="experiment", required=True)
    for name in DEFAULT_SIZES:
        p = sub.add_parser(name, help=f"run the {name} experiment")
        p.add_argument("--config", help="flat key=value config file")
        p.add_argument("--public-size", type=int, dest="public_size")
        p.add_argument("--private-size", dest="private_sizes", type=parse_sizes,
                       help="private overlay size, or comma-separated sizes")
        p.add_argument("--security", dest="security", action="store_const",
                       const=True, help="secure private links with group certificates")
        p.add_argument("--no-security", dest="security", action="store_const",
                       const=False)
        p.add_argument("--seed", type=int)
        p.add_argument("--latency-file", dest="latency_file")
        p.add_argument("--synthetic", type=parse_synthetic,
                       metavar="MIN,MAX", help="synthetic RTT range in ms")
        p.add_argument("--timer", choices=("static", "dynamic"))
        p.add_argument("--method", choices=("dht", "broadcast"))
        p.add_argument("--reps", type=int)
        p.add_argument("--out", metavar="DIR")
        p.set_defaults(config=None, public_size=None, private_sizes=None,
                       security=None, seed=None, latency_file=None,
                       synthetic=None, timer=None, method=None, reps=None,
                       out=None)
    return parser


def _config_from_args(args: argparse.Namespace) -> ExperimentConfig:
    experiment = args.experiment
    base = {
        "private_sizes": list(DEFAULT_SIZES[experiment]),
        "reps": DEFAULT_REPS[experiment],
    }
    file_overrides = load_config_file(args.config) if args.config else {}
    flag_overrides = {
        key: getattr(args, key)
        for key in ("public_size", "private_sizes", "security", "seed",
                    "latency_file", "synthetic", "timer", "method", "reps", "out")
        if getattr(args, key) is not None
    }
    merged_file = dict(base)
    merged_file.update(file_overrides)
    return build_config(experiment, merged_file, flag_overrides)


def _out_path(cfg: ExperimentConfig, suffix: str = ".csv") -> Path:
    stem = cfg.experiment.replace("-", "_")
    return Path(cfg.out) / f"{stem}{suffix}"


def _run(cfg: ExperimentConfig) -> int:
    out = Path(cfg.out)
    experiments.write_config_echo(out / f"{cfg.experiment.replace('-', '_')}_config.txt", cfg)
    flagged = False

    if cfg.experiment == "single-join":
        res = experiments.run_single_join(cfg)
        path = experiments.write_csv(_out_path(cfg), cfg.experiment, res.rows, cfg.digest())
        print(f"wrote {path} ({len(res.rows)} rows)")
        print(f"median public join: {res.median_public_ms:.0f} ms, "
              f"median private join: {res.median_private_ms:.0f} ms")
        if res.flagged:
            print(f"flagged repetitions (no convergence): {res.flagged}",
                  file=sys.stderr)
            flagged = True

    elif cfg.experiment == "mass-join":
        res = experiments.run_mass_join(cfg)
        path = experiments.write_csv(_out_path(cfg), cfg.experiment, res.rows, cfg.digest())
        print(f"wrote {path} ({len(res.rows)} rows)")
        for (size, rep), ok in sorted(res.crawl_ok.items()):
            line = f"size {size} rep {rep}: completion {res.completion_ms[(size, rep)]} ms, single cycle: {ok}"
            print(line)
            if not ok:
                flagged = True
        if res.flagged:
            print(f"flagged runs (no formation): {res.flagged}", file=sys.stderr)
            flagged = True

    elif cfg.experiment == "bandwidth":
        res = experiments.run_bandwidth(cfg)
        path = experiments.write_csv(_out_path(cfg), cfg.experiment, res.rows, cfg.digest())
        qpath = experiments.write_query_counts(
            Path(cfg.out) / "bandwidth_queries.csv", res.query_counts, cfg.digest())
        print(f"wrote {path} and {qpath}")
        print(f"timer {res.timer}: mean member bandwidth {res.mean_member_bps:.1f} B/s, "
              f"mean public bandwidth {res.mean_public_bps:.1f} B/s")

    elif cfg.experiment == "revoke":
        res = experiments.run_revocation(cfg)
        path = experiments.write_csv(_out_path(cfg), cfg.experiment, res.rows, cfg.digest())
        print(f"wrote {path} ({len(res.rows)} rows)")
        lines = sorted({line for o in res.outcomes for line in o.revocation_lines})
        rl_path = Path(cfg.out) / "revocation_list.txt"
        rl_path.write_text("".join(line + "\n" for line in lines))
        print(f"wrote {rl_path} ({len(lines)} entries)")
        for o in res.outcomes:
            print(f"{o.method} size {o.size}: delay {o.delay_ms} ms, "
                  f"{o.bytes_total} bytes, reached {o.reached_fraction:.2%}, "
                  f"sweep {o.sweep_attempts} attempts / {o.sweep_established} accepted")
            if o.sweep_established > 0:
                flagged = True

    elif cfg.experiment == "model":
        res = experiments.run_model(cfg)
        path = experiments.write_csv(_out_path(cfg), cfg.experiment, res.rows, cfg.digest())
        print(f"wrote {path} ({len(res.rows)} rows)")
        for size in sorted(res.median_total_ms):
            print(f"size {size}: median estimated join {res.median_total_ms[size]:.0f} ms")

    else:
        raise ConfigError(f"unknown experiment {cfg.experiment!r}")

    return 1 if flagged else 0


def main(argv: Optional[List[str]] = None) -> int:
    parser = _build_parser()
    args = parser.parse_args(argv)
    try:
        cfg = _config_from_args(args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 2
    try:
        return _run(cfg)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 2
    except RuntimeError as exc:
        print(f"run failed: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())

"""Command-line driver: run scenarios, query the oracle, sweep parameters."""
from __future__ import annotations

import argparse
import sys
from pathlib import Path

from .harness import (ConfigError, config_from_text, config_to_text,
                      oracle_vector, parse_raw, config_from_raw, run_scenario)
from .model import to_mbps


def _load_text(path: str) -> str:
    try:
        return Path(path).read_text()
    except OSError as exc:
        raise ConfigError("file", None, f"cannot read {path}: {exc}")


def _write_outputs(report, out_dir: Path) -> None:
    out_dir.mkdir(parents=True, exist_ok=True)
    (out_dir / "report.txt").write_text(report.render() + "\n")
    (out_dir / "metrics.csv").write_text(report.csv())


def _cmd_run(args) -> int:
    config = config_from_text(_load_text(args.config))
    if args.seed is not None:
        config.seed = args.seed
    if args.duration is not None:
        config.duration = args.duration * 1000  # CLI flag is in ms
        config.validate()
    report = run_scenario(config)
    out_dir = Path(args.out)
    _write_outputs(report, out_dir)
    h = report.headline
    fi = h["steady_fairness"]
    print(f"wrote {out_dir / 'report.txt'} and {out_dir / 'metrics.csv'}")
    print(f"fairness={fi if fi is not None else 'n/a'} "
          f"loss={h['total_loss']} max_queue={h['max_queue']}")
    return 0


def _cmd_oracle(args) -> int:
    allocation = oracle_vector(_load_text(args.topology))
    for vc, rate in allocation.items():
        print(f"{vc}\t{float(rate):.1f} cells/s\t{float(to_mbps(rate)):.6g} Mbps")
    return 0


def _cmd_sweep(args) -> int:
    raw = parse_raw(_load_text(args.config))
    key = args.param
    if "=" not in key:
        raise ConfigError("sweep", "--param", "expected key=v1,v2,...")
    key, values = key.split("=", 1)
    if "." not in key:
        raise ConfigError("sweep", "--param",
                          f"expected section.key, got {key!r}")
    section, field = key.rsplit(".", 1)
    values = [v.strip() for v in values.split(",") if v.strip()]
    if not values:
        raise ConfigError("sweep", "--param", "no values given")
    base_out = Path(args.out)
    for value in values:
        variant = {sect: dict(entries) for sect, entries in raw.items()}
        variant.setdefault(section, {})[field] = value
        config = config_from_raw(variant)
        report = run_scenario(config)
        label = f"{field}={value}".replace("/", "_")
        _write_outputs(report, base_out / label)
        h = report.headline
        fi = h["steady_fairness"]
        print(f"{label}: fairness={fi if fi is not None else 'n/a'} "
              f"loss={h['total_loss']} max_queue={h['max_queue']}")
    return 0


def main(argv=None) -> int:
    parser = argparse.ArgumentParser(
        prog="abrsim",
        description="Discrete-event simulator of ATM ABR congestion control")
    sub = parser.add_subparsers(dest="command", required=True)

    p_run = sub.add_parser("run", help="run one scenario")
    p_run.add_argument("config")
    p_run.add_argument("--out", default="out")
    p_run.add_argument("--seed", type=int, default=None)
    p_run.add_argument("--duration", type=int, default=None,
                       help="override duration, in milliseconds")
    p_run.set_defaults(func=_cmd_run)

    p_oracle = sub.add_parser("oracle",
                              help="print the max-min allocation vector")
    p_oracle.add_argument("topology")
    p_oracle.set_defaults(func=_cmd_oracle)

    p_sweep = sub.add_parser("sweep", help="run a labeled parameter series")
    p_sweep.add_argument("config")
    p_sweep.add_argument("--param", required=True,
                         help="section.key=v1,v2,...")
    p_sweep.add_argument("--out", default="sweep")
    p_sweep.set_defaults(func=_cmd_sweep)

    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except ConfigError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())

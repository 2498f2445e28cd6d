"""Command-line entry point.

Exit codes: 0 success, 1 usage or config error, 2 validation failure,
3 verification failure.
"""

from __future__ import annotations

import argparse
import csv
import json
import sys
from pathlib import Path

import numpy as np

from .checks import run_checks
from .config import load_config
from .simulator import ConfigError, LatencyReport, run_policies, sweep_bandwidth
from .trace import TraceFormatError, TraceValidationError, synth_trace, write_trace

__all__ = ["main", "load_report", "EXIT_OK", "EXIT_CONFIG", "EXIT_VALIDATION", "EXIT_VERIFY"]

EXIT_OK = 0
EXIT_CONFIG = 1
EXIT_VALIDATION = 2
EXIT_VERIFY = 3

REPORT_FORMAT = "wdmoe-report/1"


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        # argparse exits with 2, which is reserved for validation failures here
        self.print_usage(sys.stderr)
        print(f"{self.prog}: error: {message}", file=sys.stderr)
        raise SystemExit(EXIT_CONFIG)


def _out_dir(args) -> Path:
    out = Path(args.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    return out


def _load(args):
    cfg = load_config(args.config)
    if args.out_dir is None:
        args.out_dir = cfg.out_dir or "out"
    try:
        trace = cfg.load_trace(Path(args.config).resolve().parent)
    except FileNotFoundError as exc:
        raise ConfigError(f"trace file not found: {exc.filename}") from None
    return cfg, trace


def load_report(path) -> dict[str, LatencyReport]:
    """Read a ``report.json`` written by ``simulate``."""
    data = json.loads(Path(path).read_text())
    if data.get("format") != REPORT_FORMAT:
        raise ValueError(f"{path}: not a {REPORT_FORMAT} file")
    return {name: LatencyReport.from_dict(rep) for name, rep in data["reports"].items()}


def cmd_simulate(args) -> int:
    cfg, trace = _load(args)
    reports = run_policies(cfg.scenario(), trace, cfg.policies)
    out = _out_dir(args)
    payload = {
        "format": REPORT_FORMAT,
        "config": cfg.model_dump(mode="json"),
        "reports": {p: r.to_dict() for p, r in reports.items()},
    }
    (out / "report.json").write_text(json.dumps(payload, indent=2) + "\n")
    with open(out / "summary.csv", "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["policy", "total_latency_s", "wlr_total", "active_pairs"])
        for p, r in reports.items():
            writer.writerow([p, repr(r.total_latency_s), repr(r.wlr_total), repr(r.active_pairs)])
    for p, r in reports.items():
        print(f"{p:24s} {r.total_latency_s * 1e3:12.3f} ms  +/- {r.total_latency_ci95_s * 1e3:.3f}")
    return EXIT_OK


def cmd_sweep(args) -> int:
    if not 0 < args.b_min < args.b_max:
        raise ConfigError(f"need 0 < --b-min < --b-max, got {args.b_min:g} and {args.b_max:g}")
    if args.points < 2:
        raise ConfigError("--points must be at least 2")
    cfg, trace = _load(args)
    b_values = np.linspace(args.b_min, args.b_max, args.points)
    curves = sweep_bandwidth(cfg.scenario(), trace, b_values, cfg.policies)
    out = _out_dir(args)
    with open(out / "sweep.csv", "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["bandwidth_hz", "policy", "latency_s"])
        for p, curve in curves.items():
            for b, lat in curve:
                writer.writerow([repr(b), p, repr(lat)])
    rising = [p for p, c in curves.items() if any(b[1] > a[1] for a, b in zip(c, c[1:]))]
    if rising:
        print(f"latency rises with bandwidth for: {', '.join(rising)}", file=sys.stderr)
        return EXIT_VALIDATION
    return EXIT_OK


def cmd_synth_trace(args) -> int:
    try:
        trace = synth_trace(args.seed, args.blocks, args.tokens, args.experts, args.peakedness)
    except ValueError as exc:
        raise ConfigError(str(exc)) from None
    write_trace(trace, args.out)
    return EXIT_OK


def cmd_verify(args) -> int:
    cfg = load_config(args.config)
    results = run_checks(cfg)
    width = max(len(r.name) for r in results)
    for r in results:
        print(f"{'PASS' if r.passed else 'FAIL'}  {r.name:{width}s}  {r.detail}")
    return EXIT_OK if all(r.passed for r in results) else EXIT_VERIFY


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="wdmoe", description="Wireless distributed MoE latency simulator.")
    parser.add_argument("--out-dir", default=None, help="output directory (default ./out)")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p = sub.add_parser("simulate", help="run every configured policy")
    p.add_argument("--config", required=True)
    p.set_defaults(func=cmd_simulate)

    p = sub.add_parser("sweep", help="latency against total bandwidth")
    p.add_argument("--config", required=True)
    p.add_argument("--b-min", type=float, required=True, help="Hz")
    p.add_argument("--b-max", type=float, required=True, help="Hz")
    p.add_argument("--points", type=int, default=10)
    p.set_defaults(func=cmd_sweep)

    p = sub.add_parser("synth-trace", help="write a synthetic gating trace")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--blocks", type=int, default=32)
    p.add_argument("--tokens", type=int, default=256)
    p.add_argument("--experts", type=int, default=8)
    p.add_argument("--peakedness", type=float, default=1.0)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_synth_trace)

    p = sub.add_parser("verify", help="check solver and policies against brute-force oracles")
    p.add_argument("--config", required=True)
    p.set_defaults(func=cmd_verify)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (TraceFormatError, TraceValidationError) as exc:
        print(f"invalid trace: {exc}", file=sys.stderr)
        return EXIT_VALIDATION
    except OSError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG


if __name__ == "__main__":
    sys.exit(main())

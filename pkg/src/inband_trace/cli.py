"""Command-line entry point: simulate, trace, assemble, report.

    inband-trace run --scenario bookinfo-M --requests 1000 --concurrency 50 \\
        --drop-prob 0 --seed 1 --out traces.jsonl --report report.json
    inband-trace list-scenarios
    inband-trace verify --report report.json --min-precision 1.0

Exit codes: 0 success, 1 verification failed, 2 bad arguments, config or IO.
"""

from __future__ import annotations

import argparse
import json
import os
import sys
from dataclasses import replace
from pathlib import Path
from typing import Optional, Sequence

from .engine import EngineConfig
from .export import export_otel
from .pipeline import run_pipeline
from .sim import ScenarioError, builtin_scenarios, get_scenario

# directory for traces and reports when --out/--report are not given
OUTDIR_ENV = "INBAND_TRACE_OUTDIR"

EXIT_OK = 0
EXIT_VERIFY_FAILED = 1
EXIT_USAGE = 2


class CliError(Exception):
    pass


def _hop(text: str) -> tuple[str, str]:
    caller, sep, callee = text.partition(":")
    if not sep or not caller or not callee:
        raise argparse.ArgumentTypeError(f"expected CALLER:CALLEE, got {text!r}")
    return caller, callee


def _probability(text: str) -> float:
    p = float(text)
    if not 0.0 <= p <= 1.0:
        raise argparse.ArgumentTypeError(f"probability must lie in [0, 1], got {p}")
    return p


def _positive(text: str) -> int:
    n = int(text)
    if n < 1:
        raise argparse.ArgumentTypeError(f"expected a positive integer, got {n}")
    return n


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="inband-trace", description="In-band request tracing over simulated kernel events."
    )
    sub = parser.add_subparsers(dest="command", required=True)

    run = sub.add_parser("run", help="simulate a scenario and trace it")
    run.add_argument("--scenario", required=True, help="builtin name or .toml/.json file")
    run.add_argument("--requests", type=_positive, help="total requests (default: scenario's)")
    run.add_argument("--concurrency", type=_positive, help="virtual users (default: scenario's)")
    run.add_argument("--drop-prob", type=_probability, help="per-event probe-miss probability")
    run.add_argument("--seed", type=int, help="RNG seed (default: scenario's)")
    run.add_argument(
        "--drop-hop", type=_hop, action="append", default=[], metavar="CALLER:CALLEE",
        help="lose every request send on this hop; repeatable",
    )
    run.add_argument("--walk-depth", type=int, help="ancestor walk limit; 0 disables it")
    run.add_argument("--buffer-capacity", type=_positive, help="span ring capacity")
    run.add_argument("--engine-config", type=Path, help="engine settings (.toml or .json)")
    run.add_argument("--out", type=Path, help="trace output, one JSON document per line")
    run.add_argument("--report", type=Path, help="JSON run report")

    sub.add_parser("list-scenarios", help="print the builtin scenarios")

    verify = sub.add_parser("verify", help="gate on a report's precision")
    verify.add_argument("--report", type=Path, required=True)
    verify.add_argument("--min-precision", type=float, required=True)
    return parser


def _default_paths(args: argparse.Namespace, stem: str) -> tuple[Optional[Path], Optional[Path]]:
    out, report = args.out, args.report
    outdir = os.environ.get(OUTDIR_ENV)
    if outdir:
        base = Path(outdir)
        if out is None:
            out = base / f"{stem}.traces.jsonl"
        if report is None:
            report = base / f"{stem}.report.json"
    return out, report


def _write(path: Path, text: str) -> None:
    try:
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_text(text, encoding="utf-8")
    except OSError as exc:
        raise CliError(f"cannot write {path}: {exc.strerror or exc}") from None


def cmd_run(args: argparse.Namespace) -> int:
    try:
        scenario = get_scenario(args.scenario)
        workload = {}
        if args.requests is not None:
            workload["total_requests"] = args.requests
        if args.concurrency is not None:
            workload["concurrency"] = args.concurrency
        faults: dict = {}
        if args.drop_prob is not None:
            faults["drop_prob"] = args.drop_prob
        if args.drop_hop:
            faults["dropped_hops"] = tuple(args.drop_hop)
        if args.buffer_capacity is not None:
            faults["buffer_capacity"] = args.buffer_capacity
        if workload:
            scenario = scenario.with_workload(**workload)
        if faults:
            scenario = scenario.with_faults(**faults)
        if args.seed is not None:
            scenario = replace(scenario, seed=args.seed)
        config = EngineConfig.load(args.engine_config) if args.engine_config else EngineConfig()
        if args.walk_depth is not None:
            config = replace(config, walk_depth=args.walk_depth)
    except (ScenarioError, ValueError, TypeError) as exc:
        raise CliError(str(exc)) from None
    except OSError as exc:
        raise CliError(f"cannot read config: {exc}") from None

    result = run_pipeline(scenario, config)
    report = result.report()
    stem = f"{scenario.name}-seed{scenario.seed}"
    out, report_path = _default_paths(args, stem)
    if out is not None:
        try:
            out.parent.mkdir(parents=True, exist_ok=True)
            export_otel(result.trees, out)
        except OSError as exc:
            raise CliError(f"cannot write {out}: {exc.strerror or exc}") from None
    if report_path is not None:
        _write(report_path, json.dumps(report, sort_keys=True, indent=2) + "\n")

    c = report["counters"]
    print(f"scenario    {scenario.name} (seed {scenario.seed})")
    print(f"requests    {report['requests']} at concurrency {scenario.workload.concurrency}")
    print(f"events      {result.event_count}")
    print(f"traces      {report['trace_count']} ({report['complete_trace_count']} complete)")
    print(f"spans       {report['span_count']}")
    print(f"precision   {report['precision']:.6f}")
    print(
        "counters    "
        f"orphan_sends={c['orphan_sends']} malformed_contexts={c['malformed_contexts']} "
        f"buffer_drops={c['buffer_drops']} stray_responses={c['stray_responses']}"
    )
    if out is not None:
        print(f"traces ->   {out}")
    if report_path is not None:
        print(f"report ->   {report_path}")
    return EXIT_OK


def cmd_list(_: argparse.Namespace) -> int:
    for name, s in sorted(builtin_scenarios().items()):
        tree = s.call_tree()
        print(
            f"{name:22s} services={len(s.services):<3d} entry={s.entry:18s} "
            f"spans/request={tree.span_count()}"
        )
    return EXIT_OK


def cmd_verify(args: argparse.Namespace) -> int:
    try:
        report = json.loads(args.report.read_text(encoding="utf-8"))
        value = float(report["precision"])
    except OSError as exc:
        raise CliError(f"cannot read {args.report}: {exc.strerror or exc}") from None
    except (ValueError, KeyError, TypeError) as exc:
        raise CliError(f"{args.report} is not a run report: {exc!r}") from None
    ok = value >= args.min_precision
    verdict = "PASS" if ok else "FAIL"
    print(f"{verdict} precision {value:.6f} (minimum {args.min_precision})")
    return EXIT_OK if ok else EXIT_VERIFY_FAILED


_COMMANDS = {"run": cmd_run, "list-scenarios": cmd_list, "verify": cmd_verify}


def main(argv: Optional[Sequence[str]] = None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return _COMMANDS[args.command](args)
    except CliError as exc:
        print(f"inband-trace: error: {exc}", file=sys.stderr)
        return EXIT_USAGE


if __name__ == "__main__":
    sys.exit(main())

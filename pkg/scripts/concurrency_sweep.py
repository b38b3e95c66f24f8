"""Fault-free precision and wall time across concurrency levels.

    python scripts/concurrency_sweep.py --scenario bookinfo-M --requests 10000
"""

import argparse
import time

from inband_trace.pipeline import run_pipeline
from inband_trace.sim import builtin_scenarios, get_scenario


def main() -> None:
    ap = argparse.ArgumentParser()
    ap.add_argument("--scenario", action="append", help="repeatable; default: all builtins")
    ap.add_argument("--requests", type=int, default=10_000)
    ap.add_argument("--concurrency", type=int, nargs="+", default=[1, 50, 100, 150, 200])
    args = ap.parse_args()

    names = args.scenario or sorted(builtin_scenarios())
    print(f"{'scenario':22s} {'conc':>5s} {'precision':>10s} {'traces':>7s} {'seconds':>8s}")
    for name in names:
        base = get_scenario(name)
        total = 0.0
        for c in args.concurrency:
            t0 = time.perf_counter()
            r = run_pipeline(base.with_workload(total_requests=args.requests, concurrency=c))
            p = r.precision
            dt = time.perf_counter() - t0
            total += dt
            print(f"{name:22s} {c:5d} {p:10.6f} {len(r.trees):7d} {dt:8.2f}")
        print(f"{name:22s} {'all':>5s} {'':10s} {'':7s} {total:8.2f}")


if __name__ == "__main__":
    main()

"""Precision under random probe misses against the independent-drop model.

For each drop probability the measured precision is printed next to the
expectation mean((1 - p) ** n) over requests, n being the number of
send/recv events a request generates.

    python scripts/drop_sweep.py --scenario bookinfo-M --p 0.005 0.02 0.05
"""

import argparse

from inband_trace.pipeline import run_pipeline
from inband_trace.sim import get_scenario


def main() -> None:
    ap = argparse.ArgumentParser()
    ap.add_argument("--scenario", default="bookinfo-M")
    ap.add_argument("--requests", type=int, default=10_000)
    ap.add_argument("--concurrency", type=int, default=100)
    ap.add_argument("--p", type=float, nargs="+", default=[0.0, 0.005, 0.01, 0.02, 0.05, 0.1])
    args = ap.parse_args()

    base = get_scenario(args.scenario).with_workload(
        total_requests=args.requests, concurrency=args.concurrency
    )
    print(f"{'p':>7s} {'measured':>9s} {'expected':>9s} {'orphans':>8s} {'traces':>7s}")
    for p in args.p:
        r = run_pipeline(base.with_faults(drop_prob=p))
        counts = [q.event_count for q in r.ground_truth.requests]
        expected = sum((1 - p) ** n for n in counts) / len(counts)
        orphans = r.engine.counters["orphan_sends"]
        print(f"{p:7.3f} {r.precision:9.4f} {expected:9.4f} {orphans:8d} {len(r.trees):7d}")


if __name__ == "__main__":
    main()

#!/usr/bin/env python3
"""Array and Array-RAW write-percentage sweeps across runtimes, written as CSV.

    python scripts/sweep_array.py --pdom 0 --out results/array_pdom0.csv
"""

import argparse
import os

from pmtx.bench import BenchConfig, emit_csv, run_alloc, sweep_array


def main():
    p = argparse.ArgumentParser()
    p.add_argument("--pdom", type=int, default=0)
    p.add_argument("--barrier-ns", type=int, default=500)
    p.add_argument("--load-ns", type=int, default=300)
    p.add_argument("--slots", type=int, default=100_000)
    p.add_argument("--txns", type=int, default=200)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", default="results/sweep.csv")
    a = p.parse_args()

    base = BenchConfig(pdom=a.pdom, barrier_ns=a.barrier_ns, load_ns=a.load_ns, slots=a.slots,
                       txns=a.txns, seed=a.seed)
    results = sweep_array(base)
    # RAW at the largest slot size, where log churn dominates
    raw = BenchConfig(pdom=a.pdom, barrier_ns=a.barrier_ns, load_ns=a.load_ns, slots=min(a.slots, 20_000),
                      slot_size=64, txns=max(a.txns // 4, 10), seed=a.seed)
    results += sweep_array(raw, raw=True)
    for k in (1, 2, 4):
        results += run_alloc(BenchConfig(workload="alloc", pdom=a.pdom, barrier_ns=a.barrier_ns,
                                         load_ns=a.load_ns, allocs_per_txn=k, txns=a.txns, seed=a.seed))
    os.makedirs(os.path.dirname(a.out) or ".", exist_ok=True)
    emit_csv(results, a.out)
    for r in results:
        print(f"{r.workload:9s} {r.runtime:4s} slot={r.slot_size:2d} w={r.write_pct:3d}% "
              f"{r.alloc_mode if r.workload == 'alloc' else '':5s} sim={r.mean_sim_latency_ns:10.0f}ns "
              f"barriers={r.barriers_per_txn:6.1f}")
    print(f"wrote {a.out}")


if __name__ == "__main__":
    main()

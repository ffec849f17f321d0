#!/usr/bin/env python3
"""Crash-sweep every bundled workload under each runtime at PDOM-0 and PDOM-1.

Exits non-zero if any sweep reports a violation.  Recovery results are
cached per (script, runtime) because PDOM-0 and PDOM-1 share semantics.
"""

import argparse
import sys
import time

from pmtx.harness import builtin_scripts, crash_sweep, load_script


def main():
    p = argparse.ArgumentParser()
    p.add_argument("scripts", nargs="*", help="workload files (default: the bundled suite)")
    p.add_argument("--runtimes", default="undo,redo,cow")
    p.add_argument("--pdoms", default="0,1")
    p.add_argument("--seed", type=int, default=0)
    a = p.parse_args()

    scripts = [load_script(s) for s in a.scripts] or builtin_scripts()
    t0 = time.perf_counter()
    points = 0
    bad = 0
    for s in scripts:
        for rt in a.runtimes.split(","):
            cache = {}
            for pd in a.pdoms.split(","):
                rep = crash_sweep(s, rt, int(pd), seed=a.seed, cache=cache)
                points += rep.crash_points
                bad += not rep.ok
                print(rep.summary(), flush=True)
                for v in rep.violations[:3]:
                    print("   ", v)
    print(f"{len(scripts)} scripts, {points} crash points, {bad} failing sweeps, "
          f"{time.perf_counter() - t0:.1f}s")
    sys.exit(1 if bad else 0)


if __name__ == "__main__":
    main()

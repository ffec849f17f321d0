"""Command-line entry points: pmtx-bench, pmtx-crash and pmtx-dump."""

from __future__ import annotations

import argparse
import sys

from . import bench
from .errors import FormatError, PmError
from .harness import ScriptError, builtin_scripts, crash_sweep, load_script
from .simpm import ENUMERATE_CAP, Pdom, PdomConfig


def _pdom(s: str) -> int:
    v = int(s)
    if v not in (0, 1, 2):
        raise argparse.ArgumentTypeError("pdom must be 0, 1 or 2")
    return v


def bench_main(argv=None) -> int:
    p = argparse.ArgumentParser(prog="pmtx-bench", description="Array, Array-RAW and allocator microbenchmarks.")
    p.add_argument("--workload", choices=bench.WORKLOADS, default="array")
    p.add_argument("--runtime", choices=bench.RUNTIMES + ("all",), default="undo")
    p.add_argument("--pdom", type=_pdom, default=0)
    p.add_argument("--barrier-ns", type=int, default=None, help="override the domain's barrier latency")
    p.add_argument("--load-ns", type=int, default=300)
    p.add_argument("--slot-size", type=int, default=4, help="8-byte integers per slot (1..64)")
    p.add_argument("--write-pct", default="0",
                   help="percentage of written slots; a comma list or 'sweep' for 0,20,...,100")
    p.add_argument("--slots", type=int, default=100_000)
    p.add_argument("--slots-per-txn", type=int, default=20)
    p.add_argument("--txns", type=int, default=200)
    p.add_argument("--allocs-per-txn", type=int, choices=(1, 2, 4), default=1)
    p.add_argument("--alloc-mode", choices=("lazy", "eager", "both"), default="both")
    p.add_argument("--threads", type=int, default=1, help="stress mode; numbers are not comparable")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--csv", default="-", help="output path, '-' for stdout")
    a = p.parse_args(argv)

    pcts = list(range(0, 101, 20)) if a.write_pct == "sweep" else [int(x) for x in a.write_pct.split(",")]
    runtimes = bench.RUNTIMES if a.runtime == "all" else (a.runtime,)
    try:
        cfg = bench.BenchConfig(workload=a.workload, runtime=runtimes[0], pdom=a.pdom, barrier_ns=a.barrier_ns,
                                load_ns=a.load_ns, slots=a.slots, slot_size=a.slot_size,
                                slots_per_txn=a.slots_per_txn, write_pct=pcts[0], txns=a.txns,
                                allocs_per_txn=a.allocs_per_txn, alloc_mode=a.alloc_mode, threads=a.threads,
                                seed=a.seed)
        if a.workload == "alloc":
            modes = ("lazy", "eager") if a.alloc_mode == "both" else (a.alloc_mode,)
            results = []
            for rt in runtimes:
                results += bench.run_alloc(bench.dataclasses.replace(cfg, runtime=rt), modes)
        else:
            results = bench.sweep_array(cfg, runtimes, pcts, raw=a.workload == "array-raw")
    except (ValueError, PmError) as e:
        p.error(str(e))
    bench.emit_csv(results, a.csv)
    return 0


def crash_main(argv=None) -> int:
    p = argparse.ArgumentParser(prog="pmtx-crash",
                                description="Crash a scripted workload at every medium operation and verify recovery.")
    p.add_argument("--runtime", choices=("undo", "redo", "cow"), required=True)
    p.add_argument("--pdom", type=_pdom, default=1)
    p.add_argument("--script", action="append",
                   help="workload file; repeatable; 'builtin' runs the bundled suite")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--cap", type=int, default=ENUMERATE_CAP, help="pending lines enumerated exhaustively")
    p.add_argument("-v", "--verbose", action="store_true", help="list every violation")
    a = p.parse_args(argv)

    scripts = []
    try:
        for s in a.script or ["builtin"]:
            scripts += builtin_scripts() if s == "builtin" else [load_script(s)]
    except (OSError, ScriptError) as e:
        print(f"pmtx-crash: {e}", file=sys.stderr)
        return 2
    if a.pdom == Pdom.PDOM2:
        print("note: under pdom 2 every store is persistent at once; crash points have no pending lines",
              file=sys.stderr)
    failed = 0
    points = 0
    for s in scripts:
        rep = crash_sweep(s, a.runtime, PdomConfig(Pdom(a.pdom)), seed=a.seed, cap=a.cap)
        points += rep.crash_points
        print(rep.summary())
        for v in rep.violations if a.verbose else rep.violations[:1]:
            print(f"  {v}")
        if not rep.audit_ok:
            print("  self-audit failed: crash point or subset counts do not add up")
        failed += not rep.ok
    print(f"{len(scripts) - failed}/{len(scripts)} scripts passed, {points} crash points")
    return 1 if failed else 0


def dump_main(argv=None) -> int:
    from .dump import Section, dump_file
    p = argparse.ArgumentParser(prog="pmtx-dump", description="Render a region image as text.")
    p.add_argument("file")
    p.add_argument("--section", default="all",
                   help="one of " + ", ".join(s.value for s in Section)
                        + "; log sections take a descriptor number, e.g. 'undo-log 0'")
    p.add_argument("n", nargs="?", type=int, help="descriptor number for undo-log/redo-log")
    a = p.parse_intermixed_args(argv)
    sel = a.section if a.n is None else f"{a.section} {a.n}"
    try:
        sys.stdout.write(dump_file(a.file, sel))
    except FormatError as e:
        print(f"pmtx-dump: {e}", file=sys.stderr)
        return 2
    except ValueError as e:
        p.error(str(e))
    return 0


if __name__ == "__main__":
    sys.exit(bench_main())

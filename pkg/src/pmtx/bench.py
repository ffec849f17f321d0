"""Array, Array-RAW and allocator microbenchmarks.

Latency is reported twice: a deterministic simulated latency from the
medium's cost model (loads and barriers times their configured latencies)
and plain wall-clock time.  Only the former is meant for comparisons.
"""

from __future__ import annotations

import csv
import dataclasses
import random
import sys
import threading
import time
from dataclasses import dataclass

from .alloc import block_size_for
from .errors import BusyError
from .layout import OBJ_HDR, RuntimeKind
from .region import RegionConfig, region_create
from .simpm import Pdom, PdomConfig, PersistentMedium
from .txn import Mode

WORKLOADS = ("array", "array-raw", "alloc")
RUNTIMES = ("undo", "redo", "cow")
CSV_COLUMNS = ["workload", "runtime", "pdom", "slot_size", "write_pct", "mean_sim_latency_ns",
               "barriers_per_txn", "writebacks_per_txn", "loads_per_txn", "wall_ns_per_txn",
               "allocs_per_txn", "alloc_mode"]
_MASK64 = (1 << 64) - 1


@dataclass
class BenchConfig:
    workload: str = "array"
    runtime: str = "undo"
    pdom: int = 0
    barrier_ns: int | None = None
    load_ns: int = 300
    slots: int = 100_000
    slot_size: int = 4          # 8-byte integers per slot, 1..64
    slots_per_txn: int = 20
    write_pct: int = 0
    txns: int = 200
    allocs_per_txn: int = 1
    alloc_mode: str = "lazy"
    threads: int = 1
    seed: int = 0

    def __post_init__(self):
        if self.workload not in WORKLOADS:
            raise ValueError(f"workload must be one of {WORKLOADS}")
        if self.runtime not in RUNTIMES:
            raise ValueError(f"runtime must be one of {RUNTIMES}")
        if not 1 <= self.slot_size <= 64:
            raise ValueError("slot_size must be between 1 and 64")
        if not 0 <= self.write_pct <= 100:
            raise ValueError("write_pct must be between 0 and 100")
        if self.slots < self.slots_per_txn:
            raise ValueError("need at least slots_per_txn slots")

    def pdom_config(self) -> PdomConfig:
        return PdomConfig(Pdom(self.pdom), self.barrier_ns, self.load_ns)


@dataclass
class BenchResult:
    workload: str
    runtime: str
    pdom: int
    slot_size: int
    write_pct: int
    txns: int
    mean_sim_latency_ns: float
    barriers_per_txn: float
    writebacks_per_txn: float
    loads_per_txn: float
    wall_ns_per_txn: float
    allocs_per_txn: int = 0
    alloc_mode: str = "lazy"
    lookups_per_txn: float = 0.0
    records_visited_per_txn: float = 0.0
    barriers_per_alloc_call: float = 0.0

    def row(self) -> dict:
        d = dataclasses.asdict(self)
        return {k: d[k] for k in CSV_COLUMNS}


def _region_for(cfg: BenchConfig, kind: RuntimeKind, payload: int, n_objects: int, alloc_mode: str = "lazy"):
    bs = block_size_for(payload + OBJ_HDR) or payload + OBJ_HDR
    per = bs + (block_size_for(OBJ_HDR) if kind is RuntimeKind.COW else 0)
    heap = int(n_objects * per * 1.25) + 64 * 16384
    rcfg = RegionConfig(n_desc=max(4, cfg.threads + 1), chunk_size=4096, n_chunks=96, unit_size=16384,
                        alloc_mode=alloc_mode, undo_dedupe=cfg.workload != "array-raw")
    size = (heap + rcfg.n_chunks * rcfg.chunk_size + (1 << 20)) // 64 * 64
    med = PersistentMedium(size, cfg.pdom_config())
    return med, region_create(med, kind, rcfg)


class ArrayBench:
    """A populated array of slot objects, reusable across write percentages."""

    def __init__(self, cfg: BenchConfig, runtime: str | None = None):
        self.cfg = cfg
        self.runtime = runtime or cfg.runtime
        self.kind = RuntimeKind[self.runtime.upper()]
        self.size = cfg.slot_size * 8
        self.medium, self.region = _region_for(cfg, self.kind, self.size, cfg.slots)
        self.refs: list[int] = []
        batch = 2000
        for start in range(0, cfg.slots, batch):
            t = self.region.begin()
            for _ in range(min(batch, cfg.slots - start)):
                self.refs.append(t.alloc(self.size))
            t.commit()

    def _txn(self, rng: random.Random, n_write: int, raw: bool):
        cfg = self.cfg
        spt = cfg.slots_per_txn
        start = rng.randrange(0, cfg.slots - spt + 1)  # windows never wrap
        writes = set(rng.sample(range(spt), n_write))
        cow = self.kind is RuntimeKind.COW
        while True:
            txn = self.region.begin()
            try:
                for i in range(spt):
                    ref = self.refs[start + i]
                    if i not in writes:
                        txn.read(ref, 0, self.size)
                        continue
                    if cow:
                        txn.open(ref, Mode.WRITE)
                    if raw:
                        for k in range(cfg.slot_size):
                            v = txn.read_u64(ref, 8 * k)
                            txn.write_u64(ref, 8 * k, (v + 1) & _MASK64)
                    else:
                        buf = txn.read(ref, 0, self.size)
                        vals = [(int.from_bytes(buf[j:j + 8], "little") + 1) & _MASK64
                                for j in range(0, self.size, 8)]
                        txn.write(ref, 0, b"".join(v.to_bytes(8, "little") for v in vals))
                stats = txn.stats
                txn.commit()
                return stats
            except BusyError:
                txn.abort()  # another thread owns a slot; retry the same window

    def run(self, write_pct: int, txns: int | None = None, raw: bool | None = None) -> BenchResult:
        cfg = self.cfg
        txns = cfg.txns if txns is None else txns
        raw = cfg.workload == "array-raw" if raw is None else raw
        n_write = round(cfg.slots_per_txn * write_pct / 100)
        med = self.medium
        med.reset_counters()
        lookups = visited = 0
        t0 = time.perf_counter_ns()
        if cfg.threads <= 1:
            rng = random.Random(cfg.seed)
            for _ in range(txns):
                st = self._txn(rng, n_write, raw)
                lookups += st.lookups
                visited += st.records_visited
        else:
            def work(w, n):
                rng = random.Random(cfg.seed * 7919 + w)
                for _ in range(n):
                    self._txn(rng, n_write, raw)
            share = [txns // cfg.threads + (1 if w < txns % cfg.threads else 0) for w in range(cfg.threads)]
            ts = [threading.Thread(target=work, args=(w, share[w])) for w in range(cfg.threads)]
            for t in ts:
                t.start()
            for t in ts:
                t.join()
        wall = time.perf_counter_ns() - t0
        rep = med.cost_report()
        n = max(txns, 1)
        return BenchResult("array-raw" if raw else "array", self.runtime, cfg.pdom, cfg.slot_size, write_pct,
                           txns, rep.simulated_time / n, rep.barriers / n, rep.writebacks / n, rep.loads / n,
                           wall / n, lookups_per_txn=lookups / n, records_visited_per_txn=visited / n)


def run_array(cfg: BenchConfig, runtime: str | None = None) -> BenchResult:
    return ArrayBench(cfg, runtime).run(cfg.write_pct, raw=False)


def run_array_raw(cfg: BenchConfig, runtime: str | None = None) -> BenchResult:
    return ArrayBench(cfg, runtime).run(cfg.write_pct, raw=True)


def run_alloc(cfg: BenchConfig, modes: tuple[str, ...] = ("lazy", "eager")) -> list[BenchResult]:
    """Transactions that only allocate; one result per persist mode."""
    out = []
    kind = RuntimeKind[cfg.runtime.upper()]
    for mode in modes:
        med, region = _region_for(cfg, kind, 512, cfg.txns * cfg.allocs_per_txn, mode)
        rng = random.Random(cfg.seed)
        med.reset_counters()
        call_barriers = 0
        t0 = time.perf_counter_ns()
        for _ in range(cfg.txns):
            txn = region.begin()
            for _ in range(cfg.allocs_per_txn):
                before = med.cost_report().barriers
                txn.alloc(rng.randint(1, 512))
                call_barriers += med.cost_report().barriers - before
            txn.commit()
        wall = time.perf_counter_ns() - t0
        rep = med.cost_report()
        n = max(cfg.txns, 1)
        out.append(BenchResult("alloc", cfg.runtime, cfg.pdom, cfg.slot_size, 100, cfg.txns,
                               rep.simulated_time / n, rep.barriers / n, rep.writebacks / n, rep.loads / n,
                               wall / n, cfg.allocs_per_txn, mode,
                               barriers_per_alloc_call=call_barriers / max(n * cfg.allocs_per_txn, 1)))
    return out


def run(cfg: BenchConfig) -> list[BenchResult]:
    if cfg.workload == "alloc":
        return run_alloc(cfg, (cfg.alloc_mode,) if cfg.alloc_mode != "both" else ("lazy", "eager"))
    if cfg.workload == "array-raw":
        return [run_array_raw(cfg)]
    return [run_array(cfg)]


def sweep_array(cfg: BenchConfig, runtimes=RUNTIMES, write_pcts=range(0, 101, 20),
                raw: bool = False) -> list[BenchResult]:
    """One populated array per runtime, reused across the write-percentage sweep."""
    out = []
    for rt in runtimes:
        b = ArrayBench(dataclasses.replace(cfg, runtime=rt, workload="array-raw" if raw else "array"))
        for p in write_pcts:
            out.append(b.run(p, raw=raw))
    return out


def emit_csv(results, path=None):
    """Write results as CSV to `path`, or stdout when path is None or '-'."""
    if path is None or str(path) == "-":
        _write(results, sys.stdout)
        return
    with open(path, "w", newline="") as f:
        _write(results, f)


def _write(results, f):
    w = csv.DictWriter(f, fieldnames=CSV_COLUMNS)
    w.writeheader()
    for r in results:
        row = r.row()
        for k in ("mean_sim_latency_ns", "barriers_per_txn", "writebacks_per_txn", "loads_per_txn",
                  "wall_ns_per_txn"):
            row[k] = f"{row[k]:.3f}" if k != "wall_ns_per_txn" else f"{row[k]:.0f}"
        w.writerow(row)


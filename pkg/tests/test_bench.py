import csv

import pytest

from pmtx.bench import CSV_COLUMNS, BenchConfig, emit_csv, run, run_alloc, run_array, run_array_raw, sweep_array

SMALL = dict(slots=400, txns=15, pdom=0, barrier_ns=500, load_ns=300)


def test_undo_read_only_is_commit_only():
    r = run_array(BenchConfig(write_pct=0, **SMALL), "undo")
    assert r.barriers_per_txn == 2


def test_undo_all_writes():
    r = run_array(BenchConfig(write_pct=100, slot_size=4, **SMALL), "undo")
    assert r.barriers_per_txn == 20 + 2


@pytest.mark.parametrize("pct", [20, 60, 100])
def test_redo_four_barriers(pct):
    assert run_array(BenchConfig(write_pct=pct, **SMALL), "redo").barriers_per_txn == 4


def test_undo_raw_records_per_slot():
    cfg = BenchConfig(workload="array-raw", slot_size=64, write_pct=5, **SMALL)  # one written slot
    r = run_array_raw(cfg, "undo")
    assert r.barriers_per_txn == 64 + 2  # one record per integer, dedupe off


def test_redo_raw_lookups_per_slot():
    cfg = BenchConfig(workload="array-raw", slot_size=64, write_pct=5, **SMALL)
    r = run_array_raw(cfg, "redo")
    assert r.lookups_per_txn == 63
    assert r.records_visited_per_txn == sum(range(64))


def test_cow_array_runs():
    r = run_array(BenchConfig(write_pct=40, **SMALL), "cow")
    assert r.barriers_per_txn == 4


def test_pdom2_has_no_barrier_cost(runtime):
    cfg = BenchConfig(write_pct=60, slots=400, txns=10, pdom=2)
    r = run_array(cfg, runtime)
    assert r.barriers_per_txn == 0 and r.writebacks_per_txn == 0
    assert r.mean_sim_latency_ns == r.loads_per_txn * 300


def test_alloc_lazy_vs_eager():
    lazy, eager = run_alloc(BenchConfig(workload="alloc", allocs_per_txn=2, txns=10, **{
        k: v for k, v in SMALL.items() if k != "txns"}))
    assert lazy.alloc_mode == "lazy" and eager.alloc_mode == "eager"
    assert lazy.barriers_per_alloc_call == 0 and eager.barriers_per_alloc_call >= 1
    assert lazy.mean_sim_latency_ns < eager.mean_sim_latency_ns


def test_deterministic_csv(tmp_path):
    cfg = BenchConfig(write_pct=40, **SMALL)
    p1, p2 = tmp_path / "a.csv", tmp_path / "b.csv"
    emit_csv(sweep_array(cfg, ("undo", "redo"), (0, 40)), p1)
    emit_csv(sweep_array(cfg, ("undo", "redo"), (0, 40)), p2)
    strip = lambda p: [{k: v for k, v in row.items() if k != "wall_ns_per_txn"} for row in csv.DictReader(open(p))]
    assert strip(p1) == strip(p2)
    rows = list(csv.DictReader(open(p1)))
    assert list(rows[0].keys()) == CSV_COLUMNS and len(rows) == 4


def test_config_validation():
    for bad in (dict(slot_size=0), dict(slot_size=65), dict(write_pct=101), dict(workload="x"),
                dict(runtime="y"), dict(slots=5)):
        with pytest.raises(ValueError):
            BenchConfig(**bad)


def test_run_dispatch():
    assert run(BenchConfig(workload="alloc", alloc_mode="eager", txns=3))[0].alloc_mode == "eager"
    assert run(BenchConfig(workload="array-raw", slots=100, txns=2))[0].workload == "array-raw"


def test_threads_stress_mode(runtime):
    r = run_array(BenchConfig(write_pct=50, slots=200, txns=20, threads=3), runtime)
    assert r.txns == 20

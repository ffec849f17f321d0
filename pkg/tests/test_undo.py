import pytest

from pmtx import CrashPolicy, Pdom, PersistentMedium, RegionConfig, region_create, region_open
from pmtx.layout import UNDO_COMMIT, UNDO_DATA
from pmtx.txn import DescImage
from pmtx.undo import encode_record, infer_tail, log_records, read_record

from conftest import SMALL, barriers, make_region, setup_objects


def _stored_desc(med, d):
    return DescImage.parse(d.id, d.addr, med.persistent_image[d.addr:d.addr + 64])


def test_append_costs_one_barrier():
    med, region = make_region("undo")
    (a,) = setup_objects(region, [64])
    t = region.begin()
    b0 = barriers(med)
    t.write(a, 0, b"x" * 8)
    assert barriers(med) - b0 == 1
    t.write(a, 0, b"y" * 8)  # already covered: no new record
    assert barriers(med) - b0 == 1
    t.commit()


def test_two_barrier_variant():
    med = PersistentMedium(1 << 19)
    region = region_create(med, "undo", RegionConfig(n_desc=2, chunk_size=1024, n_chunks=16, unit_size=4096,
                                                     undo_two_barrier=True))
    (a,) = setup_objects(region, [64])
    t = region.begin()
    b0 = barriers(med)
    t.write(a, 0, b"x" * 8)
    t.write(a, 8, b"x" * 8)
    assert barriers(med) - b0 == 4
    t.commit()
    # the variant is a property of the region and survives reopen
    r2 = region_open(PersistentMedium.from_snapshot(med.crash()), "undo")
    assert r2.naive_undo


@pytest.mark.parametrize("n", [0, 1, 5, 20])
def test_commit_barrier_law(n):
    med, region = make_region("undo", Pdom.PDOM0)
    (a,) = setup_objects(region, [8 * max(n, 1)])
    t = region.begin()
    b0 = barriers(med)
    for i in range(n):
        t.write_u64(a, 8 * i, i + 1)
    t.commit()
    assert barriers(med) - b0 == n + 2


def test_allocating_commit_adds_two():
    med, region = make_region("undo")
    (a,) = setup_objects(region, [40])
    t = region.begin()
    b0 = barriers(med)
    t.write(a, 0, b"q")
    t.alloc(100)
    t.commit()
    assert barriers(med) - b0 == 1 + 2 + 2


def test_pdom2_issues_no_barriers():
    med, region = make_region("undo", Pdom.PDOM2)
    (a,) = setup_objects(region, [40])
    med.reset_counters()
    t = region.begin()
    t.write(a, 0, b"abc")
    t.commit()
    rep = med.cost_report()
    assert rep.barriers == 0 and rep.writebacks == 0


def test_abort_restores_all_old_values():
    med, region = make_region("undo")
    refs = setup_objects(region, [16, 16, 16], fill=0x30)
    t = region.begin()
    for r in refs:
        t.write(r, 0, b"\xff" * 16)
    t.abort()
    assert [med.load(r + 32, 16) for r in refs] == [bytes([0x30 + i]) * 16 for i in range(3)]


def test_dedupe_off_logs_every_write():
    med = PersistentMedium(1 << 19)
    region = region_create(med, "undo", RegionConfig(n_desc=2, chunk_size=1024, n_chunks=16, unit_size=4096,
                                                     undo_dedupe=False))
    (a,) = setup_objects(region, [16])
    t = region.begin()
    for _ in range(4):
        t.write(a, 0, b"z" * 8)
    assert t.stats.records == 4
    t.abort()


def test_infer_tail_examples():
    med, region = make_region("undo")
    (a,) = setup_objects(region, [256])
    t = region.begin()
    d = t.desc
    t.write(a, 0, b"1" * 8)
    med.persist_barrier()  # persists the trailing tail update
    t.write(a, 64, b"2" * 100)
    img = med.persistent_image
    di = _stored_desc(med, d)
    assert di.log_tail == 1
    m = PersistentMedium.from_snapshot(img)
    assert infer_tail(m, region.pool, di.log_head, di.version, di.log_tail) == 2
    # stored tail == actual end
    med.persist_barrier()
    di = _stored_desc(med, d)
    m = PersistentMedium.from_snapshot(med.persistent_image)
    assert infer_tail(m, region.pool, di.log_head, di.version, di.log_tail) == 2
    t.abort()


def test_torn_record_rejected():
    med, region = make_region("undo")
    (a,) = setup_objects(region, [256], fill=0x5A)
    t = region.begin()
    med.persist_barrier()
    captured = []
    med.observer = lambda op: captured.append(med.crash_state())
    t.write(a, 0, bytes(range(200)))  # a record spanning several lines
    med.observer = None
    # the state just before the append's barrier: every record line pending
    st = next(s for s in reversed(captured) if s.n_pending >= 3)
    di_addr = t.desc.addr
    want_lo = t.desc.log.head + 16
    want = med.volatile_image[want_lo:want_lo + 48 + 200 + 8]
    want_hi = want_lo + len(want)
    torn = 0
    for mask in range(1 << st.n_pending):
        img = st.image(mask)
        di = DescImage.parse(0, di_addr, img[di_addr:di_addr + 64])
        m = PersistentMedium.from_snapshot(img)
        recs = log_records(m, region.pool, di.log_head, di.version, di.log_tail)
        full = img[want_lo:want_hi] == want
        assert len(recs) == (1 if full else 0)
        rec = read_record(m, di.log_head + 16, 1024)
        if not full and rec is not None and not rec.valid_sum:
            torn += 1
    assert torn > 0
    t.abort()


def test_commit_record_and_recovery_roll_forward_allocs():
    med, region = make_region("undo")
    (a,) = setup_objects(region, [16])
    t = region.begin()
    t.write(a, 0, b"new")
    b = t.alloc(64)
    at_commit = []
    region.on_commit_point = lambda txn: at_commit.append(med.crash_state())
    t.commit()
    region.on_commit_point = None
    img = at_commit[0].image(0)  # crash right after the commit record persisted
    m2 = PersistentMedium.from_snapshot(img)
    r2 = region_open(m2, "undo")
    assert b in r2.alloc.allocated_refs()
    assert m2.load(a + 32, 3) == b"new"


def test_crash_before_commit_rolls_back():
    med, region = make_region("undo")
    (a,) = setup_objects(region, [16], fill=9)
    t = region.begin()
    t.write(a, 0, b"new")
    t.alloc(64)
    m2 = PersistentMedium.from_snapshot(med.crash(CrashPolicy.KEEP_PENDING))
    r2 = region_open(m2, "undo")
    assert m2.load(a + 32, 16) == bytes([9]) * 16
    assert r2.alloc.allocated_refs() == {region.root_cell, a}


def test_recovery_idempotent():
    med, region = make_region("undo")
    (a,) = setup_objects(region, [16])
    t = region.begin()
    t.write(a, 0, b"new")
    m1 = PersistentMedium.from_snapshot(med.crash(CrashPolicy.KEEP_PENDING))
    region_open(m1, "undo")
    m2 = PersistentMedium.from_snapshot(m1.persistent_image)
    region_open(m2, "undo")
    assert m1.persistent_image == m2.persistent_image


def test_record_kinds_roundtrip():
    med, region = make_region("undo")
    body, csum = encode_record(7, UNDO_DATA, 0x2000, b"hello")
    med.store(0x2000, body + csum)
    rec = read_record(med, 0x2000, 512)
    assert rec.valid_sum and rec.kind == UNDO_DATA and rec.old == b"hello" and rec.version == 7
    body, csum = encode_record(7, UNDO_COMMIT, 0, b"")
    assert len(body + csum) == 40


def test_small_config_fits_log():
    assert SMALL.chunk_size >= 256

import pytest

from pmtx import BusyError, CrashPolicy, Mode, Pdom, PersistentMedium, UsageError, region_open
from pmtx.layout import OBJ_HDR, W_BACKUP, W_NEW, W_OLD

from conftest import barriers, make_region, setup_objects


def wrapper(med, ref):
    return med.load_u64(ref + W_OLD), med.load_u64(ref + W_NEW), med.load_u64(ref + W_BACKUP)


def test_read_open_returns_old_payload():
    med, region = make_region("cow")
    (a,) = setup_objects(region, [16])
    old, new, backup = wrapper(med, a)
    assert new == 0 and backup == 0
    t = region.begin()
    assert t.open(a, Mode.READ) == old
    t.commit()


def test_write_open_then_read_open_gives_new_payload():
    med, region = make_region("cow")
    (a,) = setup_objects(region, [16], fill=1)
    t = region.begin()
    new = t.open(a, Mode.WRITE)
    old, stored_new, backup = wrapper(med, a)
    assert stored_new == new != old and backup == old
    assert t.open(a, Mode.READ) == new
    assert med.load(new + OBJ_HDR, 16) == bytes([1]) * 16
    t.write(a, 0, b"changed")
    assert t.read(a, 0, 7) == b"changed"
    assert med.load(old + OBJ_HDR, 7) == bytes([1]) * 7
    t.commit()
    assert wrapper(med, a) == (new, 0, 0)


def test_custom_copy_ctor_called_once():
    med, region = make_region("cow")
    (a,) = setup_objects(region, [16], fill=5)
    calls = []

    def ctor(reg, src, dst, size):
        calls.append((src, dst, size))
        reg.medium.store(dst + OBJ_HDR, b"C" * size)

    t = region.begin()
    t.open(a, Mode.WRITE, copy_ctor=ctor)
    t.open(a, Mode.WRITE, copy_ctor=ctor)
    assert len(calls) == 1 and calls[0][2] == 16
    assert t.read(a, 0, 4) == b"CCCC"
    t.abort()


@pytest.mark.parametrize("w", [1, 3, 6])
def test_commit_four_barriers_any_write_set(w):
    med, region = make_region("cow", Pdom.PDOM0)
    refs = setup_objects(region, [24] * w)
    t = region.begin()
    for r in refs:
        t.open(r, Mode.WRITE)
        t.write(r, 0, b"n")
    b0 = barriers(med)
    t.commit()
    assert barriers(med) - b0 == 4


def test_abort_two_barriers_and_old_intact():
    med, region = make_region("cow")
    refs = setup_objects(region, [24] * 3, fill=0x20)
    t = region.begin()
    for r in refs:
        t.open(r, Mode.WRITE)
        t.write(r, 0, b"\xff" * 24)
    b0 = barriers(med)
    t.abort()
    assert barriers(med) - b0 == 2
    t = region.begin()
    assert [t.read(r, 0, 24) for r in refs] == [bytes([0x20 + i]) * 24 for i in range(3)]
    t.commit()
    for r in refs:
        _, new, backup = wrapper(med, r)
        assert new == backup == 0


def test_read_only_commit_and_abort_elided():
    med, region = make_region("cow")
    (a,) = setup_objects(region, [24])
    for finish in ("commit", "abort"):
        t = region.begin()
        t.open(a, Mode.READ)
        t.read(a, 0, 4)
        b0 = barriers(med)
        getattr(t, finish)()
        assert barriers(med) == b0


def test_write_requires_open():
    _, region = make_region("cow")
    (a,) = setup_objects(region, [24])
    t = region.begin()
    with pytest.raises(UsageError):
        t.write(a, 0, b"x")
    t.abort()


def test_second_writer_is_busy():
    _, region = make_region("cow")
    (a,) = setup_objects(region, [24])
    t1 = region.begin()
    t2 = region.begin()
    t1.open(a, Mode.WRITE)
    with pytest.raises(BusyError):
        t2.open(a, Mode.WRITE)
    t1.commit()
    t2.open(a, Mode.WRITE)
    t2.abort()


def test_crash_between_install_and_free_does_not_leak():
    med, region = make_region("cow")
    refs = setup_objects(region, [24] * 3)
    olds = [wrapper(med, r)[0] for r in refs]
    t = region.begin()
    news = [t.open(r, Mode.WRITE) for r in refs]
    seen = []
    region.on_commit_point = lambda txn: seen.append(med.crash_state())
    t.commit()
    region.on_commit_point = None
    st = seen[0]
    for mask in range(1 << min(st.n_pending, 10)):
        m2 = PersistentMedium.from_snapshot(st.image(mask))
        r2 = region_open(m2, "cow")
        allocated = r2.alloc.allocated_refs()
        assert all(wrapper(m2, r) == (n, 0, 0) for r, n in zip(refs, news))
        assert not set(olds) & allocated
        assert set(news) <= allocated


def test_crash_before_commit_keeps_old_and_frees_clones():
    med, region = make_region("cow")
    refs = setup_objects(region, [24] * 2, fill=7)
    before = {r: wrapper(med, r)[0] for r in refs}
    t = region.begin()
    news = [t.open(r, Mode.WRITE) for r in refs]
    m2 = PersistentMedium.from_snapshot(med.crash(CrashPolicy.KEEP_PENDING))
    r2 = region_open(m2, "cow")
    for r in refs:
        assert wrapper(m2, r) == (before[r], 0, 0)
        assert m2.load_u64(r + 6) & 0xFFFF == 0
    assert not set(news) & r2.alloc.allocated_refs()


def test_recovery_idempotent_mid_cleanup():
    med, region = make_region("cow")
    refs = setup_objects(region, [24] * 2)
    t = region.begin()
    for r in refs:
        t.open(r, Mode.WRITE)
    seen = []
    region.on_commit_point = lambda txn: seen.append(med.crash_state())
    t.commit()
    m1 = PersistentMedium.from_snapshot(seen[0].image(0))
    region_open(m1, "cow")
    m2 = PersistentMedium.from_snapshot(m1.persistent_image)
    region_open(m2, "cow")
    assert m1.persistent_image == m2.persistent_image


def test_free_of_opened_object():
    med, region = make_region("cow")
    a, b = setup_objects(region, [24, 24])
    t = region.begin()
    t.open(a, Mode.WRITE)
    t.free(a)
    t.commit()
    assert region.alloc.allocated_refs() == region.runtime.blocks_of(region.root_cell) | region.runtime.blocks_of(b)

import pytest

from pmtx import FormatError, Mode, PersistentMedium
from pmtx.dump import DumpSelector, Section, dump, dump_file
from pmtx.layout import UNDO_HEAD

from conftest import make_region, setup_objects


def test_header_of_fresh_region():
    med, _ = make_region("undo")
    out = dump(med, "header")
    assert "magic PMTXRGN version 1" in out
    assert "runtime undo" in out


def test_bitmaps_after_one_alloc():
    med, region = make_region("redo")
    before = dump(med, "bitmaps").count("1")
    t = region.begin()
    t.alloc(16)
    t.commit()
    rows = [ln for ln in dump(med, Section.BITMAPS.value).splitlines() if ln.startswith("   ")]
    ones = sum(r.split()[1].count("1") for r in rows)
    root_only = sum(r.split()[1].count("1") for r in dump(make_region("redo")[0], "bitmaps").splitlines()
                    if r.startswith("   "))
    assert ones == root_only + 1
    assert before  # header lines mention counts too


def _undo_region_with_record():
    med, region = make_region("undo")
    (a,) = setup_objects(region, [64], fill=0x42)
    t = region.begin()
    t.write(a, 0, b"x" * 40)
    med.persist_barrier()
    return med, t


def test_undo_log_valid_record():
    med, t = _undo_region_with_record()
    out = dump(med, f"undo-log {t.desc.id}")
    assert " DATA " in out and "VALID" in out and "INVALID" not in out


def test_undo_log_torn_record_flagged_invalid():
    med, t = _undo_region_with_record()
    img = bytearray(med.persistent_image)
    rec = t.desc.log.head + 16
    img[rec + UNDO_HEAD.size + 3] ^= 0xFF  # corrupt one payload byte; checksum no longer matches
    out = dump(bytes(img), "undo-log 0")
    lines = [ln for ln in out.splitlines() if ln.strip().startswith("#")]
    assert lines[-1].endswith("INVALID") or "INVALID " in lines[-1]


def test_redo_log_and_objects():
    med, region = make_region("redo")
    (a,) = setup_objects(region, [16])
    t = region.begin()
    t.write(a, 2, b"hi")
    med.persist_barrier()
    out = dump(med, "redo-log:0")
    assert f"object {a:#x} off 2 len 2" in out and "data 6869 beyond-count" in out
    t.commit()
    assert "data 6869\n" in dump(med, "redo-log 0")
    objs = dump(med, "objects")
    assert f"{a:#x} PLAIN size 16" in objs and "ROOT" in objs


def test_cow_objects_show_wrappers():
    med, region = make_region("cow")
    (a,) = setup_objects(region, [16])
    t = region.begin()
    t.open(a, Mode.WRITE)
    out = dump(med.volatile_image, "objects")
    assert f"{a:#x} WRAPPER size 16 writer 1" in out
    assert "descriptors" in dump(med, "descriptors") or "desc 0" in dump(med, "descriptors")


def test_output_is_pure_function_of_image():
    med, region = make_region("undo")
    setup_objects(region, [8, 300])
    img = med.persistent_image
    assert dump(img, "all") == dump(PersistentMedium.from_snapshot(img), "all")
    assert med.persistent_image == img


def test_unreadable_images():
    with pytest.raises(FormatError):
        dump(b"\0" * 10)
    with pytest.raises(FormatError):
        dump(bytes(1 << 16))
    with pytest.raises(FormatError):
        dump_file("/nonexistent/image")


def test_wrong_log_section_for_runtime():
    med, _ = make_region("undo")
    with pytest.raises(ValueError):
        dump(med, "redo-log 0")


@pytest.mark.parametrize("text,want", [
    ("objects", DumpSelector(Section.OBJECTS)),
    ("UNDO_LOG 3", DumpSelector(Section.UNDO_LOG, 3)),
    ("redo-log=1", DumpSelector(Section.REDO_LOG, 1)),
])
def test_selector_parse(text, want):
    assert DumpSelector.parse(text) == want


def test_selector_errors():
    for bad in ("", "nope", "header 2"):
        with pytest.raises(ValueError):
            DumpSelector.parse(bad)

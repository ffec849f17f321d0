import pytest

from pmtx import Pdom, PdomConfig, PersistentMedium, RegionConfig, region_create

SMALL = RegionConfig(n_desc=4, chunk_size=1024, n_chunks=32, unit_size=4096)


def make_region(kind, pdom=Pdom.PDOM1, size=1 << 19, config=SMALL, **kw):
    med = PersistentMedium(size, PdomConfig(pdom, **kw))
    return med, region_create(med, kind, config)


def setup_objects(region, sizes, fill=None):
    """Allocate and commit objects, optionally filling each with a byte pattern."""
    t = region.begin()
    refs = [t.alloc(n) for n in sizes]
    if fill is not None:
        for i, (r, n) in enumerate(zip(refs, sizes)):
            t.memset(r, 0, (fill + i) & 0xFF, n)
    t.commit()
    return refs


def barriers(med):
    return med.cost_report().barriers


@pytest.fixture(params=["undo", "redo", "cow"])
def runtime(request):
    return request.param


# one line per acceptance criterion, repeated at the end of the run
ACCEPTANCE: list[str] = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE, key=lambda s: int(s.split()[2].rstrip(":"))):
            terminalreporter.write_line(line)

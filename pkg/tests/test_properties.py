"""Property-based checks against simple shadow models."""

from hypothesis import HealthCheck, given, settings, strategies as st

from pmtx import Mode, Pdom, PersistentMedium, region_open
from pmtx.harness import crash_sweep, model_states, parse_script

from conftest import make_region, setup_objects

SIZES = [24, 40, 64, 130]


@st.composite
def txn_ops(draw, n_objs=len(SIZES)):
    ops = []
    for _ in range(draw(st.integers(1, 12))):
        i = draw(st.integers(0, n_objs - 1))
        size = SIZES[i]
        off = draw(st.integers(0, size - 1))
        n = draw(st.integers(1, size - off))
        if draw(st.booleans()):
            ops.append(("w", i, off, draw(st.binary(min_size=n, max_size=n))))
        else:
            ops.append(("r", i, off, n))
    return ops, draw(st.booleans())


@settings(max_examples=60, deadline=None, suppress_health_check=[HealthCheck.too_slow])
@given(st.sampled_from(["undo", "redo", "cow"]), st.lists(txn_ops(), min_size=1, max_size=5))
def test_reads_match_shadow_map(runtime, txns):
    med, region = make_region(runtime)
    refs = setup_objects(region, SIZES)
    committed = [bytearray(n) for n in SIZES]
    for ops, commit in txns:
        shadow = [bytearray(b) for b in committed]
        t = region.begin()
        for op in ops:
            if op[0] == "w":
                _, i, off, data = op
                if runtime == "cow":
                    t.open(refs[i], Mode.WRITE)
                t.write(refs[i], off, data)
                shadow[i][off:off + len(data)] = data
            else:
                _, i, off, n = op
                assert t.read(refs[i], off, n) == bytes(shadow[i][off:off + n])
        if commit:
            t.commit()
            committed = shadow
        else:
            t.abort()
    # and the durable image agrees after a clean crash
    r2 = region_open(PersistentMedium.from_snapshot(med.crash()), runtime)
    for i, r in enumerate(refs):
        assert r2.medium.load(r2.unwrap(r), SIZES[i]) == bytes(committed[i])


@st.composite
def scripts(draw):
    lines = ["BEGIN", "ALLOC 24", "ALLOC 40", "COMMIT"]
    live = [0, 1]
    nxt = 2
    for _ in range(draw(st.integers(1, 2))):
        lines.append("BEGIN")
        before = list(live)
        for _ in range(draw(st.integers(1, 3))):
            kind = draw(st.sampled_from(["write", "write", "memset", "alloc", "free"]))
            if kind == "alloc" or not live:
                lines.append(f"ALLOC {draw(st.sampled_from([8, 24, 100]))}")
                live.append(nxt)
                nxt += 1
                continue
            h = draw(st.sampled_from(live))
            if kind == "free" and len(live) > 1:
                lines.append(f"FREE #{h}")
                live.remove(h)
            elif kind == "memset":
                lines.append(f"MEMSET #{h} 0 {draw(st.integers(1, 255))} 8")
            else:
                data = draw(st.binary(min_size=1, max_size=8)).hex()
                lines.append(f"WRITE #{h} {draw(st.integers(0, 7))} {data}")
        if draw(st.booleans()):
            lines.append("COMMIT")
        else:
            lines.append("ABORT")
            live = before
    return "\n".join(lines)


@settings(max_examples=12, deadline=None, suppress_health_check=[HealthCheck.too_slow])
@given(scripts(), st.sampled_from(["undo", "redo", "cow"]))
def test_random_scripts_are_failure_atomic(text, runtime):
    s = parse_script(text, "random")
    model_states(s)
    rep = crash_sweep(s, runtime, Pdom.PDOM1, cap=10)
    assert rep.ok, "\n".join(map(str, rep.violations[:3])) + "\n" + text

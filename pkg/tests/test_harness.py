import pytest

from pmtx import Pdom, PdomConfig
from pmtx.harness import (ScriptError, builtin_scripts, crash_sweep, descriptor_states, idempotence_check,
                          model_states, parse_script, record_points, smoke_threads)

TWO_WRITES = """
BEGIN
ALLOC 32
COMMIT
BEGIN
WRITE #0 0 01020304
WRITE #0 16 aabb
COMMIT
"""


def test_parse_and_model():
    s = parse_script(TWO_WRITES + "# trailing comment\n", "two")
    assert s.handles == 1 and len(s.txns) == 2
    states = model_states(s)
    assert states[0] == (None,)
    assert states[1] == (bytes(32),)
    assert states[2][0][:4] == b"\x01\x02\x03\x04" and states[2][0][16:18] == b"\xaa\xbb"


@pytest.mark.parametrize("bad", [
    "WRITE #0 0 00",                      # outside a transaction
    "BEGIN\nALLOC 8\n",                   # unterminated
    "BEGIN\nWRITE 0 0 00\nCOMMIT",        # handle without '#'
    "BEGIN\nWRITE #0 0 zz\nCOMMIT",       # bad hex
    "BEGIN\nREAD #0 0 1 zz\nCOMMIT",
    "BEGIN\nFROB\nCOMMIT",
    "BEGIN\nBEGIN\nCOMMIT",
])
def test_parse_errors(bad):
    with pytest.raises(ScriptError):
        parse_script(bad)


def test_model_rejects_use_of_dead_handle():
    s = parse_script("BEGIN\nALLOC 8\nFREE #0\nWRITE #0 0 00\nCOMMIT")
    with pytest.raises(ScriptError):
        model_states(s)


def test_two_write_txn_every_point_pre_or_post(runtime):
    rep = crash_sweep(parse_script(TWO_WRITES, "two"), runtime, Pdom.PDOM1)
    assert rep.ok, [str(v) for v in rep.violations]
    assert rep.crash_points == rep.medium_ops + 1
    assert rep.snapshots >= rep.crash_points


def test_point_count_and_subset_self_audit():
    s = parse_script(TWO_WRITES, "two")
    points, states, n_ops, _ = record_points(s, "undo", PdomConfig(Pdom.PDOM1))
    assert len(points) == n_ops + 1
    rep = crash_sweep(s, "undo", Pdom.PDOM1)
    assert rep.snapshots == sum(min(1 << p.state.n_pending, 256 if p.state.n_pending > 16 else 1 << 16)
                                for p in points)


def test_commit_point_upgrades_allowed_states():
    # redo: the state captured at the COMMITTED barrier may only recover to the post-state
    s = parse_script(TWO_WRITES, "two")
    points, _, _, _ = record_points(s, "redo", PdomConfig(Pdom.PDOM1))
    post_only = [i for i, p in enumerate(points) if p.allowed == frozenset({2})]
    both = [i for i, p in enumerate(points) if p.allowed == frozenset({1, 2})]
    assert both and post_only
    first_post = post_only[0]
    assert max(both) < first_post
    img = points[first_post].state.image(0)
    assert 3 in descriptor_states(img)  # COMMITTED is durable right there


def test_empty_workload():
    rep = crash_sweep(parse_script("", "empty"), "undo", Pdom.PDOM1)
    assert rep.ok and rep.crash_points == 1 and rep.medium_ops == 0


def test_sweep_detects_a_broken_runtime(monkeypatch):
    # sanity check of the oracle: skipping undo logging must be caught
    from pmtx.undo import UndoRuntime

    def no_log(self, txn, ref, off, data):
        target = ref + 32 + off
        self.medium.store(target, data)
        txn.ranges.append((target, len(data)))

    monkeypatch.setattr(UndoRuntime, "write", no_log)
    rep = crash_sweep(parse_script(TWO_WRITES, "two"), "undo", Pdom.PDOM1)
    assert not rep.ok and rep.violations


def test_builtin_suite_shape():
    scripts = builtin_scripts()
    assert len(scripts) >= 10
    assert len({s.name for s in scripts}) == len(scripts)
    for s in scripts:
        model_states(s)


def test_idempotence_check_small():
    s = parse_script(TWO_WRITES, "two")
    for rt in ("undo", "redo", "cow"):
        assert idempotence_check(s, rt, Pdom.PDOM1, samples=20, seed=1) == []


def test_thread_smoke(runtime):
    assert smoke_threads(runtime, threads=3, txns=15, seed=2) == []

import csv
import io
from contextlib import redirect_stdout

import pytest

from pmtx import Mode
from pmtx.cli import bench_main, crash_main, dump_main

from conftest import make_region, setup_objects


def _run(fn, argv):
    buf = io.StringIO()
    with redirect_stdout(buf):
        code = fn(argv)
    return code, buf.getvalue()


def test_bench_csv_stdout():
    code, out = _run(bench_main, ["--workload", "array", "--runtime", "redo", "--pdom", "0", "--slots", "300",
                                  "--txns", "5", "--write-pct", "0,50"])
    assert code == 0
    rows = list(csv.DictReader(io.StringIO(out)))
    assert [r["write_pct"] for r in rows] == ["0", "50"]
    assert rows[1]["barriers_per_txn"] == "4.000"


def test_bench_alloc_to_file(tmp_path):
    path = tmp_path / "alloc.csv"
    code, _ = _run(bench_main, ["--workload", "alloc", "--txns", "5", "--allocs-per-txn", "4", "--csv", str(path)])
    rows = list(csv.DictReader(open(path)))
    assert code == 0 and {r["alloc_mode"] for r in rows} == {"lazy", "eager"}


def test_bench_rejects_bad_args():
    with pytest.raises(SystemExit):
        _run(bench_main, ["--slot-size", "99", "--slots", "100", "--txns", "1"])


def test_crash_cli(tmp_path):
    script = tmp_path / "w.pmtx"
    script.write_text("BEGIN\nALLOC 16\nWRITE #0 0 0102\nCOMMIT\n")
    code, out = _run(crash_main, ["--runtime", "cow", "--pdom", "1", "--script", str(script), "--seed", "3"])
    assert code == 0 and out.startswith("PASS w runtime=cow pdom=1")


def test_crash_cli_reports_violation(tmp_path, monkeypatch):
    from pmtx.redo import RedoRuntime

    def skip_apply(self, txn):  # a commit that never applies its log
        from pmtx.layout import TxnState
        self.set_state(txn.desc, TxnState.COMMITTED, persist=True)
        self.commit_point(txn)
        self.set_state(txn.desc, TxnState.IDLE, persist=True)
        self._clear_bits(txn)
        self.after_commit(txn)

    monkeypatch.setattr(RedoRuntime, "commit", skip_apply)
    script = tmp_path / "w.pmtx"
    script.write_text("BEGIN\nALLOC 16\nCOMMIT\nBEGIN\nWRITE #0 0 0102\nCOMMIT\n")
    code, out = _run(crash_main, ["--runtime", "redo", "--script", str(script)])
    assert code == 1 and out.startswith("FAIL")


def test_crash_cli_bad_script(tmp_path):
    script = tmp_path / "bad.pmtx"
    script.write_text("COMMIT\n")
    assert crash_main(["--runtime", "undo", "--script", str(script)]) == 2


def test_dump_cli(tmp_path, capsys):
    med, region = make_region("cow")
    (a,) = setup_objects(region, [16])
    t = region.begin()
    t.open(a, Mode.WRITE)
    med.persist_barrier()
    path = tmp_path / "img.bin"
    med.save(path)
    assert dump_main([str(path), "--section", "objects"]) == 0
    assert "WRAPPER" in capsys.readouterr().out
    assert dump_main([str(path), "--section", "header"]) == 0
    assert "runtime cow" in capsys.readouterr().out
    bad = tmp_path / "bad.bin"
    bad.write_bytes(b"junk")
    assert dump_main([str(bad)]) == 2

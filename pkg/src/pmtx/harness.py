"""Crash-point injection and failure-atomicity verification.

A sweep runs a scripted workload once with an observer on the medium.  The
crash state (persistent image plus pending lines) is captured before the
first mutating medium operation and after every one of them.  Each captured
state is expanded into crash images (all 2^k pending subsets up to the cap,
seeded samples beyond), every image is recovered with region_open, and the
result is compared against the states a pure dict-based model of the script
passes through:

* before a transaction calls commit, only its pre-state is acceptable;
* between the commit call and the commit point either state is;
* from the commit point on, only the post-state is.

Besides the data, every recovered image is audited for leaks (allocated
blocks must be exactly the blocks reachable from the root) and for
descriptor sanity.
"""

from __future__ import annotations

import hashlib
import random
import threading
import time
from dataclasses import dataclass, field
from importlib import resources
from pathlib import Path

from .errors import PmError
from .layout import DESC, DESC_SIZE, DESC_TABLE_OFF, GEOMETRY, GEOMETRY_OFF, RuntimeKind, TxnState
from .region import RegionConfig, region_create, region_open
from .simpm import ENUMERATE_CAP, LINE, CrashState, Pdom, PdomConfig, PersistentMedium
from .txn import Mode

HARNESS_CONFIG = RegionConfig(n_desc=2, chunk_size=256, n_chunks=24, unit_size=1024)
HARNESS_MEDIUM = 48 * 1024
RANDOM_SUBSETS = 256


class ScriptError(ValueError):
    pass


@dataclass(frozen=True)
class Op:
    name: str
    args: tuple
    line: int = 0


@dataclass
class Script:
    name: str
    txns: list[list[Op]]
    handles: int

    @property
    def n_ops(self) -> int:
        return sum(len(t) for t in self.txns)


def _handle(tok: str, line: int) -> int:
    if not tok.startswith("#") or not tok[1:].isdigit():
        raise ScriptError(f"line {line}: expected a handle like #0, got {tok!r}")
    return int(tok[1:])


def _int(tok: str, line: int) -> int:
    try:
        return int(tok, 0)
    except ValueError:
        raise ScriptError(f"line {line}: expected an integer, got {tok!r}") from None


def parse_script(text: str, name: str = "<script>") -> Script:
    """Parse the line-oriented workload DSL.

    BEGIN / COMMIT / ABORT bracket a transaction.  Inside one:
    ALLOC size, WRITE #h off hex, MEMSET #h off byte len,
    MEMCPY #dst off #src off len, READ #h off len [hex], FREE #h.
    ALLOC creates handles #0, #1, ... in order of appearance.
    """
    txns: list[list[Op]] = []
    cur: list[Op] | None = None
    handles = 0
    for no, raw in enumerate(text.splitlines(), 1):
        toks = []
        for tok in raw.split():
            if tok.startswith("#") and not tok[1:].isdigit():
                break  # comment; "#<digits>" is a handle
            toks.append(tok)
        if not toks:
            continue
        word, args = toks[0].upper(), toks[1:]
        if word == "BEGIN":
            if cur is not None:
                raise ScriptError(f"line {no}: BEGIN inside a transaction")
            cur = []
            continue
        if cur is None:
            raise ScriptError(f"line {no}: {word} outside a transaction")
        if word in ("COMMIT", "ABORT"):
            cur.append(Op(word, (), no))
            txns.append(cur)
            cur = None
            continue
        if word == "ALLOC":
            if len(args) != 1:
                raise ScriptError(f"line {no}: ALLOC size")
            op = Op(word, (_int(args[0], no), handles), no)
            handles += 1
        elif word == "WRITE":
            if len(args) != 3:
                raise ScriptError(f"line {no}: WRITE #h off hex")
            try:
                data = bytes.fromhex(args[2])
            except ValueError:
                raise ScriptError(f"line {no}: bad hex {args[2]!r}") from None
            op = Op(word, (_handle(args[0], no), _int(args[1], no), data), no)
        elif word == "MEMSET":
            if len(args) != 4:
                raise ScriptError(f"line {no}: MEMSET #h off byte len")
            op = Op(word, (_handle(args[0], no), _int(args[1], no), _int(args[2], no), _int(args[3], no)), no)
        elif word == "MEMCPY":
            if len(args) != 5:
                raise ScriptError(f"line {no}: MEMCPY #dst off #src off len")
            op = Op(word, (_handle(args[0], no), _int(args[1], no), _handle(args[2], no),
                           _int(args[3], no), _int(args[4], no)), no)
        elif word == "READ":
            if len(args) not in (3, 4):
                raise ScriptError(f"line {no}: READ #h off len [hex]")
            try:
                want = bytes.fromhex(args[3]) if len(args) == 4 else None
            except ValueError:
                raise ScriptError(f"line {no}: bad hex {args[3]!r}") from None
            op = Op(word, (_handle(args[0], no), _int(args[1], no), _int(args[2], no), want), no)
        elif word == "FREE":
            if len(args) != 1:
                raise ScriptError(f"line {no}: FREE #h")
            op = Op(word, (_handle(args[0], no),), no)
        else:
            raise ScriptError(f"line {no}: unknown command {word}")
        cur.append(op)
    if cur is not None:
        raise ScriptError(f"{name}: transaction not terminated by COMMIT or ABORT")
    return Script(name, txns, handles)


def load_script(path: str | Path) -> Script:
    p = Path(path)
    return parse_script(p.read_text(), p.stem)


def builtin_scripts() -> list[Script]:
    """The workload suite shipped with the package."""
    root = resources.files("pmtx") / "workloads"
    out = []
    for entry in sorted(root.iterdir(), key=lambda e: e.name):
        if entry.name.endswith(".pmtx"):
            out.append(parse_script(entry.read_text(), entry.name[:-5]))
    return out


# -- model ----------------------------------------------------------------------

State = tuple  # per handle: payload bytes, or None when the handle is not live


def model_states(script: Script) -> list[State]:
    """Logical state after 0, 1, ... transactions (aborted ones change nothing)."""
    live: dict[int, bytearray] = {}
    states = [_freeze(live, script.handles)]
    for t in script.txns:
        work = {k: bytearray(v) for k, v in live.items()}
        for op in t:
            _model_op(work, op)
        if t[-1].name == "COMMIT":
            live = work
        states.append(_freeze(live, script.handles))
    return states


def _need(work, h, op):
    if h not in work:
        raise ScriptError(f"line {op.line}: handle #{h} is not live")
    return work[h]


def _span(buf, off, n, op):
    if off < 0 or n < 0 or off + n > len(buf):
        raise ScriptError(f"line {op.line}: range [{off}, {off + n}) outside a {len(buf)}-byte object")


def _model_op(work: dict[int, bytearray], op: Op):
    a = op.args
    if op.name == "ALLOC":
        work[a[1]] = bytearray(a[0])
    elif op.name == "WRITE":
        buf = _need(work, a[0], op)
        _span(buf, a[1], len(a[2]), op)
        buf[a[1]:a[1] + len(a[2])] = a[2]
    elif op.name == "MEMSET":
        buf = _need(work, a[0], op)
        _span(buf, a[1], a[3], op)
        buf[a[1]:a[1] + a[3]] = bytes([a[2] & 0xFF]) * a[3]
    elif op.name == "MEMCPY":
        dst, src = _need(work, a[0], op), _need(work, a[2], op)
        _span(dst, a[1], a[4], op)
        _span(src, a[3], a[4], op)
        dst[a[1]:a[1] + a[4]] = bytes(src[a[3]:a[3] + a[4]])
    elif op.name == "READ":
        buf = _need(work, a[0], op)
        _span(buf, a[1], a[2], op)
        if a[3] is not None and bytes(buf[a[1]:a[1] + a[2]]) != a[3]:
            raise ScriptError(f"line {op.line}: READ expectation contradicts the script itself")
    elif op.name == "FREE":
        _need(work, a[0], op)
        del work[a[0]]


def _freeze(live, n) -> State:
    return tuple(bytes(live[k]) if k in live else None for k in range(n))


# -- live execution -------------------------------------------------------------------

class LiveRun:
    """Executes a script against a real region, mapping handles to references."""

    def __init__(self, region, script: Script):
        self.region = region
        self.script = script
        self.cow = region.kind is RuntimeKind.COW
        self.refs: dict[int, int] = {}
        t = region.begin()
        self.directory = t.alloc(8 * max(1, script.handles))
        t.root_set(self.directory)
        t.commit()

    def _writable(self, txn, ref):
        if self.cow:
            txn.open(ref, Mode.WRITE)

    def run_txn(self, ops: list[Op], on_commit_call=None):
        txn = self.region.begin()
        refs = dict(self.refs)
        for op in ops[:-1]:
            a = op.args
            if op.name == "ALLOC":
                ref = txn.alloc(a[0])
                refs[a[1]] = ref
                self._writable(txn, self.directory)
                txn.write_u64(self.directory, 8 * a[1], ref)
            elif op.name == "WRITE":
                self._writable(txn, refs[a[0]])
                txn.write(refs[a[0]], a[1], a[2])
            elif op.name == "MEMSET":
                self._writable(txn, refs[a[0]])
                txn.memset(refs[a[0]], a[1], a[2], a[3])
            elif op.name == "MEMCPY":
                self._writable(txn, refs[a[0]])
                txn.memcpy(refs[a[0]], a[1], refs[a[2]], a[3], a[4])
            elif op.name == "READ":
                got = txn.read(refs[a[0]], a[1], a[2])
                if a[3] is not None and got != a[3]:
                    raise AssertionError(f"line {op.line}: READ returned {got.hex()}, expected {a[3].hex()}")
            elif op.name == "FREE":
                txn.free(refs.pop(a[0]))
                self._writable(txn, self.directory)
                txn.write_u64(self.directory, 8 * a[0], 0)
        if ops[-1].name == "COMMIT":
            if on_commit_call:
                on_commit_call()
            txn.commit()
            self.refs = refs
        else:
            txn.abort()


def logical_state(region, n_handles: int) -> State:
    """Read the committed state through the root without a transaction."""
    med = region.medium
    directory = region.root_get()
    if not directory:
        raise PmError("root is unset")
    base = region.unwrap(directory)
    out = []
    for k in range(n_handles):
        ref = med.load_u64(base + 8 * k)
        if not ref:
            out.append(None)
            continue
        size = region.obj_size(ref)
        out.append(med.load(region.unwrap(ref), size))
    return tuple(out)


def reachable(region, n_handles: int) -> set[int]:
    rt = region.runtime
    blocks = set(rt.blocks_of(region.root_cell))
    directory = region.root_get()
    if directory:
        blocks |= rt.blocks_of(directory)
        base = region.unwrap(directory)
        for k in range(n_handles):
            ref = region.medium.load_u64(base + 8 * k)
            if ref:
                blocks |= rt.blocks_of(ref)
    return blocks


def descriptor_states(image: bytes) -> list[int]:
    n_desc = GEOMETRY.unpack_from(image, GEOMETRY_OFF)[0]
    return [DESC.unpack_from(image, DESC_TABLE_OFF + i * DESC_SIZE)[0] for i in range(n_desc)]


# -- sweep ----------------------------------------------------------------------------

@dataclass(frozen=True)
class Violation:
    point: int
    mask: int
    message: str

    def __str__(self):
        return f"crash point {self.point}, subset mask {self.mask:#x}: {self.message}"


@dataclass
class VerdictReport:
    script: str
    runtime: str
    pdom: int
    crash_points: int = 0
    medium_ops: int = 0
    snapshots: int = 0
    recoveries: int = 0
    max_pending: int = 0
    sampled_points: int = 0
    violations: list[Violation] = field(default_factory=list)
    audit_ok: bool = True
    elapsed: float = 0.0

    @property
    def ok(self) -> bool:
        return not self.violations and self.audit_ok

    def summary(self) -> str:
        verdict = "PASS" if self.ok else "FAIL"
        return (f"{verdict} {self.script} runtime={self.runtime} pdom={self.pdom} "
                f"points={self.crash_points} ops={self.medium_ops} snapshots={self.snapshots} "
                f"recoveries={self.recoveries} max_pending={self.max_pending} "
                f"violations={len(self.violations)} time={self.elapsed:.2f}s")


@dataclass
class _Point:
    state: CrashState
    allowed: frozenset


@dataclass(frozen=True)
class _Outcome:
    state: State | None
    error: str | None


def _recover(image: bytes, config: PdomConfig, kind: RuntimeKind, n_handles: int) -> _Outcome:
    for i, st in enumerate(descriptor_states(image)):
        if st not in TxnState._value2member_map_:
            return _Outcome(None, f"descriptor {i} holds invalid state {st}")
    try:
        med = PersistentMedium.from_snapshot(image, config)
        region = region_open(med, kind)
        if any(st != TxnState.IDLE for st in descriptor_states(med.volatile_image)):
            return _Outcome(None, "descriptor not idle after recovery")
        state = logical_state(region, n_handles)
        allocated = region.alloc.allocated_refs()
        reach = reachable(region, n_handles)
        if allocated != reach:
            leaked = sorted(allocated - reach)
            dangling = sorted(reach - allocated)
            return _Outcome(state, f"leak audit failed: leaked={[hex(x) for x in leaked]} "
                                   f"dangling={[hex(x) for x in dangling]}")
        return _Outcome(state, None)
    except PmError as e:
        return _Outcome(None, f"recovery failed: {type(e).__name__}: {e}")


def setup_region(script: Script, runtime: RuntimeKind | str, pdom: PdomConfig,
                 config: RegionConfig | None = None, size: int = HARNESS_MEDIUM):
    kind = RuntimeKind[runtime.upper()] if isinstance(runtime, str) else RuntimeKind(runtime)
    med = PersistentMedium(size, pdom)
    region = region_create(med, kind, config or HARNESS_CONFIG)
    return med, region, LiveRun(region, script)


def record_points(script: Script, runtime, pdom: PdomConfig, config: RegionConfig | None = None):
    """Run the script once, capturing the crash state at every operation boundary."""
    states = model_states(script)
    med, region, live = setup_region(script, runtime, pdom, config)
    points: list[_Point] = [_Point(med.crash_state(), frozenset({0}))]
    ctx = {"allowed": frozenset({0}), "ops": 0}

    def observe(_op):
        ctx["ops"] += 1
        points.append(_Point(med.crash_state(), ctx["allowed"]))

    def on_commit_point(_txn):
        # the operation just captured made the commit durable
        post = ctx["post"]
        points[-1] = _Point(points[-1].state, post)
        ctx["allowed"] = post

    med.observer = observe
    region.on_commit_point = on_commit_point
    try:
        for j, ops in enumerate(script.txns):
            ctx["allowed"] = frozenset({j})
            ctx["post"] = frozenset({j + 1})

            def committing(j=j):
                ctx["allowed"] = frozenset({j, j + 1})
            live.run_txn(ops, committing)
            ctx["allowed"] = frozenset({j + 1})
    finally:
        med.observer = None
        region.on_commit_point = None
    final = logical_state(region, script.handles)
    if final != states[-1]:
        raise AssertionError(f"{script.name}: live run diverged from the model")
    return points, states, ctx["ops"], kind_of(runtime)


def kind_of(runtime) -> RuntimeKind:
    return RuntimeKind[runtime.upper()] if isinstance(runtime, str) else RuntimeKind(runtime)


def crash_sweep(script: Script, runtime, pdom: PdomConfig | Pdom | int = Pdom.PDOM1, seed: int = 0,
                cap: int = ENUMERATE_CAP, config: RegionConfig | None = None,
                cache: dict | None = None, max_violations: int = 20) -> VerdictReport:
    """Exhaustively crash a scripted workload and check every recovered image."""
    t0 = time.perf_counter()
    if not isinstance(pdom, PdomConfig):
        pdom = PdomConfig(Pdom(pdom))
    kind = kind_of(runtime)
    report = VerdictReport(script.name, kind.name.lower(), int(pdom.level))
    try:
        points, states, n_ops, kind = record_points(script, runtime, pdom, config)
    except (AssertionError, PmError) as e:
        # the crash-free run itself went wrong; there is nothing sensible to crash
        report.violations.append(Violation(-1, 0, f"live run failed: {type(e).__name__}: {e}"))
        report.audit_ok = False
        report.elapsed = time.perf_counter() - t0
        return report
    report.crash_points = len(points)
    report.medium_ops = n_ops
    if len(points) != n_ops + 1:
        report.audit_ok = False
    cache = {} if cache is None else cache
    rng = random.Random(seed)
    recovery_cfg = PdomConfig(pdom.level, pdom.barrier_latency, pdom.load_latency, pdom.flush_mode)
    allowed_states = [frozenset(states[i] for i in p.allowed) for p in points]
    quick: dict = {}  # (base digest, lines that change it) -> full-image key
    line = LINE
    for idx, p in enumerate(points):
        k = p.state.n_pending
        base = p.state.base
        bkey = hashlib.blake2b(base, digest_size=16).digest()
        changing = [(i, ln, snap) for i, (ln, snap) in enumerate(p.state.pending)
                    if base[ln * line:ln * line + line] != snap]
        report.max_pending = max(report.max_pending, k)
        masks = p.state.masks(cap, RANDOM_SUBSETS, rng)
        expect = (1 << k) if k <= cap else RANDOM_SUBSETS
        if k > cap:
            report.sampled_points += 1
        if len(masks) != min(expect, 1 << k):
            report.audit_ok = False
        for mask in masks:
            qkey = (bkey, tuple((ln, snap) for i, ln, snap in changing if mask >> i & 1))
            key = quick.get(qkey)
            if key is None:
                image = p.state.image(mask)
                key = (hashlib.blake2b(image, digest_size=16).digest(), pdom.store_persists)
                quick[qkey] = key
            out = cache.get(key)
            if out is None:
                image = p.state.image(mask)
                out = _recover(image, recovery_cfg, kind, script.handles)
                cache[key] = out
                report.recoveries += 1
            report.snapshots += 1
            msg = out.error
            if msg is None and out.state not in allowed_states[idx]:
                want = sorted(p.allowed)
                msg = f"recovered state matches none of the allowed states {want}"
            if msg is not None and len(report.violations) < max_violations:
                report.violations.append(Violation(idx, mask, msg))
    report.elapsed = time.perf_counter() - t0
    return report


def idempotence_check(script: Script, runtime, pdom: PdomConfig | Pdom | int = Pdom.PDOM1,
                      samples: int = 100, seed: int = 0) -> list[str]:
    """Open random crash snapshots twice; both recoveries must leave identical images."""
    if not isinstance(pdom, PdomConfig):
        pdom = PdomConfig(Pdom(pdom))
    points, _, _, kind = record_points(script, runtime, pdom)
    rng = random.Random(seed)
    problems = []
    for _ in range(samples):
        idx = rng.randrange(len(points))
        st = points[idx].state
        mask = rng.getrandbits(st.n_pending) if st.n_pending else 0
        med = PersistentMedium.from_snapshot(st.image(mask), pdom)
        region_open(med, kind)
        first = med.persistent_image
        if med.dirty_lines() or med.pending_lines():
            problems.append(f"point {idx} mask {mask:#x}: recovery left unpersisted lines")
        med2 = PersistentMedium.from_snapshot(first, pdom)
        region_open(med2, kind)
        if med2.persistent_image != first:
            problems.append(f"point {idx} mask {mask:#x}: second recovery changed the image")
    return problems


def smoke_threads(runtime, threads: int = 4, txns: int = 40, seed: int = 0,
                  pdom: Pdom = Pdom.PDOM1) -> list[str]:
    """Concurrent random transactions on disjoint objects; checks invariants only.

    Each worker owns one cell object, reachable through a shared directory
    written once up front, and repeatedly swaps the block its cell points at.
    """
    kind = kind_of(runtime)
    med = PersistentMedium(1 << 20, PdomConfig(pdom))
    region = region_create(med, kind, RegionConfig(n_desc=max(threads, 2), chunk_size=1024,
                                                   n_chunks=64, unit_size=4096))
    t = region.begin()
    directory = t.alloc(8 * threads)
    cells = [t.alloc(8) for _ in range(threads)]
    for w, c in enumerate(cells):
        t.write_u64(directory, 8 * w, c)
    t.root_set(directory)
    t.commit()
    errors: list[str] = []

    def worker(w):
        rng = random.Random(seed * 1000 + w)
        cell = cells[w]
        mine = 0
        try:
            for _ in range(txns):
                txn = region.begin()
                if kind is RuntimeKind.COW:
                    txn.open(cell, Mode.WRITE)
                if mine and rng.random() < 0.3:
                    txn.free(mine)
                    new = 0
                else:
                    new = txn.alloc(rng.randint(1, 200))
                    if mine:
                        txn.free(mine)
                txn.write_u64(cell, 0, new)
                if rng.random() < 0.25:
                    txn.abort()
                else:
                    txn.commit()
                    mine = new
        except Exception as e:  # reported, not raised, so other workers finish
            errors.append(f"worker {w}: {type(e).__name__}: {e}")

    ts = [threading.Thread(target=worker, args=(w,)) for w in range(threads)]
    for th in ts:
        th.start()
    for th in ts:
        th.join()
    med2 = PersistentMedium.from_snapshot(med.crash(), PdomConfig(pdom))
    r2 = region_open(med2, kind)
    allocated = r2.alloc.allocated_refs()
    rt = r2.runtime
    reach = rt.blocks_of(r2.root_cell) | rt.blocks_of(directory)
    for c in cells:
        reach |= rt.blocks_of(c)
        ref = med2.load_u64(r2.unwrap(c))
        if ref:
            reach |= rt.blocks_of(ref)
    if allocated != reach:
        errors.append(f"leak audit failed after concurrent run: {len(allocated ^ reach)} blocks differ")
    return errors

__all__ = ["Op", "Script", "ScriptError", "VerdictReport", "Violation", "builtin_scripts", "crash_sweep",
           "idempotence_check", "load_script", "logical_state", "model_states", "parse_script",
           "smoke_threads"]

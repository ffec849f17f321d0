"""Undo-logging runtime.

Each first write to a range appends a record holding the old bytes and
persists it with a single barrier; the stored tail is bumped afterwards
without one, so after a crash it may lag the real end of log by one record.
Recovery then looks at exactly one record past the stored tail and accepts
it only if sentinel, version and checksum all check out.
"""

from __future__ import annotations

from dataclasses import dataclass

from fastcrc import crc64

from .layout import (OBJ_HDR, UNDO_COMMIT, UNDO_DATA, UNDO_HEAD, UNDO_SENTINEL, RuntimeKind, TxnState,
                     pad8, undo_record_size)
from .log import walk
from .txn import DescImage, Runtime, Txn

_MASK64 = (1 << 64) - 1


def crc64_ecma(data: bytes) -> int:
    return crc64.ecma_182(data)


def word_sum(data: bytes) -> int:
    """Trivial checksum used by the two-barrier variant (the tail is trusted there)."""
    return sum(int.from_bytes(data[i:i + 8], "little") for i in range(0, len(data), 8)) & _MASK64


@dataclass(frozen=True)
class UndoRecord:
    addr: int
    version: int
    kind: int
    length: int
    target: int
    old: bytes
    checksum: int
    valid_sum: bool

    @property
    def size(self) -> int:
        return undo_record_size(self.length)


def encode_record(version: int, kind: int, target: int, old: bytes, naive: bool = False) -> tuple[bytes, bytes]:
    """(body, checksum bytes); the checksum covers the body plus a zeroed checksum field."""
    body = UNDO_HEAD.pack(UNDO_SENTINEL, version, kind, len(old), target) + old + bytes(pad8(len(old)) - len(old))
    csum = (word_sum if naive else crc64_ecma)(body + bytes(8))
    return body, csum.to_bytes(8, "little")


def read_record(medium, addr: int, room: int, naive: bool = False) -> UndoRecord | None:
    """Decode the record at addr, or None when there is no plausible record there."""
    if room < UNDO_HEAD.size + 8:
        return None
    sentinel, version, kind, length, target = UNDO_HEAD.unpack(medium.load(addr, UNDO_HEAD.size))
    if sentinel != UNDO_SENTINEL or kind not in (UNDO_DATA, UNDO_COMMIT):
        return None
    size = undo_record_size(length)
    if size > room:
        return None
    raw = medium.load(addr, size)
    body, stored = raw[:-8], int.from_bytes(raw[-8:], "little")
    calc = (word_sum if naive else crc64_ecma)(body + bytes(8))
    old = body[UNDO_HEAD.size:UNDO_HEAD.size + length]
    return UndoRecord(addr, version, kind, length, target, old, stored, calc == stored)


def log_records(medium, pool, head: int, version: int, stored_tail: int,
                naive: bool = False, bounds: tuple[int, int] | None = None) -> list[UndoRecord]:
    """Valid records of one descriptor's log, using tail inference.

    Records up to the stored tail are taken as long as they validate; at most
    one further record is examined and accepted only if it validates too.  The
    two-barrier variant persists its tail before proceeding, so it trusts it.
    """
    limit = stored_tail if naive else stored_tail + 1
    out: list[UndoRecord] = []

    def size_at(addr, room):
        if len(out) >= limit:
            return None
        rec = read_record(medium, addr, room, naive)
        if rec is None or rec.version != version or not rec.valid_sum:
            return None
        if bounds is not None and rec.kind == UNDO_DATA:
            lo, hi = bounds
            if rec.target < lo or rec.target + rec.length > hi:
                return None
        out.append(rec)
        if rec.kind == UNDO_COMMIT:
            return None
        return rec.size

    for _ in walk(medium, pool, head, size_at):
        pass
    return out


def infer_tail(medium, pool, head: int, version: int, stored_tail: int, naive: bool = False) -> int:
    return len(log_records(medium, pool, head, version, stored_tail, naive))


def _covered(spans: list[list[int]], lo: int, hi: int) -> bool:
    return any(a <= lo and hi <= b for a, b in spans)


def _add_span(spans: list[list[int]], lo: int, hi: int):
    spans.append([lo, hi])
    spans.sort()
    merged = [spans[0]]
    for a, b in spans[1:]:
        if a <= merged[-1][1]:
            merged[-1][1] = max(merged[-1][1], b)
        else:
            merged.append([a, b])
    spans[:] = merged


class UndoRuntime(Runtime):
    kind = RuntimeKind.UNDO

    def __init__(self, region):
        super().__init__(region)
        self.naive = region.naive_undo
        self.dedupe = region.config.undo_dedupe

    def on_begin(self, txn: Txn):
        super().on_begin(txn)
        txn.undo = []
        txn.logged = {}

    def read(self, txn, ref, off, n):
        return self.medium.load(ref + OBJ_HDR + off, n)

    def write(self, txn, ref, off, data):
        target = ref + OBJ_HDR + off
        n = len(data)
        if ref not in txn.fresh:
            if not self.dedupe:
                self.append(txn, UNDO_DATA, target, n)
            else:
                spans = txn.logged.setdefault(ref, [])
                if not _covered(spans, off, off + n):
                    self.append(txn, UNDO_DATA, target, n)
                    _add_span(spans, off, off + n)
        self.medium.store(target, data)
        txn.ranges.append((target, n))

    def append(self, txn: Txn, kind: int, target: int, n: int):
        d = txn.desc
        med = self.medium
        old = med.load(target, n) if n else b""
        body, csum = encode_record(txn.version, kind, target, old, self.naive)
        size = len(body) + 8
        addr = d.log.reserve(size)
        med.store(addr, body)
        med.store(addr + len(body), csum)  # checksum last
        self.flush([(addr, size)] + d.log.take_extra())
        self.fence()
        if kind == UNDO_COMMIT:
            self.commit_point(txn)
            d.state = TxnState.COMMITTED
        else:
            txn.undo.append((target, old))
        txn.stats.records += 1
        d.log_tail += 1
        # the tail trails the record; recovery tolerates it being one behind
        self.set_state(d, d.state, persist=self.naive)

    def commit(self, txn: Txn):
        d = txn.desc
        # (i) persist the in-place writes, new blocks and the allocation log
        self.store_desc(d)
        self.flush(txn.ranges + [self.desc_range(d)])
        txn.ranges = []
        self.fence()
        # (ii) the commit record is the commit point
        self.append(txn, UNDO_COMMIT, 0, 0)
        # (iii) + (iv) only need persisting when the heap changed
        if txn.alloc_recs:
            self.flush(self.apply_allocs(txn))
            self.fence()
        self.set_state(d, TxnState.IDLE, persist=bool(txn.alloc_recs))
        self.after_commit(txn)

    def abort(self, txn: Txn):
        d = txn.desc
        med = self.medium
        ranges = []
        for target, old in reversed(txn.undo):
            med.store(target, old)
            ranges.append((target, len(old)))
        ranges += self.unapply_eager(txn)
        if ranges:
            self.flush(ranges)
            self.fence()
        d.state = TxnState.ABORTED
        self.set_state(d, TxnState.IDLE, persist=False)
        self.after_abort(txn)

    def records(self, di: DescImage) -> list[UndoRecord]:
        g = self.region.geom
        bounds = (g.heap_base, g.heap_base + g.n_units * g.unit_size)
        return log_records(self.medium, self.region.pool, di.log_head, di.version, di.log_tail,
                           self.naive, bounds)

    def recover(self, di: DescImage):
        recs = self.records(di)
        allocs = self.read_alloc_log(di)
        if recs and recs[-1].kind == UNDO_COMMIT:
            return self.replay_allocs(allocs)
        ranges = []
        for rec in reversed(recs):
            self.medium.store(rec.target, rec.old)
            ranges.append((rec.target, rec.length))
        return ranges + self.rollback_allocs(allocs)

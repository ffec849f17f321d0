"""Redo-logging runtime.

Writes append new values to the log and never touch the object until
commit.  A transaction with a bitmap slot sets its bit in the object's
writers word on the first write, so reads of objects it never wrote are
plain loads.  Records for one object form a newest-first stack through
their prev links, indexed by object base in a volatile map, so a
read-after-write only visits that object's records.
"""

from __future__ import annotations

from dataclasses import dataclass

from .layout import OBJ_HDR, OBJ_WRITERS, REDO_HEAD, ObjKind, RuntimeKind, TxnState, pad8
from .log import walk
from .txn import DescImage, Runtime, Txn

_MASK64 = (1 << 64) - 1


@dataclass(frozen=True)
class RedoRecord:
    addr: int
    version: int
    base: int
    offset: int
    data: bytes
    prev: int

    @property
    def size(self) -> int:
        return REDO_HEAD.size + pad8(len(self.data))


def encode_record(version: int, base: int, offset: int, data: bytes, prev: int) -> bytes:
    return REDO_HEAD.pack(version, base, offset, len(data), prev) + data + bytes(pad8(len(data)) - len(data))


def log_records(medium, pool, head: int, version: int, count: int) -> list[RedoRecord]:
    """The first `count` records of a persisted redo log (stops early on a mismatch)."""
    out: list[RedoRecord] = []

    def size_at(addr, room):
        if len(out) >= count or room < REDO_HEAD.size:
            return None
        v, base, off, n, prev = REDO_HEAD.unpack(medium.load(addr, REDO_HEAD.size))
        size = REDO_HEAD.size + pad8(n)
        if v != version or size > room:
            return None
        out.append(RedoRecord(addr, v, base, off, medium.load(addr + REDO_HEAD.size, n), prev))
        return size

    for _ in walk(medium, pool, head, size_at):
        pass
    return out


class RedoRuntime(Runtime):
    kind = RuntimeKind.REDO

    def on_begin(self, txn: Txn):
        super().on_begin(txn)
        txn.index = {}     # object base -> newest record address
        txn.mirror = {}    # record address -> RedoRecord (volatile copy of the log)
        txn.order = []     # record addresses in append order
        txn.marked = set()

    def write(self, txn, ref, off, data):
        med = self.medium
        d = txn.desc
        if txn.slot is not None and ref not in txn.marked:
            med.fetch_or(ref + OBJ_WRITERS, 1 << txn.slot)
            txn.marked.add(ref)
        prev = txn.index.get(ref, 0)
        raw = encode_record(txn.version, ref, off, data, prev)
        addr = d.log.reserve(len(raw))
        med.store(addr, raw)
        # asynchronous writeback now; the first commit barrier completes it
        self.flush([(addr, len(raw))] + d.log.take_extra())
        txn.index[ref] = addr
        txn.mirror[addr] = RedoRecord(addr, txn.version, ref, off, data, prev)
        txn.order.append(addr)
        d.log_tail += 1
        txn.stats.records += 1

    def read(self, txn, ref, off, n):
        raw = self.medium.load(ref + OBJ_WRITERS, OBJ_HDR - OBJ_WRITERS + off + n)
        writers = int.from_bytes(raw[:8], "little")
        data = raw[OBJ_HDR - OBJ_WRITERS + off:]
        if txn.slot is not None and not (writers >> txn.slot) & 1:
            return data
        # own bit set, or a slotless transaction: consult this object's record stack
        txn.stats.lookups += 1
        stack = []
        addr = txn.index.get(ref, 0)
        while addr:
            rec = txn.mirror[addr]
            stack.append(rec)
            addr = rec.prev
        txn.stats.records_visited += len(stack)
        if not stack:
            return data
        buf = bytearray(data)
        end = off + n
        for rec in reversed(stack):  # oldest first, so newer bytes win
            lo, hi = max(off, rec.offset), min(end, rec.offset + len(rec.data))
            if lo < hi:
                buf[lo - off:hi - off] = rec.data[lo - rec.offset:hi - rec.offset]
        return bytes(buf)

    def _clear_bits(self, txn: Txn):
        if txn.slot is None:
            return
        mask = ~(1 << txn.slot) & _MASK64
        for ref in txn.marked:
            self.medium.fetch_and(ref + OBJ_WRITERS, mask)

    def commit(self, txn: Txn):
        d = txn.desc
        if not txn.order and not txn.alloc_recs:
            self.set_state(d, TxnState.IDLE, persist=False)
            self._clear_bits(txn)
            return
        med = self.medium
        # 1: the log, new blocks and the allocation log
        self.store_desc(d)
        self.flush(txn.ranges + [self.desc_range(d)])
        txn.ranges = []
        self.fence()
        # 2: COMMITTED is the commit point
        self.set_state(d, TxnState.COMMITTED, persist=True)
        self.commit_point(txn)
        # 3: apply in place, plus the allocation log
        ranges = []
        for addr in txn.order:
            rec = txn.mirror[addr]
            target = rec.base + OBJ_HDR + rec.offset
            med.store(target, rec.data)
            ranges.append((target, len(rec.data)))
        ranges += self.apply_allocs(txn)
        self.flush(ranges)
        self.fence()
        # 4
        self.set_state(d, TxnState.IDLE, persist=True)
        self._clear_bits(txn)
        self.after_commit(txn)

    def abort(self, txn: Txn):
        d = txn.desc
        self._clear_bits(txn)
        ranges = self.unapply_eager(txn)
        if ranges:
            self.flush(ranges)
            self.fence()
        d.state = TxnState.ABORTED
        self.set_state(d, TxnState.IDLE, persist=False)
        self.after_abort(txn)

    def recover(self, di: DescImage):
        allocs = self.read_alloc_log(di)
        if di.state != TxnState.COMMITTED:
            return self.rollback_allocs(allocs)
        med = self.medium
        g = self.region.geom
        lo, hi = g.heap_base, g.heap_base + g.n_units * g.unit_size
        ranges = []
        for rec in log_records(med, self.region.pool, di.log_head, di.version, di.log_tail):
            target = rec.base + OBJ_HDR + rec.offset
            if lo <= target and target + len(rec.data) <= hi:
                med.store(target, rec.data)
                ranges.append((target, len(rec.data)))
        return ranges + self.replay_allocs(allocs)

    def scrub(self, ref, kind):
        if kind == ObjKind.PLAIN and self.medium.load_u64(ref + OBJ_WRITERS):
            self.medium.store_u64(ref + OBJ_WRITERS, 0)
            return [(ref + OBJ_WRITERS, 8)]
        return []

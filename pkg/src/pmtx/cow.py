"""Copy-on-write runtime.

An object is a wrapper block whose header holds old/new/old_backup payload
references and the current writer.  Opening for write clones the old
payload into a fresh block; commit installs the clone and frees the
superseded payload.  old_backup keeps the superseded payload reachable
through a crash between installing the new version and freeing the old one.
"""

from __future__ import annotations

import struct
import threading
from dataclasses import dataclass

from .errors import BusyError, UsageError
from .layout import (OBJ_HDR, OBJ_HEAD, W_OLD, WRAPPER, WSET_REC, ObjKind, RuntimeKind, TxnState)
from .log import fixed_walk
from .txn import DescImage, Mode, Runtime, Txn

_W_WRITER = 6
_TAIL = struct.Struct("<HQQQ")  # writer, old, new, old_backup
_VERSIONS = struct.Struct("<QQQ")  # old, new, old_backup


@dataclass
class Opened:
    old: int
    new: int
    size: int
    dead: bool = False


def default_copy(region, src: int, dst: int, size: int):
    """Byte copy of one payload block into another (the NULL copy constructor)."""
    med = region.medium
    med.store(dst + OBJ_HDR, med.load(src + OBJ_HDR, size))


class CowRuntime(Runtime):
    kind = RuntimeKind.COW

    def __init__(self, region):
        super().__init__(region)
        self._open_lock = threading.Lock()

    def on_begin(self, txn: Txn):
        super().on_begin(txn)
        txn.wset = {}
        txn.fresh_payload = {}

    def format_root(self):
        med = self.medium
        prec = self.heap.reserve(8)
        wrec = self.heap.reserve(0)
        pref, wref = self.heap.ref_of(prec), self.heap.ref_of(wrec)
        med.store(pref, OBJ_HEAD.pack(8, ObjKind.PAYLOAD, 0) + bytes(OBJ_HDR - OBJ_HEAD.size + 8))
        med.store(wref, WRAPPER.pack(8, ObjKind.WRAPPER, 0, pref, 0, 0))
        ranges = [(pref, OBJ_HDR + 8), (wref, OBJ_HDR)]
        return wref, ranges + self.heap.apply(prec) + self.heap.apply(wrec)

    def wrapper(self, ref: int) -> tuple[int, int, int, int, int]:
        """(size, writer, old, new, old_backup) as currently stored."""
        size, _, writer, old, new, backup = WRAPPER.unpack(self.medium.load(ref, WRAPPER.size))
        return size, writer, old, new, backup

    def blocks_of(self, ref):
        return {ref, self.medium.load_u64(ref + W_OLD)}

    # -- allocation ---------------------------------------------------------

    def alloc(self, txn, size):
        pref = self.new_block(txn, size, ObjKind.PAYLOAD, index=False)
        rec = self.heap.reserve(0)
        wref = self.heap.ref_of(rec)
        self.medium.store(wref, WRAPPER.pack(size, ObjKind.WRAPPER, 0, pref, 0, 0))
        txn.ranges.append((wref, OBJ_HDR))
        txn.fresh.add(wref)
        txn.fresh_payload[wref] = pref
        self.region.sizes[wref] = size
        self.log_alloc(txn, rec)
        return wref

    def free(self, txn, ref):
        loc = self.heap.locate
        if ref in txn.fresh:
            self.log_alloc(txn, loc(txn.fresh_payload[ref]).as_free())
        else:
            entry = txn.wset.get(ref)
            old = entry.old if entry else self.medium.load_u64(ref + W_OLD)
            self.log_alloc(txn, loc(old).as_free())
            if entry:
                self.log_alloc(txn, loc(entry.new).as_free())
                entry.dead = True
        self.log_alloc(txn, loc(ref).as_free())

    # -- access ---------------------------------------------------------------

    def open(self, txn, ref, mode, copy_ctor):
        if ref in txn.fresh:
            return txn.fresh_payload[ref]
        entry = txn.wset.get(ref)
        if entry is not None:
            return entry.new
        med = self.medium
        if mode is Mode.READ:
            return med.load_u64(ref + W_OLD)
        me = txn.id + 1
        with self._open_lock:
            size, writer, old, _, _ = self.wrapper(ref)
            if writer and writer != me:
                raise BusyError(f"object {ref:#x} is open for writing by transaction {writer - 1}")
            med.store(ref + _W_WRITER, struct.pack("<H", me))
        rec = self.heap.reserve(size)
        new = self.heap.ref_of(rec)
        med.store(new, OBJ_HEAD.pack(size, ObjKind.PAYLOAD, 0))
        (copy_ctor or default_copy)(self.region, old, new, size)
        self.log_alloc(txn, rec)
        med.store(ref + _W_WRITER, _TAIL.pack(me, old, new, old))
        txn.ranges += [(new, OBJ_HDR + size), (ref, OBJ_HDR)]
        txn.wset[ref] = Opened(old, new, size)
        return new

    def _payload(self, txn, ref, write: bool) -> int:
        if ref in txn.fresh:
            return txn.fresh_payload[ref]
        entry = txn.wset.get(ref)
        if entry is not None:
            return entry.new
        if write:
            raise UsageError(f"object {ref:#x} must be opened for writing before it is written")
        return self.medium.load_u64(ref + W_OLD)

    def read(self, txn, ref, off, n):
        return self.medium.load(self._payload(txn, ref, False) + OBJ_HDR + off, n)

    def write(self, txn, ref, off, data):
        target = self._payload(txn, ref, True) + OBJ_HDR + off
        self.medium.store(target, data)
        txn.ranges.append((target, len(data)))

    # -- commit / abort -----------------------------------------------------------

    def commit(self, txn: Txn):
        d = txn.desc
        if not txn.wset and not txn.alloc_recs:
            self.set_state(d, TxnState.IDLE, persist=False)
            return
        med = self.medium
        live = [(w, e) for w, e in txn.wset.items() if not e.dead]
        for _, e in live:
            self.log_alloc(txn, self.heap.locate(e.old).as_free())
        ranges = []
        for w, e in live:
            addr = d.wset.reserve(WSET_REC.size)
            med.store(addr, WSET_REC.pack(txn.version, w, e.old, e.new))
            ranges.append((addr, WSET_REC.size))
            d.wset_count += 1
        ranges += d.wset.take_extra()
        # 1: payloads, wrappers, write set and allocation log
        self.store_desc(d)
        self.flush(txn.ranges + ranges + [self.desc_range(d)])
        txn.ranges = []
        self.fence()
        # 2: commit point
        self.set_state(d, TxnState.COMMITTED, persist=True)
        self.commit_point(txn)
        # 3: old <- new, new <- nil, free old_backup and clear it
        ranges = []
        for w, e in live:
            med.store(w + W_OLD, _VERSIONS.pack(e.new, 0, 0))
            ranges.append((w + W_OLD, _VERSIONS.size))
        ranges += self.apply_allocs(txn)
        self.flush(ranges)
        self.fence()
        # 4
        self.set_state(d, TxnState.IDLE, persist=True)
        # writer ids are cleared lazily; recovery resets any that persisted
        for w, _ in live:
            med.store(w + _W_WRITER, b"\0\0")
        self.after_commit(txn)

    def abort(self, txn: Txn):
        d = txn.desc
        if not txn.wset and not self.has_eager(txn):
            self.set_state(d, TxnState.IDLE, persist=False)
            self.after_abort(txn)
            return
        med = self.medium
        ranges = []
        for w, e in txn.wset.items():
            med.store(w + _W_WRITER, _TAIL.pack(0, e.old, 0, 0))
            ranges.append((w, OBJ_HDR))
        ranges += self.unapply_eager(txn)
        self.flush(ranges)
        self.fence()
        d.state = TxnState.ABORTED
        self.set_state(d, TxnState.IDLE, persist=True)
        self.after_abort(txn)

    # -- recovery -------------------------------------------------------------------

    def write_set(self, di: DescImage) -> list[tuple[int, int, int]]:
        """Persisted (wrapper, old_backup, new) entries of a descriptor."""
        med = self.medium
        g = self.region.geom
        lo, hi = g.heap_base, g.heap_base + g.n_units * g.unit_size
        out = []
        for addr in fixed_walk(med, self.region.pool, di.wset_head, WSET_REC.size, di.wset_count):
            v, w, backup, new = WSET_REC.unpack(med.load(addr, WSET_REC.size))
            if v != di.version or not (lo <= w < hi and lo <= new < hi):
                break
            out.append((w, backup, new))
        return out

    def recover(self, di: DescImage):
        allocs = self.read_alloc_log(di)
        if di.state != TxnState.COMMITTED:
            # wrappers are reset by the scrub pass; lazily allocated clones never hit the bitmap
            return self.rollback_allocs(allocs)
        ranges = []
        for w, _, new in self.write_set(di):
            self.medium.store(w + W_OLD, _VERSIONS.pack(new, 0, 0))
            ranges.append((w + W_OLD, _VERSIONS.size))
        return ranges + self.replay_allocs(allocs)

    def scrub(self, ref, kind):
        if kind != ObjKind.WRAPPER:
            return []
        _, writer, old, new, backup = self.wrapper(ref)
        if writer or new or backup:
            self.medium.store(ref + _W_WRITER, _TAIL.pack(0, old, 0, 0))
            return [(ref, OBJ_HDR)]
        return []

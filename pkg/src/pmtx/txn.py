"""Transaction descriptors, the Txn handle, and machinery shared by the runtimes.

A descriptor occupies one cache line in the descriptor table.  The runtime
keeps a volatile mirror of it and always rewrites the whole line with one
store, so a descriptor line is never torn at 8-byte granularity in a way
that mixes two transactions.
"""

from __future__ import annotations

import enum
from dataclasses import dataclass

from .alloc import AllocRecord, is_eager
from .errors import PmRangeError, UsageError
from .layout import (ALLOC_REC, D_ALLOC_HEAD, D_LOG_HEAD, D_WSET_HEAD, DESC, DESC_SIZE,
                     DESC_TABLE_OFF, FLAG_EAGER, HDR_GLOBAL_VERSION, OBJ_HDR, OBJ_HEAD,
                     OP_ALLOC, OP_FREE, ObjKind, TxnState)
from .log import ChunkedLog, fixed_walk
from .simpm import LINE

BITMAP_SLOTS = 64


class Mode(enum.Enum):
    READ = "read"
    WRITE = "write"


@dataclass
class Descriptor:
    id: int
    addr: int
    log: ChunkedLog
    alloc_log: ChunkedLog
    wset: ChunkedLog
    state: int = TxnState.IDLE
    version: int = 0
    log_tail: int = 0
    alloc_count: int = 0
    wset_count: int = 0
    busy: bool = False

    def pack(self) -> bytes:
        return DESC.pack(self.state, self.version, self.log_tail, self.log.head,
                         self.alloc_count, self.alloc_log.head, self.wset_count, self.wset.head)


@dataclass(frozen=True)
class DescImage:
    """Descriptor fields as found on the medium during recovery."""

    id: int
    addr: int
    state: int
    version: int
    log_tail: int
    log_head: int
    alloc_count: int
    alloc_head: int
    wset_count: int
    wset_head: int

    @classmethod
    def parse(cls, id: int, addr: int, raw: bytes) -> DescImage:
        return cls(id, addr, *DESC.unpack(raw))


def make_descriptors(medium, pool, n: int) -> list[Descriptor]:
    out = []
    for i in range(n):
        a = DESC_TABLE_OFF + i * DESC_SIZE
        out.append(Descriptor(i, a, ChunkedLog(medium, pool, a + D_LOG_HEAD),
                              ChunkedLog(medium, pool, a + D_ALLOC_HEAD),
                              ChunkedLog(medium, pool, a + D_WSET_HEAD)))
    return out


def line_runs(ranges) -> list[tuple[int, int]]:
    """Coalesce byte ranges into (addr, len) runs of whole cache lines."""
    lines = set()
    for a, n in ranges:
        if n > 0:
            lines.update(range(a // LINE, (a + n - 1) // LINE + 1))
    runs = []
    for ln in sorted(lines):
        if runs and runs[-1][1] == ln:
            runs[-1][1] = ln + 1
        else:
            runs.append([ln, ln + 1])
    return [(a * LINE, (b - a) * LINE) for a, b in runs]


@dataclass
class TxnStats:
    lookups: int = 0
    records_visited: int = 0
    records: int = 0


class Txn:
    """Handle for one running transaction.  Also usable as a context manager."""

    def __init__(self, region, desc: Descriptor, version: int):
        self.region = region
        self.runtime = region.runtime
        self.desc = desc
        self.id = desc.id
        self.version = version
        self.slot = desc.id if desc.id < BITMAP_SLOTS else None
        self.active = True
        self.outcome: TxnState | None = None
        self.alloc_recs: list[AllocRecord] = []
        self.fresh: set[int] = set()
        self.freed: set[int] = set()
        self.ranges: list[tuple[int, int]] = []
        self.stats = TxnStats()
        self.runtime.on_begin(self)

    # -- lifecycle --------------------------------------------------------

    def _live(self):
        if not self.active:
            raise UsageError("transaction is no longer running")

    def commit(self):
        self._live()
        self.runtime.commit(self)
        self._finish(TxnState.COMMITTED)

    def abort(self):
        self._live()
        self.runtime.abort(self)
        self._finish(TxnState.ABORTED)

    def _finish(self, outcome):
        self.active = False
        self.outcome = outcome
        self.region.release_descriptor(self.desc)

    def __enter__(self):
        return self

    def __exit__(self, exc_type, exc, tb):
        if not self.active:
            return False
        if exc_type is None:
            self.commit()
        else:
            self.abort()
        return False

    # -- data access ------------------------------------------------------

    def _check(self, ref: int, off: int, n: int) -> int:
        if ref in self.freed:
            raise UsageError(f"object {ref:#x} was freed by this transaction")
        size = self.region.obj_size(ref)
        if off < 0 or n < 0 or off + n > size:
            raise PmRangeError(f"[{off}, {off + n}) outside object {ref:#x} of {size} bytes")
        return size

    def read(self, ref: int, off: int, n: int) -> bytes:
        self._live()
        self._check(ref, off, n)
        return self.runtime.read(self, ref, off, n)

    def write(self, ref: int, off: int, data: bytes):
        self._live()
        self._check(ref, off, len(data))
        if data:
            self.runtime.write(self, ref, off, bytes(data))

    def read_u64(self, ref: int, off: int = 0) -> int:
        return int.from_bytes(self.read(ref, off, 8), "little")

    def write_u64(self, ref: int, off: int, value: int):
        self.write(ref, off, value.to_bytes(8, "little"))

    def memset(self, ref: int, off: int, byte: int, n: int):
        self.write(ref, off, bytes([byte & 0xFF]) * n)

    def memcpy(self, dst: int, dst_off: int, src: int, src_off: int, n: int):
        self.write(dst, dst_off, self.read(src, src_off, n))

    def memcmp(self, a: int, a_off: int, b: int, b_off: int, n: int) -> int:
        x, y = self.read(a, a_off, n), self.read(b, b_off, n)
        return (x > y) - (x < y)

    def open(self, ref: int, mode: Mode = Mode.READ, copy_ctor=None) -> int:
        """Open a COW object; returns the payload block the transaction should use."""
        self._live()
        if ref in self.freed:
            raise UsageError(f"object {ref:#x} was freed by this transaction")
        self.region.obj_size(ref)
        return self.runtime.open(self, ref, Mode(mode), copy_ctor)

    # -- allocation -------------------------------------------------------

    def alloc(self, size: int) -> int:
        self._live()
        if size < 0:
            raise ValueError("negative allocation size")
        return self.runtime.alloc(self, size)

    def free(self, ref: int):
        self._live()
        if ref in self.freed:
            raise UsageError(f"double free of {ref:#x}")
        try:
            self.region.obj_size(ref)
        except PmRangeError as e:
            raise UsageError(f"free of unallocated reference {ref:#x}") from e
        if ref == self.region.root_cell:
            raise UsageError("the root cell cannot be freed")
        self.runtime.free(self, ref)
        self.freed.add(ref)

    # -- root -------------------------------------------------------------

    def root_get(self) -> int:
        return self.read_u64(self.region.root_cell)

    def root_set(self, ref: int):
        if ref:
            self.region.obj_size(ref)
        cell = self.region.root_cell
        if self.region.kind.name == "COW":
            self.open(cell, Mode.WRITE)
        self.write_u64(cell, 0, ref)


class Runtime:
    """Behaviour shared by the three runtimes: persistence helpers and the allocation log."""

    kind = None

    def __init__(self, region):
        self.region = region
        self.medium = region.medium
        self.heap = region.alloc
        self.pdom2 = self.medium.config.store_persists
        self.eager = region.config.alloc_mode == "eager"

    # persist helpers; under PDOM-2 stores are already durable so nothing is issued
    def flush(self, ranges):
        if self.pdom2:
            return
        for a, n in line_runs(ranges):
            self.medium.writeback(a, n)

    def fence(self):
        if not self.pdom2:
            self.medium.persist_barrier()

    def store_desc(self, d: Descriptor):
        self.medium.store(d.addr, d.pack())

    def desc_range(self, d: Descriptor) -> tuple[int, int]:
        return (d.addr, DESC_SIZE)

    def set_state(self, d: Descriptor, state: TxnState, persist: bool):
        """Store the descriptor line; with persist the caller gets a barrier too."""
        d.state = state
        self.store_desc(d)
        self.flush([self.desc_range(d)])
        if persist:
            self.fence()

    def commit_point(self, txn: Txn):
        hook = self.region.on_commit_point
        if hook is not None:
            hook(txn)

    # -- lifecycle hooks ---------------------------------------------------

    def on_begin(self, txn: Txn):
        d = txn.desc
        d.version = txn.version
        d.state = TxnState.RUNNING
        d.log_tail = d.alloc_count = d.wset_count = 0
        d.log.reset()
        d.alloc_log.reset()
        d.wset.reset()
        med = self.medium
        med.store_u64(HDR_GLOBAL_VERSION, txn.version)
        self.store_desc(d)
        self.flush([(HDR_GLOBAL_VERSION, 8), self.desc_range(d)])

    def read(self, txn, ref, off, n):
        raise NotImplementedError

    def write(self, txn, ref, off, data):
        raise NotImplementedError

    def commit(self, txn):
        raise NotImplementedError

    def abort(self, txn):
        raise NotImplementedError

    def open(self, txn, ref, mode, copy_ctor):
        raise UsageError("open() is only meaningful in copy-on-write regions")

    def recover(self, d: DescImage) -> list[tuple[int, int]]:
        raise NotImplementedError

    # -- allocation --------------------------------------------------------

    def new_block(self, txn: Txn, size: int, kind: ObjKind, index: bool = True) -> int:
        """Reserve and format a block; the header and zeroed payload are stored in place."""
        rec = self.heap.reserve(size)
        ref = self.heap.ref_of(rec)
        self.medium.store(ref, OBJ_HEAD.pack(size, kind, 0) + bytes(OBJ_HDR - OBJ_HEAD.size + size))
        txn.ranges.append((ref, OBJ_HDR + size))
        if index:
            txn.fresh.add(ref)
            self.region.sizes[ref] = size
        self.log_alloc(txn, rec)
        return ref

    def alloc(self, txn: Txn, size: int) -> int:
        return self.new_block(txn, size, ObjKind.PLAIN)

    def free(self, txn: Txn, ref: int):
        self.log_alloc(txn, self.heap.locate(ref).as_free())

    def log_alloc(self, txn: Txn, rec: AllocRecord):
        d = txn.desc
        if self.eager:
            rec = AllocRecord(rec.op, rec.unit, rec.block, rec.block_size, rec.span, FLAG_EAGER)
        addr = d.alloc_log.reserve(ALLOC_REC.size)
        self.medium.store(addr, rec.pack(txn.version))
        d.alloc_count += 1
        txn.alloc_recs.append(rec)
        if not self.eager:
            txn.ranges.append((addr, ALLOC_REC.size))
            txn.ranges.extend(d.alloc_log.take_extra())
            return
        # eager baseline: the record is durable before the call returns
        self.store_desc(d)
        self.flush([(addr, ALLOC_REC.size), self.desc_range(d)] + d.alloc_log.take_extra())
        self.fence()
        if rec.op == OP_ALLOC:
            self.flush(self.heap.apply(rec))

    def apply_allocs(self, txn: Txn) -> list[tuple[int, int]]:
        ranges = []
        for rec in txn.alloc_recs:
            ranges += self.heap.apply(rec)
        return ranges

    def unapply_eager(self, txn: Txn) -> list[tuple[int, int]]:
        ranges = []
        for rec in txn.alloc_recs:
            if rec.op == OP_ALLOC and is_eager(rec):
                ranges += self.heap.unapply(rec)
        return ranges

    def after_commit(self, txn: Txn):
        """Volatile allocator bookkeeping once the commit is durable."""
        for rec in txn.alloc_recs:
            if rec.op == OP_FREE:
                self.region.sizes.pop(self.heap.ref_of(rec), None)
                self.heap.release(rec)

    def after_abort(self, txn: Txn):
        for rec in txn.alloc_recs:
            if rec.op == OP_ALLOC:
                self.region.sizes.pop(self.heap.ref_of(rec), None)
                self.heap.release(rec)

    def has_eager(self, txn: Txn) -> bool:
        return any(rec.op == OP_ALLOC and is_eager(rec) for rec in txn.alloc_recs)

    # -- recovery helpers ---------------------------------------------------

    def read_alloc_log(self, d: DescImage) -> list[AllocRecord]:
        out = []
        med = self.medium
        for addr in fixed_walk(med, self.region.pool, d.alloc_head, ALLOC_REC.size, d.alloc_count):
            version, rec = AllocRecord.unpack(med.load(addr, ALLOC_REC.size))
            if version != d.version or rec.op not in (OP_ALLOC, OP_FREE) or not self.region.valid_alloc(rec):
                break
            out.append(rec)
        return out

    def replay_allocs(self, recs) -> list[tuple[int, int]]:
        ranges = []
        for rec in recs:
            ranges += self.heap.apply(rec)
        return ranges

    def rollback_allocs(self, recs) -> list[tuple[int, int]]:
        ranges = []
        for rec in recs:
            if rec.op == OP_ALLOC and is_eager(rec):
                ranges += self.heap.unapply(rec)
        return ranges

    def format_root(self) -> tuple[int, list[tuple[int, int]]]:
        """Allocate and durably mark the root cell at region creation."""
        rec = self.heap.reserve(8)
        ref = self.heap.ref_of(rec)
        self.medium.store(ref, OBJ_HEAD.pack(8, ObjKind.PLAIN, 0) + bytes(OBJ_HDR - OBJ_HEAD.size + 8))
        return ref, [(ref, OBJ_HDR + 8)] + self.heap.apply(rec)

    def blocks_of(self, ref: int) -> set[int]:
        """Heap blocks owned by the committed object at `ref`."""
        return {ref}

    def scrub(self, ref: int, kind: int) -> list[tuple[int, int]]:
        """Reset volatile-semantics header fields of an allocated block after recovery."""
        return []


def begin(region) -> Txn:
    return region.begin()


__all__ = ["Descriptor", "DescImage", "Mode", "Runtime", "Txn", "begin", "line_runs"]

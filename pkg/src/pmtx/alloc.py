"""Hoard-style persistent allocator with split metadata.

Each superblock owns a persistent occupancy bitmap (in the heap metadata
area) and volatile free/used lists.  Transactions only touch the volatile
lists while running; the bitmap changes are recorded in the transaction's
allocation log and flipped with compare-and-swap after the commit point, so
allocation itself never needs a persist barrier.
"""

from __future__ import annotations

import threading
from dataclasses import dataclass, field

from .errors import AllocationError, PmRangeError
from .layout import ALLOC_REC, FLAG_EAGER, OBJ_HDR, OP_ALLOC, OP_FREE, SB_HEAD

SIZE_CLASSES = tuple(16 << i for i in range(9))  # 16 .. 4096
MIN_BLOCKS = 16


def block_size_for(total: int) -> int | None:
    """Smallest class holding `total` bytes (header included); None means large."""
    for c in SIZE_CLASSES:
        if c >= total:
            return c
    return None


@dataclass(frozen=True)
class AllocRecord:
    op: int
    unit: int
    block: int
    block_size: int
    span: int
    flags: int = 0

    def pack(self, version: int) -> bytes:
        return ALLOC_REC.pack(version, self.op, self.flags, self.unit, self.block,
                              self.block_size, self.span)

    @classmethod
    def unpack(cls, raw: bytes) -> tuple[int, AllocRecord]:
        version, op, flags, unit, block, bs, span = ALLOC_REC.unpack(raw)
        return version, cls(op, unit, block, bs, span, flags)

    def as_free(self) -> AllocRecord:
        return AllocRecord(OP_FREE, self.unit, self.block, self.block_size, self.span)


@dataclass(eq=False)
class Superblock:
    unit: int
    span: int
    block_size: int
    nblocks: int
    data: int
    meta: int
    free: list[int] = field(default_factory=list)
    used: set[int] = field(default_factory=set)
    owner: int | None = None
    listed: bool = False
    lock: threading.Lock = field(default_factory=threading.Lock)

    def ref(self, idx: int) -> int:
        return self.data + idx * self.block_size

    def word_addr(self, idx: int) -> int:
        return self.meta + SB_HEAD.size + (idx // 64) * 8

    @property
    def occupancy(self) -> float:
        return len(self.used) / self.nblocks


class Allocator:
    def __init__(self, medium, meta_base: int, meta_entry: int, bitmap_bytes: int,
                 heap_base: int, unit_size: int, n_units: int):
        self.medium = medium
        self.meta_base = meta_base
        self.meta_entry = meta_entry
        self.bitmap_bytes = bitmap_bytes
        self.heap_base = heap_base
        self.unit_size = unit_size
        self.n_units = n_units
        self._lock = threading.Lock()
        self._reset()

    def _reset(self):
        self.units: list[Superblock | None] = [None] * self.n_units
        self.shared: dict[int, list[Superblock]] = {}
        self.owned: dict[int, dict[int, list[Superblock]]] = {}

    # -- geometry ---------------------------------------------------------

    def geometry_for(self, payload: int) -> tuple[int, int, int]:
        """(block_size, span, nblocks) for a payload of `payload` bytes."""
        total = payload + OBJ_HDR
        bs = block_size_for(total)
        if bs is None:
            span = -(-total // self.unit_size)
            return span * self.unit_size, span, 1
        span = max(1, -(-MIN_BLOCKS * bs // self.unit_size))
        return bs, span, span * self.unit_size // bs

    def _make_sb(self, unit: int, span: int, bs: int) -> Superblock:
        nblocks = 1 if bs > SIZE_CLASSES[-1] else span * self.unit_size // bs
        sb = Superblock(unit, span, bs, nblocks,
                        data=self.heap_base + unit * self.unit_size,
                        meta=self.meta_base + unit * self.meta_entry)
        for u in range(unit, unit + span):
            self.units[u] = sb
        return sb

    def _format(self, bs: int, span: int) -> Superblock:
        run = 0
        for u in range(self.n_units):
            run = run + 1 if self.units[u] is None else 0
            if run == span:
                sb = self._make_sb(u - span + 1, span, bs)
                sb.free = list(reversed(range(sb.nblocks)))
                return sb
        raise AllocationError(f"heap exhausted: no run of {span} free units for {bs}-byte blocks")

    # -- volatile reservation ---------------------------------------------

    def reserve(self, payload: int, tid: int | None = None) -> AllocRecord:
        """Take a free block for `payload` bytes from the calling thread's heap."""
        tid = threading.get_ident() if tid is None else tid
        bs, span, _ = self.geometry_for(payload)
        with self._lock:
            mine = self.owned.setdefault(tid, {}).setdefault(bs, [])
            if not mine:
                pool = self.shared.setdefault(bs, [])
                sb = None
                while pool:
                    cand = pool.pop()
                    cand.listed = False
                    if cand.free:
                        sb = cand
                        break
                if sb is None:
                    sb = self._format(bs, span)
                sb.owner = tid
                sb.listed = True
                mine.append(sb)
            sb = mine[-1]
            with sb.lock:
                idx = sb.free.pop()
                sb.used.add(idx)
                if not sb.free:
                    mine.pop()
                    sb.listed = False
        return AllocRecord(OP_ALLOC, sb.unit, idx, bs, sb.span)

    def release(self, rec: AllocRecord):
        """Return a block to its superblock's free list."""
        sb = self.units[rec.unit]
        with self._lock:
            with sb.lock:
                if rec.block not in sb.used:
                    return
                sb.used.discard(rec.block)
                sb.free.append(rec.block)
            if sb.owner is not None and sb.occupancy <= 0.5:
                # mostly empty private superblocks go back to the shared pool
                if sb.listed:
                    self.owned[sb.owner][sb.block_size].remove(sb)
                sb.owner = None
                sb.listed = False
            if not sb.listed:
                if sb.owner is None:
                    self.shared.setdefault(sb.block_size, []).append(sb)
                else:
                    self.owned[sb.owner][sb.block_size].append(sb)
                sb.listed = True

    def locate(self, ref: int) -> AllocRecord:
        """Allocation record describing the live block that starts at `ref`."""
        rel = ref - self.heap_base
        if rel < 0 or rel >= self.n_units * self.unit_size:
            raise PmRangeError(f"{ref:#x} is not a heap reference")
        sb = self.units[rel // self.unit_size]
        if sb is None:
            raise PmRangeError(f"{ref:#x} is not inside a superblock")
        off = ref - sb.data
        idx, rem = divmod(off, sb.block_size)
        if rem or idx >= sb.nblocks:
            raise PmRangeError(f"{ref:#x} is not a block boundary")
        if idx not in sb.used:
            raise PmRangeError(f"{ref:#x} is not allocated")
        return AllocRecord(OP_ALLOC, sb.unit, idx, sb.block_size, sb.span)

    def ref_of(self, rec: AllocRecord) -> int:
        return self.heap_base + rec.unit * self.unit_size + rec.block * rec.block_size

    def allocated_refs(self) -> set[int]:
        out = set()
        for sb in self.superblocks():
            out.update(sb.ref(i) for i in sb.used)
        return out

    def superblocks(self) -> list[Superblock]:
        seen = []
        for sb in self.units:
            if sb is not None and (not seen or seen[-1] is not sb):
                seen.append(sb)
        return seen

    # -- persistent bitmap --------------------------------------------------

    def _meta_addr(self, unit: int) -> int:
        return self.meta_base + unit * self.meta_entry

    def _bit_addr(self, rec: AllocRecord) -> tuple[int, int]:
        meta = self._meta_addr(rec.unit)
        return meta + SB_HEAD.size + (rec.block // 64) * 8, 1 << (rec.block % 64)

    def _flip(self, addr: int, bit: int, set_it: bool) -> bool:
        """CAS loop flipping one bitmap bit; False when it already had the target value."""
        cur = int.from_bytes(self.medium.peek(addr, 8), "little")
        while True:
            if bool(cur & bit) == set_it:
                return False
            new = cur | bit if set_it else cur & ~bit
            seen = self.medium.cas(addr, cur, new)
            if seen == cur:
                return True
            cur = seen

    def apply(self, rec: AllocRecord) -> list[tuple[int, int]]:
        """Reflect one log record in the persistent metadata (idempotent).

        Returns the ranges the caller must write back.
        """
        meta = self._meta_addr(rec.unit)
        ranges = []
        if rec.op == OP_ALLOC:
            head = SB_HEAD.pack(rec.block_size, rec.span)
            if self.medium.peek(meta, SB_HEAD.size) != head:
                self.medium.store(meta, head)
                ranges.append((meta, SB_HEAD.size))
        addr, bit = self._bit_addr(rec)
        self._flip(addr, bit, rec.op == OP_ALLOC)
        ranges.append((addr, 8))
        return ranges

    def unapply(self, rec: AllocRecord) -> list[tuple[int, int]]:
        """Undo an eagerly persisted ALLOC."""
        addr, bit = self._bit_addr(rec)
        self._flip(addr, bit, False)
        return [(addr, 8)]

    def persistent_bits(self) -> set[int]:
        """Refs whose persistent bitmap bit is set (tooling and audits)."""
        out = set()
        for sb in self._scan():
            out.update(sb.ref(i) for i in sb.used)
        return out

    def _scan(self) -> list[Superblock]:
        found = []
        u = 0
        med = self.medium
        while u < self.n_units:
            meta = self._meta_addr(u)
            bs, span = SB_HEAD.unpack(med.load(meta, SB_HEAD.size))
            if bs == 0 or span == 0 or u + span > self.n_units:
                u += 1
                continue
            nblocks = 1 if bs > SIZE_CLASSES[-1] else span * self.unit_size // bs
            sb = Superblock(u, span, bs, nblocks, data=self.heap_base + u * self.unit_size, meta=meta)
            nwords = -(-nblocks // 64)
            words = med.load(meta + SB_HEAD.size, nwords * 8)
            for w in range(nwords):
                word = int.from_bytes(words[w * 8:w * 8 + 8], "little")
                while word:
                    low = word & -word
                    idx = w * 64 + low.bit_length() - 1
                    if idx < nblocks:
                        sb.used.add(idx)
                    word ^= low
            sb.free = [i for i in reversed(range(nblocks)) if i not in sb.used]
            found.append(sb)
            u += span
        return found

    def rebuild(self):
        """Reconstruct every volatile list from the persistent bitmaps."""
        with self._lock:
            self._reset()
            for sb in self._scan():
                for u in range(sb.unit, sb.unit + sb.span):
                    self.units[u] = sb
                self.shared.setdefault(sb.block_size, []).append(sb)


def is_eager(rec: AllocRecord) -> bool:
    return bool(rec.flags & FLAG_EAGER)

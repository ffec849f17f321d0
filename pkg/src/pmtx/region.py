"""Persistent regions: layout, creation, recovery on open, root pointer.

Layout, in order: header line, geometry line, descriptor table, log chunk
pool, allocator meta entries (one per heap unit), heap.  References are
region-relative offsets of a block's 32-byte header.

The header's root field points at a small root cell allocated at creation;
the cell's 8-byte payload holds the user root, so updating the root is an
ordinary transactional write.
"""

from __future__ import annotations

import threading
from dataclasses import dataclass

from .alloc import AllocRecord, Allocator, SIZE_CLASSES
from .errors import CapacityError, FormatError, PmRangeError, ResourceExhausted, UsageError
from .layout import (DESC_SIZE, DESC_TABLE_OFF, FORMAT_VERSION, GEOMETRY, GEOMETRY_OFF, HDR_GLOBAL_VERSION,
                     HEADER, MAGIC, OBJ_HDR, OBJ_HEAD, W_OLD, ObjKind, RuntimeKind, TxnState,
                     align)
from .log import ChunkPool
from .simpm import LINE, PersistentMedium
from .txn import DescImage, Txn, line_runs, make_descriptors

FLAG_NAIVE_UNDO = 1
ROOT_SIZE = 8


@dataclass
class RegionConfig:
    n_desc: int = 64
    chunk_size: int = 4096
    n_chunks: int = 256
    unit_size: int = 16384
    alloc_mode: str = "lazy"  # or "eager", the per-call persist baseline
    undo_dedupe: bool = True
    undo_two_barrier: bool = False

    def __post_init__(self):
        if self.alloc_mode not in ("lazy", "eager"):
            raise ValueError(f"unknown alloc_mode {self.alloc_mode!r}")
        if self.n_desc < 1 or self.n_chunks < 1:
            raise ValueError("need at least one descriptor and one log chunk")
        if self.chunk_size % LINE or self.chunk_size < 128:
            raise ValueError("chunk_size must be a multiple of 64 and at least 128")
        if self.unit_size % LINE or self.unit_size < 256:
            raise ValueError("unit_size must be a multiple of 64 and at least 256")


@dataclass(frozen=True)
class Geometry:
    n_desc: int
    chunk_size: int
    n_chunks: int
    unit_size: int
    n_units: int
    flags: int
    chunk_base: int
    heap_base: int
    meta_entry: int
    bitmap_bytes: int

    @property
    def meta_base(self) -> int:
        return self.chunk_base + self.chunk_size * self.n_chunks

    def pack(self) -> bytes:
        return GEOMETRY.pack(self.n_desc, self.chunk_size, self.n_chunks, self.unit_size, self.n_units,
                             self.flags, self.chunk_base, self.heap_base, self.meta_entry, self.bitmap_bytes)

    @classmethod
    def unpack(cls, raw: bytes) -> Geometry:
        return cls(*GEOMETRY.unpack(raw))

    @classmethod
    def plan(cls, size: int, cfg: RegionConfig) -> Geometry:
        chunk_base = align(DESC_TABLE_OFF + cfg.n_desc * DESC_SIZE, LINE)
        meta_base = chunk_base + cfg.chunk_size * cfg.n_chunks
        bitmap_bytes = max(8, -(-cfg.unit_size // SIZE_CLASSES[0] // 64) * 8)
        meta_entry = align(8 + bitmap_bytes, LINE)
        n_units = max(0, (size - meta_base) // (cfg.unit_size + meta_entry))
        while n_units > 0 and align(meta_base + n_units * meta_entry, LINE) + n_units * cfg.unit_size > size:
            n_units -= 1
        if n_units < 1:
            raise CapacityError(f"medium of {size} bytes is too small for this region layout")
        heap_base = align(meta_base + n_units * meta_entry, LINE)
        flags = FLAG_NAIVE_UNDO if cfg.undo_two_barrier else 0
        return cls(cfg.n_desc, cfg.chunk_size, cfg.n_chunks, cfg.unit_size, n_units, flags,
                   chunk_base, heap_base, meta_entry, bitmap_bytes)


def min_region_size(cfg: RegionConfig | None = None) -> int:
    cfg = cfg or RegionConfig()
    g_base = align(DESC_TABLE_OFF + cfg.n_desc * DESC_SIZE, LINE) + cfg.chunk_size * cfg.n_chunks
    bitmap_bytes = max(8, -(-cfg.unit_size // SIZE_CLASSES[0] // 64) * 8)
    return align(g_base + align(8 + bitmap_bytes, LINE), LINE) + cfg.unit_size


def _runtime_class(kind: RuntimeKind):
    from . import cow, redo, undo
    return {RuntimeKind.UNDO: undo.UndoRuntime, RuntimeKind.REDO: redo.RedoRuntime,
            RuntimeKind.COW: cow.CowRuntime}[kind]


class Region:
    """An open region.  Use region_create or region_open to obtain one."""

    def __init__(self, medium: PersistentMedium, kind: RuntimeKind, geom: Geometry,
                 config: RegionConfig):
        self.medium = medium
        self.kind = RuntimeKind(kind)
        self.geom = geom
        self.config = config
        self.naive_undo = bool(geom.flags & FLAG_NAIVE_UNDO)
        self.pool = ChunkPool(geom.chunk_base, geom.chunk_size, geom.n_chunks)
        self.alloc = Allocator(medium, geom.meta_base, geom.meta_entry, geom.bitmap_bytes,
                               geom.heap_base, geom.unit_size, geom.n_units)
        self.descs = make_descriptors(medium, self.pool, geom.n_desc)
        self.sizes: dict[int, int] = {}
        self.root_cell = 0
        self.global_version = 0
        self.on_commit_point = None  # harness hook, called at each transaction's commit point
        self._lock = threading.Lock()
        self.runtime = _runtime_class(self.kind)(self)

    # -- transactions -------------------------------------------------------

    def begin(self) -> Txn:
        with self._lock:
            for d in self.descs:
                if not d.busy:
                    d.busy = True
                    break
            else:
                raise ResourceExhausted(f"all {len(self.descs)} transaction descriptors are busy")
            self.global_version += 1
            version = self.global_version
        return Txn(self, d, version)

    def release_descriptor(self, d):
        with self._lock:
            d.busy = False

    # -- objects --------------------------------------------------------------

    def obj_size(self, ref: int) -> int:
        """Payload size of a live object (volatile metadata; no load is charged)."""
        size = self.sizes.get(ref)
        if size is None:
            self.alloc.locate(ref)
            size, kind, _ = OBJ_HEAD.unpack(self.medium.peek(ref, OBJ_HEAD.size))
            expect = ObjKind.WRAPPER if self.kind is RuntimeKind.COW else ObjKind.PLAIN
            if kind != expect:
                raise PmRangeError(f"{ref:#x} is not an object reference")
            self.sizes[ref] = size
        return size

    def unwrap(self, ref: int) -> int:
        """Offset of the committed payload bytes, for uninstrumented access."""
        self.obj_size(ref)
        if self.kind is RuntimeKind.COW:
            return self.medium.load_u64(ref + W_OLD) + OBJ_HDR
        return ref + OBJ_HDR

    def root_get(self, txn: Txn | None = None) -> int:
        if txn is not None:
            return txn.root_get()
        return self.medium.load_u64(self.unwrap(self.root_cell))

    def root_set(self, txn: Txn | None, ref: int):
        if txn is None or not txn.active:
            raise UsageError("root_set must be called inside a running transaction")
        txn.root_set(ref)

    def valid_alloc(self, rec: AllocRecord) -> bool:
        g = self.geom
        if rec.span < 1 or rec.unit + rec.span > g.n_units or rec.block_size < SIZE_CLASSES[0]:
            return False
        if rec.block_size > SIZE_CLASSES[-1]:
            return rec.block == 0 and rec.block_size == rec.span * g.unit_size
        return rec.block < rec.span * g.unit_size // rec.block_size

    # -- persistence helpers ---------------------------------------------------

    def _flush(self, ranges):
        if self.medium.config.store_persists:
            return
        for a, n in line_runs(ranges):
            self.medium.writeback(a, n)

    def _flush_all_dirty(self):
        if self.medium.config.store_persists:
            return
        runs = line_runs((ln * LINE, LINE) for ln in self.medium.dirty_lines())
        for a, n in runs:
            self.medium.writeback(a, n)
        self.medium.persist_barrier()

    def _write_header(self, root: int, gv: int):
        g = self.geom
        self.medium.store(0, HEADER.pack(MAGIC, FORMAT_VERSION, self.kind, root, g.meta_base,
                                         DESC_TABLE_OFF, gv, self.medium.size))

    # -- recovery ----------------------------------------------------------------

    def recover(self):
        med = self.medium
        rt = self.runtime
        images = [DescImage.parse(d.id, d.addr, med.load(d.addr, DESC_SIZE)) for d in self.descs]
        # A: let the runtime roll each descriptor forward or back
        touched = []
        for di in images:
            if di.state != TxnState.IDLE:
                touched += rt.recover(di)
        self._flush(touched)
        self._flush_all_dirty()
        # B: every descriptor durably idle with empty logs (versions are kept)
        top = self.global_version
        dirty = []
        for d, di in zip(self.descs, images):
            top = max(top, di.version)
            d.state, d.version = TxnState.IDLE, di.version
            d.log.release()
            d.alloc_log.release()
            d.wset.release()
            d.log_tail = d.alloc_count = d.wset_count = 0
            packed = d.pack()
            if med.peek(d.addr, DESC_SIZE) != packed:
                med.store(d.addr, packed)
                dirty.append((d.addr, DESC_SIZE))
        if dirty:
            self._flush(dirty)
            self._flush_all_dirty()
        # C: the log chunks are garbage now; zero them so stale records never resurface
        g = self.geom
        base, span = g.chunk_base, g.chunk_size * g.n_chunks
        area = med.peek(base, span)
        zeroed = []
        if any(area):
            zero_line = bytes(LINE)
            for off in range(0, span, LINE):
                if area[off:off + LINE] != zero_line:
                    med.store(base + off, zero_line)
                    zeroed.append((base + off, LINE))
            self._flush(zeroed)
            self._flush_all_dirty()
        self.pool = ChunkPool(g.chunk_base, g.chunk_size, g.n_chunks)
        for d in self.descs:
            for lg in (d.log, d.alloc_log, d.wset):
                lg.pool = self.pool
        # D: the global version counter never goes backwards
        if med.load_u64(HDR_GLOBAL_VERSION) < top:
            med.store_u64(HDR_GLOBAL_VERSION, top)
            self._flush([(HDR_GLOBAL_VERSION, 8)])
            self._flush_all_dirty()
        self.global_version = max(top, med.load_u64(HDR_GLOBAL_VERSION))
        # rebuild volatile allocator state, then scrub volatile-semantics header fields
        self.alloc.rebuild()
        self.sizes.clear()
        scrubbed = []
        for ref in sorted(self.alloc.allocated_refs()):
            scrubbed += rt.scrub(ref, OBJ_HEAD.unpack(med.load(ref, OBJ_HEAD.size))[1])
        if scrubbed:
            self._flush(scrubbed)
            self._flush_all_dirty()


def region_create(medium: PersistentMedium, kind: RuntimeKind | str,
                  config: RegionConfig | None = None) -> Region:
    """Format `medium` as an empty region and persist it."""
    kind = RuntimeKind[kind.upper()] if isinstance(kind, str) else RuntimeKind(kind)
    config = config or RegionConfig()
    geom = Geometry.plan(medium.size, config)
    med = medium
    # metadata must start out zero; the heap contents do not matter
    meta_end = geom.heap_base
    if any(med.peek(0, meta_end)):
        med.store(0, bytes(meta_end))
    med.store(GEOMETRY_OFF, geom.pack())
    region = Region(medium, kind, geom, config)
    # root cell, allocated directly; no transaction exists yet
    rt = region.runtime
    region.root_cell, ranges = rt.format_root()
    region._flush([(GEOMETRY_OFF, GEOMETRY.size), (0, meta_end)] + ranges)
    region._flush_all_dirty()
    # the magic goes in last: a crash before this barrier leaves no region
    region._write_header(region.root_cell, 0)
    region._flush([(0, HEADER.size)])
    region._flush_all_dirty()
    return region


def region_open(medium: PersistentMedium, kind: RuntimeKind | str | None = None,
                config: RegionConfig | None = None) -> Region:
    """Validate the header, run recovery, and return the usable region."""
    if medium.size < HEADER.size + GEOMETRY_OFF:
        raise FormatError("medium too small to hold a region")
    magic, ver, rkind, root, heap_meta, table, gv, size = HEADER.unpack(medium.load(0, HEADER.size))
    if magic != MAGIC:
        raise FormatError("bad region magic")
    if ver != FORMAT_VERSION:
        raise FormatError(f"unsupported region format version {ver}")
    try:
        rkind = RuntimeKind(rkind)
    except ValueError:
        raise FormatError(f"unknown runtime kind {rkind}") from None
    if kind is not None:
        want = RuntimeKind[kind.upper()] if isinstance(kind, str) else RuntimeKind(kind)
        if want is not rkind:
            raise FormatError(f"region holds a {rkind.name} heap, not {want.name}")
    if size != medium.size or table != DESC_TABLE_OFF:
        raise FormatError("region header does not match the medium")
    geom = Geometry.unpack(medium.load(GEOMETRY_OFF, GEOMETRY.size))
    if (geom.n_desc < 1 or geom.heap_base + geom.n_units * geom.unit_size > size
            or geom.meta_base != heap_meta or geom.chunk_size < 128):
        raise FormatError("corrupt region geometry")
    base = config or RegionConfig()
    config = RegionConfig(geom.n_desc, geom.chunk_size, geom.n_chunks, geom.unit_size,
                          base.alloc_mode, base.undo_dedupe, bool(geom.flags & FLAG_NAIVE_UNDO))
    region = Region(medium, rkind, geom, config)
    region.root_cell = root
    region.global_version = gv
    region.recover()
    return region


__all__ = ["Geometry", "Region", "RegionConfig", "min_region_size", "region_create", "region_open"]

"""Read-only text rendering of region images.

Works on raw image bytes, so the output is a pure function of the image.
The text format carries its own version number alongside the region format.
"""

from __future__ import annotations

import enum
from dataclasses import dataclass

from .alloc import Allocator, AllocRecord
from .errors import FormatError
from .layout import (ALLOC_REC, DESC, DESC_SIZE, DESC_TABLE_OFF, FORMAT_VERSION, GEOMETRY, GEOMETRY_OFF, HEADER,
                     MAGIC, OBJ_HDR, OBJ_HEAD, UNDO_COMMIT, UNDO_DATA, UNDO_HEAD, WRAPPER, WSET_REC,
                     ObjKind, RuntimeKind, TxnState)
from .log import ChunkPool, fixed_walk, walk
from .region import FLAG_NAIVE_UNDO, Geometry
from .redo import log_records as redo_records
from .simpm import PersistentMedium
from .txn import DescImage
from .undo import read_record

DUMP_FORMAT = 1
_MAGIC_TEXT = MAGIC.rstrip(b"\0").decode()


class Section(enum.Enum):
    HEADER = "header"
    DESCRIPTORS = "descriptors"
    UNDO_LOG = "undo-log"
    REDO_LOG = "redo-log"
    BITMAPS = "bitmaps"
    OBJECTS = "objects"
    ALL = "all"


@dataclass(frozen=True)
class DumpSelector:
    section: Section
    n: int | None = None   # descriptor id for the log sections

    @classmethod
    def parse(cls, text: str) -> DumpSelector:
        """Accepts 'objects', 'undo-log 3', 'undo-log:3', 'UNDO_LOG=3' and similar."""
        t = text.strip().lower().replace("_", "-")
        for sep in (":", "="):
            t = t.replace(sep, " ")
        parts = t.split()
        if not parts:
            raise ValueError("empty section")
        try:
            sec = Section(parts[0])
        except ValueError:
            raise ValueError(f"unknown section {parts[0]!r}; expected one of "
                             + ", ".join(s.value for s in Section)) from None
        n = None
        if len(parts) > 2:
            raise ValueError(f"bad section {text!r}")
        if len(parts) == 2:
            if sec not in (Section.UNDO_LOG, Section.REDO_LOG):
                raise ValueError(f"section {sec.value} takes no descriptor number")
            n = int(parts[1], 0)
        return cls(sec, n)


class _Image:
    def __init__(self, image: bytes):
        if len(image) < DESC_TABLE_OFF:
            raise FormatError(f"image of {len(image)} bytes is too short to hold a region header")
        self.medium = PersistentMedium.from_snapshot(bytes(image))
        magic, version, kind, root, heap_meta, txn_table, gv, size = HEADER.unpack(self._raw(0, HEADER.size))
        if magic != MAGIC:
            raise FormatError(f"bad magic {magic!r}")
        if version != FORMAT_VERSION:
            raise FormatError(f"unsupported format version {version}")
        try:
            self.kind = RuntimeKind(kind)
        except ValueError:
            raise FormatError(f"unknown runtime kind {kind}") from None
        self.root, self.heap_meta, self.txn_table, self.global_version, self.size = root, heap_meta, txn_table, gv, size
        self.version = version
        self.geom = Geometry.unpack(self._raw(GEOMETRY_OFF, GEOMETRY.size))
        g = self.geom
        end = g.heap_base + g.n_units * g.unit_size
        if (g.chunk_size <= 0 or g.unit_size <= 0 or end > len(image)
                or DESC_TABLE_OFF + g.n_desc * DESC_SIZE > g.chunk_base):
            raise FormatError("geometry does not fit the image")
        self.pool = ChunkPool(g.chunk_base, g.chunk_size, g.n_chunks)
        self.heap_lo, self.heap_hi = g.heap_base, end

    def _raw(self, addr: int, n: int) -> bytes:
        return self.medium.peek(addr, n)

    def u64(self, addr: int) -> int:
        return int.from_bytes(self._raw(addr, 8), "little")

    def desc(self, i: int) -> DescImage:
        if not 0 <= i < self.geom.n_desc:
            raise ValueError(f"descriptor {i} out of range 0..{self.geom.n_desc - 1}")
        a = DESC_TABLE_OFF + i * DESC_SIZE
        return DescImage.parse(i, a, self._raw(a, DESC.size))

    def allocator(self) -> Allocator:
        g = self.geom
        return Allocator(self.medium, g.meta_base, g.meta_entry, g.bitmap_bytes, g.heap_base, g.unit_size,
                         g.n_units)


def _state(v: int) -> str:
    try:
        return TxnState(v).name
    except ValueError:
        return f"?{v}"


def _header(im: _Image) -> list[str]:
    g = im.geom
    return [
        f"magic {_MAGIC_TEXT} version {im.version}",
        f"runtime {im.kind.name.lower()}",
        f"size {im.size}",
        f"root {im.root:#x}",
        f"global_version {im.global_version}",
        f"descriptors {g.n_desc} at {im.txn_table:#x}",
        f"log_chunks {g.n_chunks} x {g.chunk_size} at {g.chunk_base:#x}",
        f"heap_meta {im.heap_meta:#x} entry {g.meta_entry} bitmap_bytes {g.bitmap_bytes}",
        f"heap {g.n_units} units x {g.unit_size} at {g.heap_base:#x}",
        f"undo_variant {'two-barrier' if g.flags & FLAG_NAIVE_UNDO else 'tail-inference'}",
    ]


def _descriptors(im: _Image) -> list[str]:
    out = []
    for i in range(im.geom.n_desc):
        d = im.desc(i)
        out.append(f"desc {i} state {_state(d.state)} version {d.version} log_tail {d.log_tail} "
                   f"log_head {d.log_head:#x} allocs {d.alloc_count} wset {d.wset_count}")
        for addr in fixed_walk(im.medium, im.pool, d.alloc_head, ALLOC_REC.size, d.alloc_count):
            v, rec = AllocRecord.unpack(im._raw(addr, ALLOC_REC.size))
            op = {1: "ALLOC", 2: "FREE"}.get(rec.op, f"?{rec.op}")
            tag = "" if v == d.version else " STALE"
            out.append(f"  alloc-log {op} unit {rec.unit} block {rec.block} size {rec.block_size} "
                       f"span {rec.span} flags {rec.flags}{tag}")
        if im.kind is RuntimeKind.COW:
            for addr in fixed_walk(im.medium, im.pool, d.wset_head, WSET_REC.size, d.wset_count):
                v, w, backup, new = WSET_REC.unpack(im._raw(addr, WSET_REC.size))
                tag = "" if v == d.version else " STALE"
                out.append(f"  wset wrapper {w:#x} old_backup {backup:#x} new {new:#x}{tag}")
    return out


def _undo_log(im: _Image, i: int) -> list[str]:
    d = im.desc(i)
    naive = bool(im.geom.flags & FLAG_NAIVE_UNDO)
    out = [f"undo-log {i} version {d.version} stored_tail {d.log_tail} state {_state(d.state)}"]
    limit = d.log_tail + 1
    n = 0

    def size_at(addr, room):
        nonlocal n
        if n >= limit or room < UNDO_HEAD.size + 8:
            return None
        rec = read_record(im.medium, addr, room, naive)
        if rec is None:
            return None
        n += 1
        kind = {UNDO_DATA: "DATA", UNDO_COMMIT: "COMMIT"}[rec.kind]
        if rec.version != d.version:
            verdict = "STALE"
        elif rec.valid_sum:
            verdict = "VALID"
        else:
            verdict = "INVALID"
        where = " beyond-tail" if n > d.log_tail else ""
        out.append(f"  #{n - 1} {addr:#x} {kind} target {rec.target:#x} len {rec.length} version {rec.version} "
                   f"csum {rec.checksum:#018x} {verdict}{where}")
        if verdict != "VALID" or rec.kind == UNDO_COMMIT:
            return None
        return rec.size

    for _ in walk(im.medium, im.pool, d.log_head, size_at):
        pass
    out.append(f"  records {n}")
    return out


def _redo_log(im: _Image, i: int) -> list[str]:
    d = im.desc(i)
    out = [f"redo-log {i} version {d.version} records {d.log_tail} state {_state(d.state)}"]
    # the count is only stored at commit, so keep walking while versions match
    recs = redo_records(im.medium, im.pool, d.log_head, d.version, 1 << 32) if d.log_head else []
    for k, r in enumerate(recs):
        where = " beyond-count" if k >= d.log_tail else ""
        out.append(f"  #{k} {r.addr:#x} object {r.base:#x} off {r.offset} len {len(r.data)} prev {r.prev:#x} "
                   f"data {r.data.hex()}{where}")
    if len(recs) < d.log_tail:
        out.append(f"  missing {d.log_tail - len(recs)} record(s) after #{len(recs) - 1}")
    return out


def _bitmaps(im: _Image) -> list[str]:
    out = []
    for sb in im.allocator()._scan():
        bits = "".join("1" if b in sb.used else "0" for b in range(sb.nblocks))
        out.append(f"superblock unit {sb.unit} span {sb.span} block_size {sb.block_size} "
                   f"used {len(sb.used)}/{sb.nblocks}")
        for k in range(0, len(bits), 64):
            out.append(f"  {k:5d} {bits[k:k + 64]}")
    return out


def _objects(im: _Image) -> list[str]:
    out = []
    for ref in sorted(im.allocator().persistent_bits()):
        size, kind, _ = OBJ_HEAD.unpack(im._raw(ref, OBJ_HEAD.size))
        try:
            kname = ObjKind(kind).name
        except ValueError:
            kname = f"?{kind}"
        line = f"{ref:#x} {kname} size {size}"
        if kind == ObjKind.WRAPPER:
            _, _, writer, old, new, backup = WRAPPER.unpack(im._raw(ref, WRAPPER.size))
            line += f" writer {writer} old {old:#x} new {new:#x} old_backup {backup:#x}"
        elif kind == ObjKind.PLAIN:
            line += f" writers {im.u64(ref + 8):#x}"
        if ref == im.root:
            line += " ROOT"
        preview = im._raw(ref + OBJ_HDR, min(size, 16)) if kind != ObjKind.WRAPPER else b""
        if preview:
            line += f" data {preview.hex()}" + ("..." if size > 16 else "")
        out.append(line)
    return out


def dump(source, selector: DumpSelector | str = "all") -> str:
    """Render one section of a region image.

    `source` is raw image bytes, a PersistentMedium (its persistent image is
    used) or a Region.
    """
    if isinstance(selector, str):
        selector = DumpSelector.parse(selector)
    if hasattr(source, "medium"):
        source = source.medium
    if isinstance(source, PersistentMedium):
        source = source.persistent_image
    im = _Image(source)
    sec = selector.section
    lines = [f"# pmtx-dump format {DUMP_FORMAT}"]
    logs = [selector.n] if selector.n is not None else range(im.geom.n_desc)
    if sec in (Section.HEADER, Section.ALL):
        lines += ["[header]"] + _header(im)
    if sec in (Section.DESCRIPTORS, Section.ALL):
        lines += ["[descriptors]"] + _descriptors(im)
    if sec is Section.UNDO_LOG or (sec is Section.ALL and im.kind is RuntimeKind.UNDO):
        if im.kind is not RuntimeKind.UNDO:
            raise ValueError(f"region uses the {im.kind.name.lower()} runtime; it has no undo log")
        for i in logs:
            lines += ["[undo-log]"] + _undo_log(im, i)
    if sec is Section.REDO_LOG or (sec is Section.ALL and im.kind is RuntimeKind.REDO):
        if im.kind is not RuntimeKind.REDO:
            raise ValueError(f"region uses the {im.kind.name.lower()} runtime; it has no redo log")
        for i in logs:
            lines += ["[redo-log]"] + _redo_log(im, i)
    if sec in (Section.BITMAPS, Section.ALL):
        lines += ["[bitmaps]"] + _bitmaps(im)
    if sec in (Section.OBJECTS, Section.ALL):
        lines += ["[objects]"] + _objects(im)
    return "\n".join(lines) + "\n"


def dump_file(path, selector: DumpSelector | str = "all") -> str:
    from .simpm import read_snapshot
    try:
        image = read_snapshot(path)
    except OSError as e:
        raise FormatError(f"cannot read {path}: {e}") from e
    return dump(image, selector)

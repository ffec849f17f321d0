"""Simulated persistent memory.

The medium keeps two byte images.  Loads and stores act on the volatile
image (what the CPU sees); the persistent image is what survives a crash.
A store dirties the cache lines it touches, a writeback captures the line
content and marks it pending, and a persist barrier makes every pending
line durable.  Under PDOM-2 the whole hierarchy is persistent, so stores
land in both images at once.

Only loads and barriers carry modeled latency; writebacks are free and the
barrier absorbs the cost of draining them.
"""

from __future__ import annotations

import enum
import os
import random
import struct
import threading
from dataclasses import dataclass
from typing import Callable, Iterator

from .errors import CapacityError, FormatError, PmRangeError

LINE = 64
ENUMERATE_CAP = 16

_U64 = struct.Struct("<Q")
_SIDECAR = struct.Struct("<6sHHQ")
SIDECAR_MAGIC = b"SIMPM\0"
SIDECAR_VERSION = 1


class Pdom(enum.IntEnum):
    PDOM0 = 0
    PDOM1 = 1
    PDOM2 = 2


class FlushMode(enum.Enum):
    WRITEBACK = "clwb"
    FLUSH_EVICT = "clflushopt"


class LineState(enum.Enum):
    CLEAN = "clean"
    DIRTY = "dirty"
    PENDING = "pending"


class CrashPolicy(enum.Enum):
    DROP_PENDING = "drop"
    KEEP_PENDING = "keep"
    SUBSET = "subset"
    ENUMERATE = "enumerate"


# barrier latencies used to stand in for each persistence domain
DEFAULT_BARRIER_NS = {Pdom.PDOM0: 500, Pdom.PDOM1: 100, Pdom.PDOM2: 0}
DEFAULT_LOAD_NS = 300


@dataclass(frozen=True)
class PdomConfig:
    level: Pdom = Pdom.PDOM1
    barrier_latency: int | None = None
    load_latency: int = DEFAULT_LOAD_NS
    flush_mode: FlushMode = FlushMode.WRITEBACK

    def __post_init__(self):
        object.__setattr__(self, "level", Pdom(self.level))
        if self.barrier_latency is None:
            object.__setattr__(self, "barrier_latency", DEFAULT_BARRIER_NS[self.level])
        if self.barrier_latency < 0 or self.load_latency < 0:
            raise ValueError("latencies must be non-negative")

    @property
    def effective_barrier_ns(self) -> int:
        return 0 if self.level == Pdom.PDOM2 else self.barrier_latency

    @property
    def store_persists(self) -> bool:
        return self.level == Pdom.PDOM2


@dataclass
class CostReport:
    loads: int = 0
    stores: int = 0
    writebacks: int = 0
    barriers: int = 0
    evictions: int = 0
    simulated_time: int = 0

    def __add__(self, other: CostReport) -> CostReport:
        return CostReport(*(a + b for a, b in zip(self._tuple(), other._tuple())))

    def __sub__(self, other: CostReport) -> CostReport:
        return CostReport(*(a - b for a, b in zip(self._tuple(), other._tuple())))

    def _tuple(self):
        return (self.loads, self.stores, self.writebacks, self.barriers,
                self.evictions, self.simulated_time)


@dataclass(frozen=True)
class CrashState:
    """Persistent image plus the lines whose fate is undecided at a crash."""

    base: bytes
    pending: tuple[tuple[int, bytes], ...] = ()

    @property
    def n_pending(self) -> int:
        return len(self.pending)

    def image(self, mask: int) -> bytes:
        """Snapshot where pending line i persisted iff bit i of mask is set."""
        if not mask:
            return self.base
        buf = bytearray(self.base)
        for i, (line, snap) in enumerate(self.pending):
            if mask >> i & 1:
                buf[line * LINE:line * LINE + LINE] = snap
        return bytes(buf)

    def masks(self, cap: int = ENUMERATE_CAP, samples: int = 256,
              rng: random.Random | None = None) -> list[int]:
        k = len(self.pending)
        if k <= cap:
            return list(range(1 << k))
        rng = rng or random.Random(0)
        full = (1 << k) - 1
        picked = {0, full}
        while len(picked) < samples:
            picked.add(rng.getrandbits(k))
        return sorted(picked)


class PersistentMedium:
    """Byte-addressable persistent medium with cache-line persistence state."""

    def __init__(self, size: int, config: PdomConfig | None = None,
                 image: bytes | None = None, enumerate_cap: int = ENUMERATE_CAP):
        if size <= 0 or size % LINE:
            raise ValueError("medium size must be a positive multiple of 64")
        self.size = size
        self.config = config or PdomConfig()
        self.enumerate_cap = enumerate_cap
        if image is not None:
            if len(image) != size:
                raise ValueError("image size mismatch")
            self._vol = bytearray(image)
            self._pers = bytearray(image)
        else:
            self._vol = bytearray(size)
            self._pers = bytearray(size)
        self._dirty: set[int] = set()
        self._pending: dict[int, bytes] = {}
        self._lock = threading.RLock()
        self._counters: dict[int, list[int]] = {}
        # called as observer(op) after every operation that can change crash state
        self.observer: Callable[[str], None] | None = None

    # -- accounting -------------------------------------------------------

    def _tally(self, slot: int, n: int = 1):
        tid = threading.get_ident()
        c = self._counters.get(tid)
        if c is None:
            c = self._counters[tid] = [0, 0, 0, 0, 0]
        c[slot] += n

    def _report(self, counts) -> CostReport:
        loads, stores, wbs, barriers, evictions = counts
        t = loads * self.config.load_latency + barriers * self.config.effective_barrier_ns
        return CostReport(loads, stores, wbs, barriers, evictions, t)

    def cost_report(self, thread: int | None = None) -> CostReport:
        """Aggregate counters, or one thread's counters when `thread` is given."""
        with self._lock:
            if thread is not None:
                return self._report(self._counters.get(thread, [0] * 5))
            total = [0] * 5
            for c in self._counters.values():
                for i, v in enumerate(c):
                    total[i] += v
            return self._report(total)

    def thread_report(self) -> CostReport:
        return self.cost_report(threading.get_ident())

    def reset_counters(self):
        with self._lock:
            self._counters.clear()

    # -- instructions -----------------------------------------------------

    def _check(self, addr: int, n: int):
        if addr < 0 or n < 0 or addr + n > self.size:
            raise PmRangeError(f"access [{addr:#x}, +{n}) outside medium of {self.size} bytes")

    def store(self, addr: int, data: bytes):
        n = len(data)
        with self._lock:
            self._check(addr, n)
            self._vol[addr:addr + n] = data
            if self.config.store_persists:
                self._pers[addr:addr + n] = data
            elif n:
                self._dirty.update(range(addr // LINE, (addr + n - 1) // LINE + 1))
            self._tally(1)
            if self.observer:
                self.observer("store")

    def load(self, addr: int, n: int) -> bytes:
        with self._lock:
            self._check(addr, n)
            self._tally(0)
            return bytes(self._vol[addr:addr + n])

    def writeback(self, addr: int, n: int):
        with self._lock:
            self._check(addr, n)
            if self.config.store_persists or not n:
                return
            first, last = addr // LINE, (addr + n - 1) // LINE
            nlines = last - first + 1
            for line in range(first, last + 1):
                if line in self._dirty:
                    self._dirty.discard(line)
                    self._pending[line] = bytes(self._vol[line * LINE:line * LINE + LINE])
            self._tally(2, nlines)
            if self.config.flush_mode is FlushMode.FLUSH_EVICT:
                self._tally(4, nlines)
            if self.observer:
                self.observer("writeback")

    def persist_barrier(self):
        with self._lock:
            for line, snap in self._pending.items():
                self._pers[line * LINE:line * LINE + LINE] = snap
            self._pending.clear()
            self._tally(3)
            if self.observer:
                self.observer("barrier")

    def cas(self, addr: int, expected: int, new: int) -> int:
        """Atomic compare-and-swap on an aligned u64; returns the observed value."""
        with self._lock:
            self._check(addr, 8)
            cur = _U64.unpack_from(self._vol, addr)[0]
            self._tally(1)
            if cur == expected:
                packed = _U64.pack(new)
                self._vol[addr:addr + 8] = packed
                if self.config.store_persists:
                    self._pers[addr:addr + 8] = packed
                else:
                    self._dirty.add(addr // LINE)
            if self.observer:
                self.observer("cas")
            return cur

    def fetch_or(self, addr: int, mask: int) -> int:
        with self._lock:
            self._check(addr, 8)
            cur = _U64.unpack_from(self._vol, addr)[0]
            self._rmw(addr, cur | mask)
            return cur

    def fetch_and(self, addr: int, mask: int) -> int:
        with self._lock:
            self._check(addr, 8)
            cur = _U64.unpack_from(self._vol, addr)[0]
            self._rmw(addr, cur & mask)
            return cur

    def _rmw(self, addr: int, value: int):
        packed = _U64.pack(value)
        self._vol[addr:addr + 8] = packed
        if self.config.store_persists:
            self._pers[addr:addr + 8] = packed
        else:
            self._dirty.add(addr // LINE)
        self._tally(1)
        if self.observer:
            self.observer("rmw")

    # convenience accessors built on the instructions above
    def load_u64(self, addr: int) -> int:
        return _U64.unpack(self.load(addr, 8))[0]

    def store_u64(self, addr: int, value: int):
        self.store(addr, _U64.pack(value))

    # -- inspection -------------------------------------------------------

    def line_state(self, line: int) -> LineState:
        if line in self._pending:
            return LineState.PENDING
        if line in self._dirty:
            return LineState.DIRTY
        return LineState.CLEAN

    def is_dirty(self, line: int) -> bool:
        return line in self._dirty

    def dirty_lines(self) -> list[int]:
        return sorted(self._dirty)

    def pending_lines(self) -> list[int]:
        return sorted(self._pending)

    @property
    def volatile_image(self) -> bytes:
        return bytes(self._vol)

    @property
    def persistent_image(self) -> bytes:
        return bytes(self._pers)

    def peek(self, addr: int, n: int) -> bytes:
        """Read the volatile image without charging a load (tooling only)."""
        return bytes(self._vol[addr:addr + n])

    # -- crashes ----------------------------------------------------------

    def crash_state(self) -> CrashState:
        with self._lock:
            pending = tuple(sorted(self._pending.items()))
            return CrashState(bytes(self._pers), pending)

    def crash(self, policy: CrashPolicy = CrashPolicy.DROP_PENDING,
              mask: int = 0) -> bytes | Iterator[bytes]:
        """Return the image a crash right now could leave behind.

        DIRTY lines always keep their old persistent content.  PENDING lines
        are dropped, kept, or chosen per `mask` (bit i ↔ i-th pending line in
        ascending line order).  ENUMERATE returns an iterator over all 2^k
        images and raises CapacityError when k exceeds the enumeration cap.
        """
        state = self.crash_state()
        if policy is CrashPolicy.DROP_PENDING:
            return state.image(0)
        if policy is CrashPolicy.KEEP_PENDING:
            return state.image((1 << state.n_pending) - 1)
        if policy is CrashPolicy.SUBSET:
            return state.image(mask)
        if state.n_pending > self.enumerate_cap:
            raise CapacityError(
                f"{state.n_pending} pending lines exceed enumeration cap {self.enumerate_cap}")
        return (state.image(m) for m in range(1 << state.n_pending))

    @classmethod
    def from_snapshot(cls, image: bytes, config: PdomConfig | None = None) -> PersistentMedium:
        """A freshly powered-on medium holding `image` in both views."""
        return cls(len(image), config, image=image)

    # -- file backing -----------------------------------------------------

    def save(self, path: str | os.PathLike):
        write_snapshot(path, self.persistent_image)

    @classmethod
    def from_file(cls, path: str | os.PathLike, config: PdomConfig | None = None) -> PersistentMedium:
        return cls.from_snapshot(read_snapshot(path), config)


def sidecar_path(path: str | os.PathLike) -> str:
    return os.fspath(path) + ".meta"


def write_snapshot(path: str | os.PathLike, image: bytes):
    """Write raw image bytes plus the little-endian sidecar header."""
    with open(path, "wb") as f:
        f.write(image)
    with open(sidecar_path(path), "wb") as f:
        f.write(_SIDECAR.pack(SIDECAR_MAGIC, SIDECAR_VERSION, LINE, len(image)))


def read_snapshot(path: str | os.PathLike) -> bytes:
    with open(path, "rb") as f:
        image = f.read()
    meta = sidecar_path(path)
    if os.path.exists(meta):
        with open(meta, "rb") as f:
            raw = f.read(_SIDECAR.size)
        if len(raw) != _SIDECAR.size:
            raise FormatError("truncated sidecar header")
        magic, version, line, size = _SIDECAR.unpack(raw)
        if magic != SIDECAR_MAGIC or version != SIDECAR_VERSION or line != LINE:
            raise FormatError("bad sidecar header")
        if size != len(image):
            raise FormatError(f"sidecar says {size} bytes, image has {len(image)}")
    return image


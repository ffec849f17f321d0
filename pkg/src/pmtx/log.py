"""Chunked persistent lists used for undo/redo logs, allocation logs and write sets.

A descriptor keeps the chunks it has used across transactions and rewrites
them from the start each time; chunks only go back to the shared pool when
recovery has made every descriptor durably idle.  Records never straddle a
chunk boundary: a writer that runs out of room stamps SKIP_MARK (when there
is space for it) and moves to the next chunk.
"""

from __future__ import annotations

import threading
from typing import Callable, Iterator

from .errors import CapacityError
from .layout import CHUNK_HDR, SKIP_MARK



class ChunkPool:
    def __init__(self, base: int, chunk_size: int, n_chunks: int):
        self.base = base
        self.chunk_size = chunk_size
        self.n_chunks = n_chunks
        self._lock = threading.Lock()
        self._free = [base + i * chunk_size for i in reversed(range(n_chunks))]

    def take(self) -> int:
        with self._lock:
            if not self._free:
                raise CapacityError("log chunk pool exhausted")
            return self._free.pop()

    def is_chunk(self, off: int) -> bool:
        rel = off - self.base
        return 0 <= rel < self.chunk_size * self.n_chunks and rel % self.chunk_size == 0

    @property
    def n_free(self) -> int:
        return len(self._free)


class ChunkedLog:
    """Writer side of one descriptor-owned chunked list."""

    def __init__(self, medium, pool: ChunkPool, head_addr: int):
        self.medium = medium
        self.pool = pool
        self.head_addr = head_addr
        self.chunks: list[int] = []
        self._ci = 0
        self._pos = CHUNK_HDR
        self._extra: list[tuple[int, int]] = []

    @property
    def head(self) -> int:
        return self.chunks[0] if self.chunks else 0

    def reset(self):
        self._ci = 0
        self._pos = CHUNK_HDR
        self._extra = []

    def _new_chunk(self) -> int:
        c = self.pool.take()
        self.medium.store_u64(c, 0)
        self._extra.append((c, 8))
        if self.chunks:
            self.medium.store_u64(self.chunks[-1], c)
            self._extra.append((self.chunks[-1], 8))
        else:
            self.medium.store_u64(self.head_addr, c)
            self._extra.append((self.head_addr, 8))
        self.chunks.append(c)
        return c

    def reserve(self, size: int) -> int:
        """Room for a `size`-byte record; returns its medium address."""
        cs = self.pool.chunk_size
        if size > cs - CHUNK_HDR:
            raise CapacityError(f"record of {size} bytes exceeds chunk payload {cs - CHUNK_HDR}")
        if not self.chunks:
            self._new_chunk()
        if self._pos + size > cs:
            if cs - self._pos >= 8:
                addr = self.chunks[self._ci] + self._pos
                self.medium.store_u64(addr, SKIP_MARK)
                self._extra.append((addr, 8))
            self._ci += 1
            if self._ci == len(self.chunks):
                self._new_chunk()
            self._pos = CHUNK_HDR
        addr = self.chunks[self._ci] + self._pos
        self._pos += size
        return addr

    def take_extra(self) -> list[tuple[int, int]]:
        """Link, head and skip-mark stores that must persist with the next record."""
        extra, self._extra = self._extra, []
        return extra

    def release(self):
        self.chunks = []
        self.reset()


def walk(medium, pool: ChunkPool, head: int,
         size_at: Callable[[int, int], int | None]) -> Iterator[int]:
    """Yield record addresses from a persisted chunked list.

    `size_at(addr, room)` returns the size of the record at addr or None to
    stop.  Iteration also stops at a missing or implausible chunk link.
    """
    cs = pool.chunk_size
    chunk = head
    seen = set()
    while chunk and pool.is_chunk(chunk) and chunk not in seen:
        seen.add(chunk)
        pos = CHUNK_HDR
        while True:
            room = cs - pos
            if room < 8:
                break
            addr = chunk + pos
            if medium.load_u64(addr) == SKIP_MARK:
                break
            size = size_at(addr, room)
            if size is None:
                return
            yield addr
            pos += size
        chunk = medium.load_u64(chunk)


def fixed_walk(medium, pool: ChunkPool, head: int, rec_size: int, count: int) -> Iterator[int]:
    """Addresses of the first `count` fixed-size records of a list."""
    if count <= 0:
        return
    n = 0
    cs = pool.chunk_size
    chunk = head
    seen = set()
    while chunk and pool.is_chunk(chunk) and chunk not in seen:
        seen.add(chunk)
        pos = CHUNK_HDR
        while cs - pos >= rec_size:
            addr = chunk + pos
            yield addr
            n += 1
            if n == count:
                return
            pos += rec_size
        chunk = medium.load_u64(chunk)

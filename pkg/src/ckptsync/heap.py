"""Page-granular managed heap.

Applications allocate into a single flat byte space carved into extents.
Every extent starts with an in-page header (magic, status, capacity,
length), so the heap tiles its whole address space with alternating live
and free extents. All mutation goes through a write barrier that records
dirty pages, and a per-page live count tracks which pages still hold at
least one live allocation. A checkpoint agent can stop the world: every
mutator parks at an API-call boundary (the safepoint) holding no heap
lock, which freezes page contents and bookkeeping until the world is
restarted.

The allocator's extent table can be serialized into a heap-resident
allocation (`flush_metadata`), so a dump of live pages carries everything
needed to rebuild the allocator on another machine (`from_image`).
"""

from __future__ import annotations

import hashlib
import struct
import threading
from dataclasses import dataclass

from .errors import (
    DoubleFree,
    InvalidRef,
    OutOfBounds,
    OutOfMemory,
    SafepointTimeout,
    WorldNotStopped,
)

_HEADER = struct.Struct("<IIQQ")  # magic, status, capacity, length
HEADER_SIZE = _HEADER.size

_EXTENT_MAGIC = 0x544E5458
_ST_FREE = 0
_ST_LIVE = 1

# Serialized extent table: header + one record per extent, sorted by start.
_TABLE_HEADER = struct.Struct("<IQ")  # magic, extent count
_TABLE_ENTRY = struct.Struct("<QQQI")  # start, capacity, length, live flag
_TABLE_MAGIC = 0x4C425458

_MIN_SPLIT = HEADER_SIZE + 8


def _align8(n: int) -> int:
    return (n + 7) & ~7


@dataclass(frozen=True)
class ObjectRef:
    """Byte offset of an allocation's payload; stable across checkpoint/restore."""

    offset: int


@dataclass(frozen=True)
class HeapConfig:
    page_size: int = 4096
    initial_pages: int = 64
    max_pages: int = 4096
    stop_timeout: float = 10.0

    def __post_init__(self):
        if self.page_size < 256 or self.page_size & (self.page_size - 1):
            raise ValueError("page_size must be a power of two >= 256")
        if self.initial_pages < 1 or self.initial_pages > self.max_pages:
            raise ValueError("need 1 <= initial_pages <= max_pages")


class ManagedHeap:
    """Thread-safe page heap with dirty/live tracking and a stop-the-world gate."""

    def __init__(self, config: HeapConfig | None = None):
        self.config = config or HeapConfig()
        psz = self.config.page_size
        self._mem = bytearray(self.config.initial_pages * psz)
        self._extents: dict[int, list] = {}  # start -> [capacity, length, live]
        self._ends: dict[int, int] = {}  # extent end offset -> start
        self._free: list[int] = []  # starts of free extents, sorted
        self._live_count = [0] * self.config.initial_pages
        self._live_pages: set[int] = set()
        self._dirty: set[int] = set()
        self.epoch = 0
        self._lock = threading.RLock()
        self._cond = threading.Condition(self._lock)
        self._world_stopped = False
        self._agent_ident: int | None = None
        self._meta_start: int | None = None
        self._extents_version = 0
        self._flushed_version = -1
        self._flushed_result: tuple[ObjectRef, int] | None = None
        self._new_extent(0, len(self._mem) - HEADER_SIZE, 0, False)

    # -- construction from a checkpoint ---------------------------------

    @classmethod
    def from_image(
        cls,
        page_size: int,
        total_pages: int,
        pages: dict[int, bytes],
        table_offset: int,
        table_length: int,
        *,
        epoch: int = 0,
        max_pages: int | None = None,
        stop_timeout: float = 10.0,
    ) -> "ManagedHeap":
        """Rebuild a heap from dumped page payloads plus its serialized extent table.

        Pages absent from `pages` are zero-filled; they can only be dead space,
        so stale content there is unreachable.
        """
        cfg = HeapConfig(
            page_size=page_size,
            initial_pages=total_pages,
            max_pages=max(max_pages or total_pages, total_pages),
            stop_timeout=stop_timeout,
        )
        self = cls.__new__(cls)
        self.config = cfg
        self._mem = bytearray(total_pages * page_size)
        for idx, payload in pages.items():
            if idx >= total_pages or len(payload) != page_size:
                raise ValueError(f"page {idx} does not fit heap of {total_pages} pages")
            self._mem[idx * page_size:(idx + 1) * page_size] = payload
        self._extents = {}
        self._ends = {}
        self._free = []
        self._live_count = [0] * total_pages
        self._live_pages = set()
        self._dirty = set()
        self.epoch = epoch
        self._lock = threading.RLock()
        self._cond = threading.Condition(self._lock)
        self._world_stopped = False
        self._agent_ident = None
        self._meta_start = None
        self._extents_version = 0
        self._flushed_version = -1
        self._flushed_result = None

        raw = bytes(self._mem[table_offset:table_offset + table_length])
        if len(raw) < _TABLE_HEADER.size:
            raise ValueError("extent table out of heap bounds")
        magic, count = _TABLE_HEADER.unpack_from(raw)
        if magic != _TABLE_MAGIC:
            raise ValueError("bad extent table magic")
        if len(raw) != _TABLE_HEADER.size + count * _TABLE_ENTRY.size:
            raise ValueError("extent table length mismatch")
        cursor = 0
        off = _TABLE_HEADER.size
        for _ in range(count):
            start, cap, length, flags = _TABLE_ENTRY.unpack_from(raw, off)
            off += _TABLE_ENTRY.size
            if start != cursor:
                raise ValueError("extent table does not tile the heap")
            live = bool(flags & 1)
            self._extents[start] = [cap, length, live]
            end = start + HEADER_SIZE + cap
            self._ends[end] = start
            if live:
                self._bump_live(start, cap, +1)
            else:
                self._free.append(start)
            cursor = end
        if cursor != len(self._mem):
            raise ValueError("extent table does not cover the heap")
        meta_start = table_offset - HEADER_SIZE
        ext = self._extents.get(meta_start)
        if ext is None or not ext[2] or ext[1] != table_length:
            raise ValueError("extent table is not a live allocation")
        self._meta_start = meta_start
        # the parsed table matches the heap bytes by construction
        self._flushed_version = self._extents_version
        self._flushed_result = (ObjectRef(table_offset), table_length)
        return self

    # -- internals -------------------------------------------------------

    def _park(self):
        # Mutators wait here while the world is stopped; the agent passes through.
        while self._world_stopped and threading.get_ident() != self._agent_ident:
            self._cond.wait()

    def _raw_write(self, off: int, data: bytes):
        n = len(data)
        if n == 0:
            return
        self._mem[off:off + n] = data
        psz = self.config.page_size
        self._dirty.update(range(off // psz, (off + n - 1) // psz + 1))

    def _write_header(self, start: int, status: int, cap: int, length: int):
        self._raw_write(start, _HEADER.pack(_EXTENT_MAGIC, status, cap, length))

    def _bump_live(self, start: int, cap: int, delta: int):
        psz = self.config.page_size
        end = start + HEADER_SIZE + cap
        for p in range(start // psz, (end - 1) // psz + 1):
            c = self._live_count[p] + delta
            self._live_count[p] = c
            if delta > 0 and c == delta:
                self._live_pages.add(p)
            elif delta < 0 and c == 0:
                self._live_pages.discard(p)

    def _new_extent(self, start: int, cap: int, length: int, live: bool):
        self._extents_version += 1
        self._extents[start] = [cap, length, live]
        self._ends[start + HEADER_SIZE + cap] = start
        self._write_header(start, _ST_LIVE if live else _ST_FREE, cap, length)
        if live:
            self._bump_live(start, cap, +1)
        else:
            self._free_insort(start)

    def _free_insort(self, start: int):
        import bisect

        bisect.insort(self._free, start)

    def _free_remove(self, start: int):
        import bisect

        i = bisect.bisect_left(self._free, start)
        assert i < len(self._free) and self._free[i] == start
        del self._free[i]

    def _find_free(self, cap: int) -> int | None:
        for s in self._free:
            if self._extents[s][0] >= cap:
                return s
        return None

    def _grow_for(self, cap_req: int):
        psz = self.config.page_size
        old_pages = len(self._mem) // psz
        old_end = old_pages * psz
        trailing = self._ends.get(old_end)
        if trailing is not None and not self._extents[trailing][2]:
            shortfall = cap_req - self._extents[trailing][0]
        else:
            trailing = None
            shortfall = cap_req + HEADER_SIZE
        add_pages = max(1, -(-shortfall // psz))
        if old_pages + add_pages > self.config.max_pages:
            raise OutOfMemory(
                f"allocation of {cap_req} bytes needs {add_pages} more pages; "
                f"heap capped at {self.config.max_pages}"
            )
        self._mem.extend(bytes(add_pages * psz))
        self._live_count.extend([0] * add_pages)
        added = add_pages * psz
        if trailing is not None:
            ext = self._extents[trailing]
            self._extents_version += 1
            del self._ends[old_end]
            ext[0] += added
            self._ends[trailing + HEADER_SIZE + ext[0]] = trailing
            self._write_header(trailing, _ST_FREE, ext[0], 0)
        else:
            self._new_extent(old_end, added - HEADER_SIZE, 0, False)

    def _alloc_locked(self, size: int) -> ObjectRef:
        cap_req = _align8(size)
        start = self._find_free(cap_req)
        if start is None:
            self._grow_for(cap_req)
            start = self._find_free(cap_req)
            if start is None:  # pragma: no cover - growth guarantees a fit
                raise OutOfMemory("no extent fits after growth")
        cap_free = self._extents[start][0]
        self._free_remove(start)
        self._extents_version += 1
        old_end = start + HEADER_SIZE + cap_free
        if cap_free - cap_req >= _MIN_SPLIT:
            split = start + HEADER_SIZE + cap_req
            del self._ends[old_end]
            self._extents[start] = [cap_req, size, True]
            self._ends[split] = start
            self._new_extent(split, cap_free - cap_req - HEADER_SIZE, 0, False)
            cap = cap_req
        else:
            cap = cap_free
            self._extents[start] = [cap, size, True]
        self._write_header(start, _ST_LIVE, cap, size)
        self._raw_write(start + HEADER_SIZE, bytes(cap))
        self._bump_live(start, cap, +1)
        return ObjectRef(start + HEADER_SIZE)

    def _free_locked(self, ref: ObjectRef):
        start = ref.offset - HEADER_SIZE
        ext = self._extents.get(start)
        if ext is None:
            raise InvalidRef(f"no allocation at offset {ref.offset}")
        cap, _length, live = ext
        if not live:
            raise DoubleFree(f"extent at offset {ref.offset} is already free")
        self._raw_write(start + HEADER_SIZE, bytes(cap))
        self._bump_live(start, cap, -1)
        self._extents_version += 1
        del self._extents[start]
        lo = start
        hi = start + HEADER_SIZE + cap
        del self._ends[hi]
        nxt = self._extents.get(hi)
        if nxt is not None and not nxt[2]:
            self._free_remove(hi)
            nxt_end = hi + HEADER_SIZE + nxt[0]
            del self._extents[hi]
            del self._ends[nxt_end]
            self._raw_write(hi, bytes(HEADER_SIZE))
            hi = nxt_end
        prev = self._ends.get(lo)
        if prev is not None and not self._extents[prev][2]:
            self._free_remove(prev)
            del self._extents[prev]
            del self._ends[lo]
            self._raw_write(lo, bytes(HEADER_SIZE))
            lo = prev
        self._new_extent(lo, hi - lo - HEADER_SIZE, 0, False)

    # -- mutator API -----------------------------------------------------

    def alloc(self, size: int) -> ObjectRef:
        """Allocate `size` bytes; the extent is zeroed, its pages marked dirty and live."""
        if size <= 0:
            raise ValueError("allocation size must be positive")
        with self._lock:
            self._park()
            return self._alloc_locked(size)

    def free(self, ref: ObjectRef):
        """Return an allocation to the free list; freed bytes are zeroed."""
        with self._lock:
            self._park()
            self._free_locked(ref)

    def write(self, ref: ObjectRef, at: int, data: bytes):
        with self._lock:
            self._park()
            ext = self._extents.get(ref.offset - HEADER_SIZE)
            if ext is None or not ext[2]:
                raise InvalidRef(f"no live allocation at offset {ref.offset}")
            if at < 0 or at + len(data) > ext[1]:
                raise OutOfBounds(f"write [{at}, {at + len(data)}) exceeds length {ext[1]}")
            self._raw_write(ref.offset + at, bytes(data))

    def read(self, ref: ObjectRef, at: int, length: int) -> bytes:
        with self._lock:
            self._park()
            ext = self._extents.get(ref.offset - HEADER_SIZE)
            if ext is None or not ext[2]:
                raise InvalidRef(f"no live allocation at offset {ref.offset}")
            if at < 0 or length < 0 or at + length > ext[1]:
                raise OutOfBounds(f"read [{at}, {at + length}) exceeds length {ext[1]}")
            return bytes(self._mem[ref.offset + at:ref.offset + at + length])

    def allocation_size(self, ref: ObjectRef) -> int:
        with self._lock:
            self._park()
            ext = self._extents.get(ref.offset - HEADER_SIZE)
            if ext is None or not ext[2]:
                raise InvalidRef(f"no live allocation at offset {ref.offset}")
            return ext[1]

    # -- stop-the-world gate ----------------------------------------------

    def stop_world(self):
        """Park all mutators at safepoints. Only the checkpoint agent calls this."""
        if not self._lock.acquire(timeout=self.config.stop_timeout):
            raise SafepointTimeout(
                f"mutators did not reach a safepoint within {self.config.stop_timeout}s"
            )
        try:
            if self._world_stopped:
                raise WorldNotStopped("world is already stopped")
            self._world_stopped = True
            self._agent_ident = threading.get_ident()
        finally:
            self._lock.release()

    def start_world(self):
        with self._lock:
            if not self._world_stopped:
                raise WorldNotStopped("world is not stopped")
            self._world_stopped = False
            self._agent_ident = None
            self._cond.notify_all()

    @property
    def world_stopped(self) -> bool:
        return self._world_stopped

    # -- checkpoint-side queries ------------------------------------------

    def dirty_pages(self) -> frozenset[int]:
        """Pages written since the last reset. Advisory unless the world is stopped."""
        with self._lock:
            return frozenset(self._dirty)

    def live_pages(self) -> frozenset[int]:
        """Pages overlapped by at least one live allocation."""
        with self._lock:
            return frozenset(self._live_pages)

    def reset_dirty(self):
        with self._lock:
            if not self._world_stopped:
                raise WorldNotStopped("reset_dirty requires a stopped world")
            self._dirty.clear()
            self.epoch += 1

    @property
    def page_size(self) -> int:
        return self.config.page_size

    @property
    def page_count(self) -> int:
        return len(self._mem) // self.config.page_size

    def read_page(self, index: int) -> bytes:
        psz = self.config.page_size
        if index < 0 or index >= self.page_count:
            raise OutOfBounds(f"page {index} of {self.page_count}")
        with self._lock:
            return bytes(self._mem[index * psz:(index + 1) * psz])

    def live_hash(self) -> str:
        """SHA-256 over (index, content) of all live pages, in index order."""
        with self._lock:
            h = hashlib.sha256()
            psz = self.config.page_size
            for p in sorted(self._live_pages):
                h.update(p.to_bytes(8, "little"))
                h.update(self._mem[p * psz:(p + 1) * psz])
            return h.hexdigest()

    def live_bytes(self) -> int:
        with self._lock:
            return sum(
                HEADER_SIZE + e[1] for e in self._extents.values() if e[2]
            )

    def alloc_table(self) -> dict[ObjectRef, tuple[int, bool]]:
        with self._lock:
            return {
                ObjectRef(s + HEADER_SIZE): (e[1], True)
                for s, e in self._extents.items()
                if e[2]
            }

    def free_extents(self) -> list[tuple[int, int]]:
        with self._lock:
            return [(s, self._extents[s][0]) for s in self._free]

    def extents(self) -> list[tuple[int, int, int, bool]]:
        """All extents as (start, capacity, length, live), sorted by start."""
        with self._lock:
            return sorted(
                (s, e[0], e[1], e[2]) for s, e in self._extents.items()
            )

    # -- heap-resident allocator metadata ----------------------------------

    def flush_metadata(self) -> tuple[ObjectRef, int]:
        """Serialize the extent table into a live heap allocation.

        Rewrites nothing when the table is unchanged, so an idle heap stays
        clean. Returns the table's payload ref and byte length.
        """
        with self._lock:
            self._park()
            if (
                self._flushed_result is not None
                and self._flushed_version == self._extents_version
            ):
                return self._flushed_result
            while True:
                need = _TABLE_HEADER.size + _TABLE_ENTRY.size * len(self._extents)
                if self._meta_start is not None:
                    if self._extents[self._meta_start][0] >= need:
                        break
                old = self._meta_start
                ref = self._alloc_locked(max(2 * need, 512))
                self._meta_start = ref.offset - HEADER_SIZE
                if old is not None:
                    self._free_locked(ObjectRef(old + HEADER_SIZE))
            start = self._meta_start
            ext = self._extents[start]
            if ext[1] != need:
                self._extents_version += 1
                ext[1] = need
                self._write_header(start, _ST_LIVE, ext[0], need)
            parts = [_TABLE_HEADER.pack(_TABLE_MAGIC, len(self._extents))]
            pack = _TABLE_ENTRY.pack
            for s in sorted(self._extents):
                cap, length, live = self._extents[s]
                parts.append(pack(s, cap, length, 1 if live else 0))
            blob = b"".join(parts)
            payload = start + HEADER_SIZE
            if self._mem[payload:payload + len(blob)] != blob:
                self._raw_write(payload, blob)
            self._flushed_version = self._extents_version
            self._flushed_result = (ObjectRef(payload), need)
            return self._flushed_result

    # -- debugging ---------------------------------------------------------

    def set_dirty_pages(self, pages):
        """Overwrite the dirty map. For side-effect-free dump helpers only."""
        with self._lock:
            self._dirty = set(pages)

    def verify_integrity(self, check_headers: bool = True):
        """Assert tiling, index, and liveness invariants; raises AssertionError."""
        with self._lock:
            total = len(self._mem)
            cursor = 0
            frees = []
            counts = [0] * self.page_count
            psz = self.config.page_size
            for start in sorted(self._extents):
                cap, length, live = self._extents[start]
                assert start == cursor, f"gap/overlap at {cursor} vs {start}"
                end = start + HEADER_SIZE + cap
                assert self._ends.get(end) == start
                if check_headers:
                    magic, status, hcap, hlen = _HEADER.unpack_from(self._mem, start)
                    assert magic == _EXTENT_MAGIC, f"bad header magic at {start}"
                    assert status == (_ST_LIVE if live else _ST_FREE)
                    assert hcap == cap and hlen == length
                if live:
                    for p in range(start // psz, (end - 1) // psz + 1):
                        counts[p] += 1
                else:
                    frees.append(start)
                    assert length == 0
                cursor = end
            assert cursor == total, "extents do not cover the heap"
            assert frees == self._free, "free list out of sync"
            assert counts == self._live_count, "live counts out of sync"
            assert {p for p, c in enumerate(counts) if c} == self._live_pages

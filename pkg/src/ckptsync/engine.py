"""The checkpoint pipeline: suspend, select pages, dump, resume.

Page selection runs in two passes while the world is stopped: pass 1 keeps
the dirty pages, pass 2 drops pages whose live bit is clear (they hold only
dead allocations, so nothing reachable can miss them). Dumped payloads are
copied to private buffers before the world restarts; encoding and handing
the images to the replication sink happen afterwards, so replication never
blocks mutators.
"""

from __future__ import annotations

import logging
import threading
import time
from dataclasses import dataclass, field

from . import restore as _restore
from .errors import DumpError, WorldNotStopped
from .heap import ManagedHeap
from .imgfmt import (
    KIND_FULL,
    KIND_INCREMENTAL,
    CoreImage,
    DescriptorRecord,
    PageTableEntry,
    encode_core,
    seal,
)

log = logging.getLogger("ckptsync.engine")


@dataclass(frozen=True)
class PageSelection:
    """Result of the two-pass refinement over a stopped heap."""

    initial: int
    after_pass1: frozenset[int]
    after_pass2: frozenset[int]

    def __post_init__(self):
        assert self.after_pass2 <= self.after_pass1
        assert len(self.after_pass1) <= self.initial


def select_pages(heap: ManagedHeap) -> PageSelection:
    """Two-pass page selection; requires a stopped world."""
    if not heap.world_stopped:
        raise WorldNotStopped("page selection needs a frozen heap")
    dirty = heap.dirty_pages()
    live = heap.live_pages()
    return PageSelection(heap.page_count, dirty, frozenset(dirty & live))


class DescriptorTable:
    """Registry of application endpoints captured into each checkpoint."""

    def __init__(self):
        self._lock = threading.Lock()
        self._entries: dict[int, tuple] = {}

    def register_listener(self, descriptor_id: int, port: int):
        with self._lock:
            self._entries[descriptor_id] = ("tcp_listener", port, None, None)

    def register_file(self, descriptor_id: int, path: str):
        with self._lock:
            self._entries[descriptor_id] = ("regular_file", None, path, None)

    def register_stream(self, descriptor_id: int, buffer_provider=None):
        """`buffer_provider() -> bytes` returns the stream's pending bytes.

        Providers run on the checkpoint agent inside the stopped world; they
        must not block on locks that application threads can hold across
        heap calls.
        """
        with self._lock:
            self._entries[descriptor_id] = ("stream", None, None, buffer_provider)

    def register_pipe(self, descriptor_id: int, buffer_provider=None):
        with self._lock:
            self._entries[descriptor_id] = ("pipe", None, None, buffer_provider)

    def remove(self, descriptor_id: int):
        with self._lock:
            self._entries.pop(descriptor_id, None)

    def snapshot(self) -> list[DescriptorRecord]:
        with self._lock:
            records = []
            for did in sorted(self._entries):
                kind, port, path, provider = self._entries[did]
                buffered = provider() if provider is not None else b""
                records.append(
                    DescriptorRecord(did, kind, port=port, path=path, buffered=bytes(buffered))
                )
            return records


@dataclass
class CheckpointStats:
    seq: int
    kind: str
    initial: int
    pass1: int
    pass2: int
    pages_dumped: int
    core_bytes: int
    mem_bytes: int
    pause_s: float
    live_hash: str | None = None


class PeriodicHandle:
    """Stops the periodic checkpoint thread."""

    def __init__(self, thread: threading.Thread, event: threading.Event):
        self._thread = thread
        self._event = event

    def stop(self):
        self._event.set()
        self._thread.join()


@dataclass
class CheckpointEngine:
    """Owns the checkpoint-agent role for one heap."""

    heap: ManagedHeap
    descriptors: DescriptorTable | None = None
    control_provider: object = None  # callable -> bytes
    start_seq: int = 0
    record_hashes: bool = False
    always_full: bool = False
    stats: list[CheckpointStats] = field(default_factory=list)
    on_stats: object = None  # callable(CheckpointStats) or None

    def __post_init__(self):
        self._seq = self.start_seq
        self._next_full = True
        self._agent_lock = threading.Lock()

    @property
    def seq(self) -> int:
        return self._seq

    def checkpoint_once(self):
        """Stop the world, dump, restart; returns (CoreImage, mem bytes, PageSelection)."""
        with self._agent_lock:
            heap = self.heap
            heap.stop_world()
            t0 = time.perf_counter()
            try:
                table_ref, table_len = heap.flush_metadata()
                selection = select_pages(heap)
                full = self._next_full or self.always_full
                page_set = heap.live_pages() if full else selection.after_pass2
                try:
                    payloads = [(i, heap.read_page(i)) for i in sorted(page_set)]
                except Exception as exc:  # heap must restart even on copy failure
                    raise DumpError(f"page copy failed: {exc}") from exc
                records = self.descriptors.snapshot() if self.descriptors else []
                app_control = self.control_provider() if self.control_provider else b""
                live_hash = heap.live_hash() if self.record_hashes else None
                heap.reset_dirty()
                self._seq += 1
                seq = self._seq
                heap_pages = heap.page_count
                page_size = heap.page_size
            finally:
                heap.start_world()
            pause = time.perf_counter() - t0
            self._next_full = False

        core = CoreImage(
            seq=seq,
            parent_seq=0 if full else seq - 1,
            kind=KIND_FULL if full else KIND_INCREMENTAL,
            page_size=page_size,
            heap_pages=heap_pages,
            page_table=[
                PageTableEntry(idx, rank * page_size)
                for rank, (idx, _) in enumerate(payloads)
            ],
            descriptors=records,
            control_record=_restore.pack_control(
                table_ref.offset, table_len, bytes(app_control)
            ),
        )
        mem = b"".join(p for _, p in payloads)
        seal(core, mem)
        stat = CheckpointStats(
            seq=seq,
            kind=core.kind,
            initial=selection.initial,
            pass1=len(selection.after_pass1),
            pass2=len(selection.after_pass2),
            pages_dumped=len(payloads),
            core_bytes=len(encode_core(core)),
            mem_bytes=len(mem),
            pause_s=pause,
            live_hash=live_hash,
        )
        self.stats.append(stat)
        if self.on_stats:
            self.on_stats(stat)
        return core, mem, selection

    def full_dump(self):
        """Side-effect-free dump of all live pages at the current instant.

        Does not advance the sequence counter or reset dirty bits; used as an
        oracle and by inspection tooling. May grow the heap-resident metadata
        table if allocations changed since the last flush.
        """
        heap = self.heap
        with self._agent_lock:
            heap.stop_world()
            try:
                saved_dirty = heap.dirty_pages()
                table_ref, table_len = heap.flush_metadata()
                page_set = sorted(heap.live_pages())
                payloads = [(i, heap.read_page(i)) for i in page_set]
                records = self.descriptors.snapshot() if self.descriptors else []
                app_control = self.control_provider() if self.control_provider else b""
                heap.set_dirty_pages(saved_dirty)
                heap_pages = heap.page_count
                page_size = heap.page_size
            finally:
                heap.start_world()
        core = CoreImage(
            seq=max(self._seq, 1),
            parent_seq=0,
            kind=KIND_FULL,
            page_size=page_size,
            heap_pages=heap_pages,
            page_table=[
                PageTableEntry(idx, rank * page_size)
                for rank, (idx, _) in enumerate(payloads)
            ],
            descriptors=records,
            control_record=_restore.pack_control(
                table_ref.offset, table_len, bytes(app_control)
            ),
        )
        mem = b"".join(p for _, p in payloads)
        seal(core, mem)
        return core, mem

    def run_periodic(self, interval: float, sink) -> PeriodicHandle:
        """Fire checkpoint_once every `interval` seconds until stopped.

        `sink(core, mem, selection)` receives each finished image; a sink that
        blocks (bounded replication queue) slows the cadence instead of
        queueing without bound.
        """
        if interval <= 0:
            raise ValueError("interval must be positive")
        stop = threading.Event()

        def loop():
            deadline = time.monotonic() + interval
            while not stop.wait(max(0.0, deadline - time.monotonic())):
                try:
                    core, mem, selection = self.checkpoint_once()
                    sink(core, mem, selection)
                except Exception:
                    log.exception("periodic checkpoint failed")
                now = time.monotonic()
                deadline += interval
                if deadline < now:  # sink backpressure: skip missed ticks, no bursts
                    deadline = now + interval

        thread = threading.Thread(target=loop, name="ckpt-agent", daemon=True)
        thread.start()
        return PeriodicHandle(thread, stop)

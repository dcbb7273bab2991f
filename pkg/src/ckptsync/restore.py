"""Checkpoint chain reconstruction and application restore.

Merging folds a chain of incrementals into one checkpoint: the newer
image's pages overwrite the older's, and metadata (descriptors, control
record, heap geometry) comes from the newer. Restoring a complete (full)
checkpoint rebuilds a heap from its page payloads, reconstructs the
allocator from the heap-resident extent table, reopens descriptors, and
hands the application its control record via the resume hook.

The control record on the wire is an envelope owned by this module::

    table_offset u64 | table_length u64 | app_len u32 | app bytes

`table_offset` locates the serialized allocator table inside the dumped
pages; the app bytes are the application's own resume payload.
"""

from __future__ import annotations

import logging
import socket
import struct
from dataclasses import dataclass, field

from .errors import ChainGap, IncompleteCheckpoint
from .heap import ManagedHeap
from .imgfmt import (
    KIND_FULL,
    Checkpoint,
    CoreImage,
    PageTableEntry,
    seal,
    verify_checkpoint,
)

log = logging.getLogger("ckptsync.restore")

_ENVELOPE = struct.Struct("<QQI")


def pack_control(table_offset: int, table_length: int, app_bytes: bytes) -> bytes:
    return _ENVELOPE.pack(table_offset, table_length, len(app_bytes)) + app_bytes


def unpack_control(raw: bytes) -> tuple[int, int, bytes]:
    if len(raw) < _ENVELOPE.size:
        raise IncompleteCheckpoint("control record too short for the restore envelope")
    off, length, app_len = _ENVELOPE.unpack_from(raw)
    app = raw[_ENVELOPE.size:_ENVELOPE.size + app_len]
    if len(app) != app_len:
        raise IncompleteCheckpoint("control record app payload truncated")
    return off, length, app


def _pages_of(ckpt: Checkpoint) -> dict[int, bytes]:
    psz = ckpt.core.page_size
    return {
        e.page_index: ckpt.mem[e.mem_offset:e.mem_offset + psz]
        for e in ckpt.core.page_table
    }


def _rebuild(core_like: CoreImage, pages: dict[int, bytes]) -> Checkpoint:
    psz = core_like.page_size
    table = []
    chunks = []
    for rank, idx in enumerate(sorted(pages)):
        table.append(PageTableEntry(idx, rank * psz))
        chunks.append(pages[idx])
    core_like.page_table = table
    mem = b"".join(chunks)
    seal(core_like, mem)
    return Checkpoint(core_like, mem)


def merge2(older: Checkpoint, newer: Checkpoint) -> Checkpoint:
    """Fold two adjacent checkpoints; the newer page payloads win on overlap."""
    if newer.core.parent_seq != older.core.seq:
        raise ChainGap(
            f"checkpoint {newer.core.seq} follows {newer.core.parent_seq}, "
            f"not {older.core.seq}"
        )
    if newer.core.page_size != older.core.page_size:
        raise ChainGap("page size changed mid-chain")
    verify_checkpoint(older.core, older.mem)
    verify_checkpoint(newer.core, newer.mem)
    pages = _pages_of(older)
    pages.update(_pages_of(newer))
    merged = CoreImage(
        seq=newer.core.seq,
        parent_seq=older.core.parent_seq,
        kind=older.core.kind,
        page_size=newer.core.page_size,
        heap_pages=newer.core.heap_pages,
        descriptors=list(newer.core.descriptors),
        control_record=newer.core.control_record,
    )
    return _rebuild(merged, pages)


def validate_chain(chain) -> None:
    if not chain:
        raise ChainGap("empty chain")
    if chain[0].core.kind != KIND_FULL:
        raise IncompleteCheckpoint(
            f"chain head (seq {chain[0].core.seq}) is not a full checkpoint"
        )
    for prev, cur in zip(chain, chain[1:]):
        if cur.core.parent_seq != prev.core.seq:
            raise ChainGap(
                f"seq {cur.core.seq} does not follow seq {prev.core.seq}"
            )


def compact(chain) -> Checkpoint:
    """Fold a whole chain into one full checkpoint carrying the last seq."""
    chain = list(chain)
    validate_chain(chain)
    out = chain[0]
    for nxt in chain[1:]:
        out = merge2(out, nxt)
    return out


def load_chain(store, prefixes=("compact", "ckpt")) -> list[Checkpoint]:
    """Assemble the longest restorable chain from a blob store.

    The head is the newest full checkpoint on record; incrementals follow by
    contiguous seq. Blobs beyond a gap are ignored with a warning (data past
    the gap is unrecoverable).
    """
    from . import storesvc
    from .imgfmt import decode_core

    by_seq: dict[int, tuple[str, str]] = {}
    for prefix in prefixes:
        for name in store.list(prefix + "-"):
            parsed = storesvc.parse_blob_name(name)
            if parsed.suffix != "core":
                continue
            # prefer compact blobs when both exist for a seq
            if parsed.seq not in by_seq or prefix == "compact":
                by_seq.setdefault(parsed.seq, (prefix, name))
                if prefix == "compact":
                    by_seq[parsed.seq] = (prefix, name)
    if not by_seq:
        return []
    cores: dict[int, tuple[str, CoreImage]] = {}
    for seq, (prefix, name) in by_seq.items():
        cores[seq] = (prefix, decode_core(store.get(name)))
    full_seqs = [s for s, (_, c) in cores.items() if c.kind == KIND_FULL]
    if not full_seqs:
        raise IncompleteCheckpoint("storage holds no full checkpoint to anchor a chain")
    head = max(full_seqs)
    chain, seq = [], head
    while seq in cores:
        prefix, core = cores[seq]
        mem = store.get(f"{prefix}-{seq}.mem")
        verify_checkpoint(core, mem)
        chain.append(Checkpoint(core, mem))
        seq += 1
    tail = max(cores)
    if tail >= seq:
        log.warning(
            "chain gap at seq %d: checkpoints up to %d are unrecoverable", seq, tail
        )
    return chain


class BufferedEndpoint:
    """Replayable buffered bytes for a restored stream or pipe."""

    def __init__(self, data: bytes):
        self._buf = bytearray(data)

    def read(self, n: int = -1) -> bytes:
        if n < 0 or n >= len(self._buf):
            out, self._buf = bytes(self._buf), bytearray()
        else:
            out, self._buf = bytes(self._buf[:n]), self._buf[n:]
        return out

    def pending(self) -> int:
        return len(self._buf)


@dataclass
class ResumeContext:
    """Everything a restored application needs to resume serving."""

    heap: ManagedHeap
    descriptors: dict[int, object] = field(default_factory=dict)
    failed_descriptors: list[tuple[int, str]] = field(default_factory=list)
    control_record: bytes = b""
    seq: int = 0


def _reopen(record):
    if record.kind == "tcp_listener":
        sock = socket.socket(socket.AF_INET, socket.SOCK_STREAM)
        sock.setsockopt(socket.SOL_SOCKET, socket.SO_REUSEADDR, 1)
        sock.bind(("", record.port))
        sock.listen(128)
        return sock
    if record.kind == "regular_file":
        return open(record.path, "r+b")
    return BufferedEndpoint(record.buffered)


def restore(
    complete: Checkpoint,
    app_resume=None,
    *,
    reopen_descriptors: bool = True,
    max_pages: int | None = None,
) -> ResumeContext:
    """Rebuild a running heap (and descriptors) from a complete checkpoint.

    Requires a full checkpoint; compact the chain first. Descriptor reopen
    failures are collected, not raised: a port may be transiently occupied.
    """
    core, mem = complete.core, complete.mem
    if core.kind != KIND_FULL:
        raise IncompleteCheckpoint(
            f"restore needs a full checkpoint, got {core.kind} seq {core.seq}"
        )
    verify_checkpoint(core, mem)
    table_off, table_len, app_bytes = unpack_control(core.control_record)
    try:
        heap = ManagedHeap.from_image(
            core.page_size,
            core.heap_pages,
            _pages_of(complete),
            table_off,
            table_len,
            epoch=core.seq,
            max_pages=max_pages,
        )
    except ValueError as exc:
        raise IncompleteCheckpoint(f"heap reconstruction failed: {exc}") from exc
    ctx = ResumeContext(heap=heap, control_record=app_bytes, seq=core.seq)
    if reopen_descriptors:
        for record in core.descriptors:
            try:
                ctx.descriptors[record.descriptor_id] = _reopen(record)
            except OSError as exc:
                log.warning("descriptor %d reopen failed: %s", record.descriptor_id, exc)
                ctx.failed_descriptors.append((record.descriptor_id, str(exc)))
    if app_resume is not None:
        app_resume(ctx)
    return ctx

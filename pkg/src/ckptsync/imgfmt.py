"""Binary encoding of checkpoint images.

A checkpoint is two files: a core image (metadata: page table, descriptor
records, opaque control record) and a memory image (raw page payloads,
concatenated in page-table order). All integers are little-endian and
fixed-width; lists carry u32 counts. One CRC-32 covers the core body and
the memory image together, so a core/memory mismatch from partial
replication is detectable.

Core image layout::

    "CSYN" | version u32 | seq u64 | parent_seq u64 | kind u8
    | page_size u32 | heap_pages u64
    | page_count u32 | page_count * (page_index u64, mem_offset u64, flags u32)
    | desc_count u32 | desc_count * descriptor record
    | control_len u32 | control bytes
    | crc u32

    descriptor record:
        descriptor_id u32 | kind u8 | params_len u32 | params
        | buffered_len u32 | buffered bytes

An empty checkpoint is exactly 53 bytes.
"""

from __future__ import annotations

import os
import struct
import zlib
from dataclasses import dataclass, field
from pathlib import Path

from .errors import (
    BadMagic,
    CrcMismatch,
    InvalidImage,
    NotFound,
    StorageError,
    Truncated,
    UnsupportedVersion,
)

MAGIC = b"CSYN"
VERSION = 1

KIND_FULL = "full"
KIND_INCREMENTAL = "incremental"
_KIND_CODES = {KIND_FULL: 1, KIND_INCREMENTAL: 2}
_KIND_NAMES = {v: k for k, v in _KIND_CODES.items()}

DESC_TCP_LISTENER = "tcp_listener"
DESC_STREAM = "stream"
DESC_REGULAR_FILE = "regular_file"
DESC_PIPE = "pipe"
_DESC_CODES = {DESC_TCP_LISTENER: 1, DESC_STREAM: 2, DESC_REGULAR_FILE: 3, DESC_PIPE: 4}
_DESC_NAMES = {v: k for k, v in _DESC_CODES.items()}

_FIXED = struct.Struct("<4sIQQBIQ")
_PTE = struct.Struct("<QQI")
_U32 = struct.Struct("<I")
_U16 = struct.Struct("<H")

EMPTY_CORE_SIZE = _FIXED.size + 4 * _U32.size  # 53


@dataclass
class PageTableEntry:
    page_index: int
    mem_offset: int
    flags: int = 0


@dataclass
class DescriptorRecord:
    """Re-openable description of an application endpoint or file."""

    descriptor_id: int
    kind: str
    port: int | None = None
    path: str | None = None
    buffered: bytes = b""

    def __post_init__(self):
        if self.kind not in _DESC_CODES:
            raise ValueError(f"unknown descriptor kind {self.kind!r}")
        if self.kind == DESC_TCP_LISTENER and self.port is None:
            raise ValueError("tcp_listener needs a port")
        if self.kind == DESC_REGULAR_FILE and self.path is None:
            raise ValueError("regular_file needs a path")
        if self.kind in (DESC_TCP_LISTENER, DESC_REGULAR_FILE) and self.buffered:
            raise ValueError(f"{self.kind} records carry no buffered bytes")

    def params_bytes(self) -> bytes:
        if self.kind == DESC_TCP_LISTENER:
            return _U16.pack(self.port)
        if self.kind == DESC_REGULAR_FILE:
            return self.path.encode("utf-8")
        return b""


@dataclass
class CoreImage:
    seq: int
    parent_seq: int
    kind: str
    page_size: int
    heap_pages: int
    page_table: list[PageTableEntry] = field(default_factory=list)
    descriptors: list[DescriptorRecord] = field(default_factory=list)
    control_record: bytes = b""
    crc: int = 0


MemoryImage = bytes


@dataclass
class Checkpoint:
    """The durable unit of replication: core metadata plus raw page payloads."""

    core: CoreImage
    mem: bytes


def _validate(core: CoreImage):
    if core.kind not in _KIND_CODES:
        raise ValueError(f"unknown checkpoint kind {core.kind!r}")
    if core.seq < 1:
        raise ValueError("seq starts at 1")
    # Engine-emitted incrementals always have parent_seq == seq - 1; merging
    # two incrementals yields a delta covering a seq range, so the format
    # only requires the parent to precede the checkpoint itself.
    if core.kind == KIND_INCREMENTAL and not 0 < core.parent_seq < core.seq:
        raise ValueError("incremental checkpoints need 0 < parent_seq < seq")
    if core.kind == KIND_FULL and core.parent_seq != 0:
        raise ValueError("full checkpoints have parent_seq 0")
    prev = -1
    for rank, e in enumerate(core.page_table):
        if e.page_index <= prev:
            raise ValueError("page table must be strictly ascending")
        if e.mem_offset != rank * core.page_size:
            raise ValueError("mem_offset must be rank * page_size")
        if e.flags != 0:
            raise ValueError("flags are reserved in v1")
        prev = e.page_index
        if e.page_index >= core.heap_pages:
            raise ValueError("page index beyond heap_pages")
    ids = [d.descriptor_id for d in core.descriptors]
    if len(ids) != len(set(ids)):
        raise ValueError("descriptor ids must be unique")


def _body(core: CoreImage) -> bytes:
    _validate(core)
    parts = [
        _FIXED.pack(
            MAGIC,
            VERSION,
            core.seq,
            core.parent_seq,
            _KIND_CODES[core.kind],
            core.page_size,
            core.heap_pages,
        ),
        _U32.pack(len(core.page_table)),
    ]
    for e in core.page_table:
        parts.append(_PTE.pack(e.page_index, e.mem_offset, e.flags))
    parts.append(_U32.pack(len(core.descriptors)))
    for d in core.descriptors:
        params = d.params_bytes()
        parts.append(_U32.pack(d.descriptor_id))
        parts.append(bytes([_DESC_CODES[d.kind]]))
        parts.append(_U32.pack(len(params)))
        parts.append(params)
        parts.append(_U32.pack(len(d.buffered)))
        parts.append(d.buffered)
    parts.append(_U32.pack(len(core.control_record)))
    parts.append(core.control_record)
    return b"".join(parts)


def checkpoint_crc(core: CoreImage, mem: bytes) -> int:
    """CRC-32 over the core body (sans the crc field) and the memory image."""
    return zlib.crc32(mem, zlib.crc32(_body(core))) & 0xFFFFFFFF


def encode_core(core: CoreImage) -> bytes:
    return _body(core) + _U32.pack(core.crc & 0xFFFFFFFF)


def seal(core: CoreImage, mem: bytes) -> CoreImage:
    """Fill in the crc field for a finished (core, mem) pair."""
    if len(mem) != len(core.page_table) * core.page_size:
        raise ValueError("memory image length must be page_table length * page_size")
    core.crc = checkpoint_crc(core, mem)
    return core


class _Reader:
    def __init__(self, data: bytes):
        self.data = data
        self.pos = 0

    def take(self, n: int) -> bytes:
        if self.pos + n > len(self.data):
            raise Truncated(f"need {n} bytes at offset {self.pos}")
        out = self.data[self.pos:self.pos + n]
        self.pos += n
        return out

    def u32(self) -> int:
        return _U32.unpack(self.take(4))[0]


def decode_core(data: bytes, mem: bytes | None = None) -> CoreImage:
    """Decode a core image; with `mem` given, the CRC is verified first.

    Verifying the CRC before structural parsing means any corruption in a
    complete pair surfaces as CrcMismatch rather than a parse error.
    """
    if len(data) < EMPTY_CORE_SIZE:
        raise Truncated(f"core image shorter than fixed minimum ({len(data)} bytes)")
    stored_crc = _U32.unpack(data[-4:])[0]
    if mem is not None:
        actual = zlib.crc32(mem, zlib.crc32(data[:-4])) & 0xFFFFFFFF
        if actual != stored_crc:
            raise CrcMismatch(f"stored 0x{stored_crc:08X}, computed 0x{actual:08X}")
    r = _Reader(data[:-4])
    magic, version, seq, parent_seq, kind_code, page_size, heap_pages = _FIXED.unpack(
        r.take(_FIXED.size)
    )
    if magic != MAGIC:
        raise BadMagic(f"expected {MAGIC!r}, found {magic!r}")
    if version != VERSION:
        raise UnsupportedVersion(f"version {version}")
    if kind_code not in _KIND_NAMES:
        raise InvalidImage(f"unknown kind code {kind_code}")
    page_table = []
    for _ in range(r.u32()):
        idx, off, flags = _PTE.unpack(r.take(_PTE.size))
        page_table.append(PageTableEntry(idx, off, flags))
    descriptors = []
    for _ in range(r.u32()):
        did = r.u32()
        dkind_code = r.take(1)[0]
        if dkind_code not in _DESC_NAMES:
            raise InvalidImage(f"unknown descriptor kind code {dkind_code}")
        dkind = _DESC_NAMES[dkind_code]
        params = r.take(r.u32())
        buffered = bytes(r.take(r.u32()))
        port = path = None
        if dkind == DESC_TCP_LISTENER:
            if len(params) != 2:
                raise InvalidImage("listener params must be a u16 port")
            port = _U16.unpack(params)[0]
        elif dkind == DESC_REGULAR_FILE:
            path = params.decode("utf-8")
        descriptors.append(
            DescriptorRecord(did, dkind, port=port, path=path, buffered=buffered)
        )
    control = bytes(r.take(r.u32()))
    if r.pos != len(r.data):
        raise Truncated(f"{len(r.data) - r.pos} trailing bytes")
    core = CoreImage(
        seq=seq,
        parent_seq=parent_seq,
        kind=_KIND_NAMES[kind_code],
        page_size=page_size,
        heap_pages=heap_pages,
        page_table=page_table,
        descriptors=descriptors,
        control_record=control,
        crc=stored_crc,
    )
    try:
        _validate(core)
    except ValueError as exc:
        raise InvalidImage(str(exc)) from exc
    if mem is not None and len(mem) != len(page_table) * page_size:
        raise Truncated(
            f"memory image is {len(mem)} bytes, page table implies "
            f"{len(page_table) * page_size}"
        )
    return core


def verify_checkpoint(core: CoreImage, mem: bytes):
    if len(mem) != len(core.page_table) * core.page_size:
        raise Truncated("memory image length does not match page table")
    actual = checkpoint_crc(core, mem)
    if actual != (core.crc & 0xFFFFFFFF):
        raise CrcMismatch(f"stored 0x{core.crc:08X}, computed 0x{actual:08X}")


def core_name(seq: int, prefix: str = "ckpt") -> str:
    return f"{prefix}-{seq}.core"


def mem_name(seq: int, prefix: str = "ckpt") -> str:
    return f"{prefix}-{seq}.mem"


def _atomic_write(path: Path, data: bytes):
    tmp = path.with_name(path.name + f".tmp{os.getpid()}")
    tmp.write_bytes(data)
    os.replace(tmp, path)


def write_checkpoint(dst, core: CoreImage, mem: bytes, prefix: str = "ckpt") -> tuple[str, str]:
    """Persist a checkpoint pair; the memory image lands before the core image.

    `dst` is either a directory path or any object with an atomic `put`.
    """
    cname, mname = core_name(core.seq, prefix), mem_name(core.seq, prefix)
    data = encode_core(core)
    if hasattr(dst, "put"):
        dst.put(mname, mem)
        dst.put(cname, data)
    else:
        root = Path(dst)
        root.mkdir(parents=True, exist_ok=True)
        _atomic_write(root / mname, mem)
        _atomic_write(root / cname, data)
    return cname, mname


def read_checkpoint(src, seq: int, prefix: str = "ckpt") -> Checkpoint:
    cname, mname = core_name(seq, prefix), mem_name(seq, prefix)
    if hasattr(src, "get"):
        try:
            data = src.get(cname)
        except NotFound as exc:
            raise StorageError(f"core image {cname} missing") from exc
        try:
            mem = src.get(mname)
        except NotFound as exc:
            raise StorageError(f"memory image {mname} missing for {cname}") from exc
    else:
        root = Path(src)
        try:
            data = (root / cname).read_bytes()
        except FileNotFoundError as exc:
            raise StorageError(f"core image {cname} missing") from exc
        try:
            mem = (root / mname).read_bytes()
        except FileNotFoundError as exc:
            raise StorageError(f"memory image {mname} missing for {cname}") from exc
    return Checkpoint(decode_core(data, mem), mem)

"""In-memory key/value store whose entire state lives in the managed heap.

`KvStore` is an open-addressing hash table: a bucket array of u64 slots
(payload offsets of entries; 0 = empty, 1 = tombstone) plus one allocation
per entry. In-place updates write the value length and bytes as a single
contiguous heap write, and inserts link the entry into its slot only after
the entry bytes are complete, so any stopped-world capture sees a
consistent table. The table's root travels in the checkpoint control
record, which is all a restore needs to rebuild it.

Wire protocol (framing shared with the other services)::

    request:  length u32 | op u8 | client_id u64 | request_id u64
              | key_len u16 | key | value bytes (PUT only)
    response: status u8 | view_number u64 | value_len u32 | value

Ops: GET=1, PUT=2, DELETE=3. Statuses: OK=0, ABSENT=1, NOT_PRIMARY=2,
REPLICATION_FAILED=3, BAD_REQUEST=4, SERVER_ERROR=5.
"""

from __future__ import annotations

import logging
import random
import socket
import struct
import threading
import time
from dataclasses import dataclass

from .confsvc import ConfClient
from .errors import CkptError, ReplicationFailed, WireError
from .heap import ManagedHeap, ObjectRef

log = logging.getLogger("ckptsync.kvapp")

OP_GET, OP_PUT, OP_DELETE = 1, 2, 3
ST_OK, ST_ABSENT, ST_NOT_PRIMARY, ST_REPLICATION_FAILED, ST_BAD_REQUEST, ST_SERVER_ERROR = (
    0, 1, 2, 3, 4, 5,
)

MAX_KEY = 256
LISTENER_DESCRIPTOR_ID = 1

_REQ = struct.Struct("<BQQH")
_RESP = struct.Struct("<BQI")
_ROOT = struct.Struct("<QQQQ")  # bucket array offset, slot count, entries, tombstones
_ROOT_REF = struct.Struct("<Q")
_ENTRY = struct.Struct("<BH")  # flags, key length
_VLEN = struct.Struct("<I")

_EMPTY, _TOMB = 0, 1
_FLAG_TOMBSTONE = 1


def _fnv64(data: bytes) -> int:
    h = 0xCBF29CE484222325
    for b in data:
        h = ((h ^ b) * 0x100000001B3) & 0xFFFFFFFFFFFFFFFF
    return h


class KvStore:
    """Hash table over managed-heap pages; safe for many threads.

    The table root (bucket array location, slot count, sizes) lives in a
    fixed 32-byte heap allocation, updated with single contiguous writes.
    The checkpoint control record is therefore just the root's offset: a
    constant the checkpoint agent can read without taking the table lock,
    and a resize flips the root atomically with respect to stopped worlds.
    """

    def __init__(self, heap: ManagedHeap, initial_slots: int = 64):
        self.heap = heap
        self._lock = threading.RLock()
        self._root = heap.alloc(_ROOT.size)
        self._slots = initial_slots
        self._count = 0
        self._tombstones = 0
        self._buckets = heap.alloc(initial_slots * 8)
        self._sync_root()

    @classmethod
    def from_root(cls, heap: ManagedHeap, control: bytes) -> "KvStore":
        (root_off,) = _ROOT_REF.unpack(control)
        self = cls.__new__(cls)
        self.heap = heap
        self._lock = threading.RLock()
        self._root = ObjectRef(root_off)
        bucket_off, slots, count, tombstones = _ROOT.unpack(
            heap.read(self._root, 0, _ROOT.size)
        )
        self._slots = slots
        self._count = count
        self._tombstones = tombstones
        self._buckets = ObjectRef(bucket_off)
        heap.allocation_size(self._buckets)  # validates the root points at a live array
        return self

    def root_record(self) -> bytes:
        # stable for the store's lifetime; deliberately lock-free so the
        # checkpoint agent can call it while mutators sit parked mid-op
        return _ROOT_REF.pack(self._root.offset)

    def _sync_root(self):
        self.heap.write(
            self._root,
            0,
            _ROOT.pack(self._buckets.offset, self._slots, self._count, self._tombstones),
        )

    def __len__(self):
        return self._count

    def _slot(self, i: int) -> int:
        raw = self.heap.read(self._buckets, i * 8, 8)
        return int.from_bytes(raw, "little")

    def _set_slot(self, i: int, value: int):
        self.heap.write(self._buckets, i * 8, value.to_bytes(8, "little"))

    def _entry_key(self, off: int) -> bytes:
        ref = ObjectRef(off)
        flags, klen = _ENTRY.unpack(self.heap.read(ref, 0, _ENTRY.size))
        return self.heap.read(ref, _ENTRY.size, klen)

    def _entry_value(self, off: int) -> bytes:
        ref = ObjectRef(off)
        flags, klen = _ENTRY.unpack(self.heap.read(ref, 0, _ENTRY.size))
        (vlen,) = _VLEN.unpack(self.heap.read(ref, _ENTRY.size + klen, _VLEN.size))
        return self.heap.read(ref, _ENTRY.size + klen + _VLEN.size, vlen)

    def _probe(self, key: bytes):
        """Yield (slot index, slot word) starting at the key's home bucket."""
        mask = self._slots - 1
        i = _fnv64(key) & mask
        for _ in range(self._slots):
            yield i, self._slot(i)
            i = (i + 1) & mask

    def _lookup_slot(self, key: bytes) -> int | None:
        for i, word in self._probe(key):
            if word == _EMPTY:
                return None
            if word != _TOMB and self._entry_key(word) == key:
                return i
        return None

    def get(self, key: bytes) -> bytes | None:
        if len(key) > MAX_KEY:
            raise ValueError("key too long")
        with self._lock:
            i = self._lookup_slot(key)
            if i is None:
                return None
            return self._entry_value(self._slot(i))

    def put(self, key: bytes, value: bytes):
        if not key or len(key) > MAX_KEY:
            raise ValueError("keys are 1..256 bytes")
        with self._lock:
            i = self._lookup_slot(key)
            if i is not None:
                off = self._slot(i)
                cap = self.heap.allocation_size(ObjectRef(off))
                klen = len(self._entry_key(off))
                room = cap - _ENTRY.size - klen - _VLEN.size
                if len(value) <= room:
                    # single contiguous write: length then bytes, atomic per stop
                    self.heap.write(
                        ObjectRef(off),
                        _ENTRY.size + klen,
                        _VLEN.pack(len(value)) + value,
                    )
                    return
                new_off = self._new_entry(key, value)
                self._set_slot(i, new_off)
                self.heap.free(ObjectRef(off))
                return
            self._maybe_grow()
            target = None
            for j, word in self._probe(key):
                if word == _EMPTY:
                    target = j
                    break
                if word == _TOMB and target is None:
                    target = j
            assert target is not None
            off = self._new_entry(key, value)
            if self._slot(target) == _TOMB:
                self._tombstones -= 1
            # entry bytes, then the slot, then the root sizes: a world stop
            # between any two of these still captures a readable table
            self._set_slot(target, off)
            self._count += 1
            self._sync_root()

    def delete(self, key: bytes):
        """Idempotent: deleting an absent key is a no-op."""
        with self._lock:
            i = self._lookup_slot(key)
            if i is None:
                return
            off = self._slot(i)
            # tombstone first so a capture never sees a slot pointing at a
            # freed entry; a capture before the free merely leaks the extent
            self._set_slot(i, _TOMB)
            self._tombstones += 1
            self._count -= 1
            self._sync_root()
            self.heap.free(ObjectRef(off))

    def items(self):
        """Snapshot of (key, value) pairs; takes the table lock."""
        with self._lock:
            out = []
            for i in range(self._slots):
                word = self._slot(i)
                if word not in (_EMPTY, _TOMB):
                    out.append((self._entry_key(word), self._entry_value(word)))
            return out

    def _new_entry(self, key: bytes, value: bytes) -> int:
        size = _ENTRY.size + len(key) + _VLEN.size + len(value)
        ref = self.heap.alloc(max(size, 16))
        blob = _ENTRY.pack(0, len(key)) + key + _VLEN.pack(len(value)) + value
        self.heap.write(ref, 0, blob)
        return ref.offset

    def _maybe_grow(self):
        if (self._count + self._tombstones + 1) <= 0.7 * self._slots:
            return
        new_slots = self._slots * 2
        while self._count * 2 > 0.7 * new_slots:
            new_slots *= 2
        old_buckets, old_slots = self._buckets, self._slots
        new_buckets = self.heap.alloc(new_slots * 8)
        mask = new_slots - 1
        for i in range(old_slots):
            word = self._slot(i)
            if word in (_EMPTY, _TOMB):
                continue
            j = _fnv64(self._entry_key(word)) & mask
            while int.from_bytes(self.heap.read(new_buckets, j * 8, 8), "little") != _EMPTY:
                j = (j + 1) & mask
            self.heap.write(new_buckets, j * 8, word.to_bytes(8, "little"))
        # flip the root last, in one write: captures mid-rehash still see the
        # intact old array, and the half-built new one is only a dead extent
        self._buckets = new_buckets
        self._slots = new_slots
        self._tombstones = 0
        self._sync_root()
        self.heap.free(old_buckets)


@dataclass
class _DedupEntry:
    request_id: int
    response: tuple


class KvServer:
    """Threaded TCP front end for a KvStore.

    `exposer` is called after each PUT/DELETE and before the reply: in
    synchronous replication it blocks until the covering checkpoint is
    stored (raising ReplicationFailed aborts the success reply); when
    unset, mutations reply immediately.
    """

    def __init__(
        self,
        store: KvStore,
        listen: tuple[str, int] | None = None,
        *,
        sock: socket.socket | None = None,
        exposer=None,
        dedup: bool = False,
        view_number: int = 1,
        is_primary: bool = True,
    ):
        if sock is None:
            sock = socket.socket(socket.AF_INET, socket.SOCK_STREAM)
            sock.setsockopt(socket.SOL_SOCKET, socket.SO_REUSEADDR, 1)
            sock.bind(listen or ("127.0.0.1", 0))
            sock.listen(128)
        self._sock = sock
        self.store = store
        self.exposer = exposer
        self._dedup: dict[int, _DedupEntry] | None = {} if dedup else None
        self.view_number = view_number
        self.is_primary = is_primary
        self._stop = threading.Event()
        self._threads: list[threading.Thread] = []
        self._accept_thread: threading.Thread | None = None

    @property
    def port(self) -> int:
        return self._sock.getsockname()[1]

    @property
    def address(self) -> tuple[str, int]:
        return self._sock.getsockname()

    def set_primary(self, is_primary: bool, view_number: int | None = None):
        self.is_primary = is_primary
        if view_number is not None:
            self.view_number = view_number

    def start(self):
        if self._accept_thread is not None and self._accept_thread.is_alive():
            return
        self._accept_thread = threading.Thread(
            target=self._accept_loop, name="kv-accept", daemon=True
        )
        self._accept_thread.start()

    def stop(self):
        self._stop.set()
        try:
            self._sock.close()
        except OSError:
            pass
        if self._accept_thread:
            self._accept_thread.join(timeout=2)

    def _accept_loop(self):
        while not self._stop.is_set():
            try:
                conn, _ = self._sock.accept()
            except OSError:
                return
            conn.setsockopt(socket.IPPROTO_TCP, socket.TCP_NODELAY, 1)
            t = threading.Thread(target=self._serve_conn, args=(conn,), daemon=True)
            t.start()
            self._threads.append(t)

    def _serve_conn(self, conn: socket.socket):
        from . import framing

        try:
            while not self._stop.is_set():
                try:
                    head = framing.recv_exact(conn, 4)
                except WireError:
                    return
                (length,) = struct.unpack("<I", head)
                if length < _REQ.size or length > framing.MAX_FRAME:
                    return
                body = framing.recv_exact(conn, length)
                status, value = self._handle(body)
                conn.sendall(_RESP.pack(status, self.view_number, len(value)) + value)
        except (WireError, OSError):
            return
        finally:
            conn.close()

    def _handle(self, body: bytes) -> tuple[int, bytes]:
        try:
            op, client_id, request_id, klen = _REQ.unpack_from(body)
            key = body[_REQ.size:_REQ.size + klen]
            value = body[_REQ.size + klen:]
            if len(key) != klen or not key or klen > MAX_KEY:
                return ST_BAD_REQUEST, b""
        except struct.error:
            return ST_BAD_REQUEST, b""
        if op == OP_GET:
            found = self.store.get(key)
            return (ST_OK, found) if found is not None else (ST_ABSENT, b"")
        if not self.is_primary:
            return ST_NOT_PRIMARY, b""
        if self._dedup is not None:
            hit = self._dedup.get(client_id)
            if hit is not None and hit.request_id == request_id:
                return hit.response
        try:
            if op == OP_PUT:
                self.store.put(key, value)
            elif op == OP_DELETE:
                self.store.delete(key)
            else:
                return ST_BAD_REQUEST, b""
            if self.exposer is not None:
                self.exposer()
        except ReplicationFailed:
            return ST_REPLICATION_FAILED, b""
        except (CkptError, ValueError):
            log.exception("kv op failed")
            return ST_SERVER_ERROR, b""
        response = (ST_OK, b"")
        if self._dedup is not None:
            self._dedup[client_id] = _DedupEntry(request_id, response)
        return response


class KvTimeout(CkptError):
    pass


class KvClient:
    """Client with confsvc-driven reconnect and request retransmission.

    On connection loss or a NOT_PRIMARY reply it re-polls the configuration
    service with backoff until a healthy view appears, reconnects, and
    retransmits the same request id.
    """

    def __init__(
        self,
        confsvc_addr: tuple[str, int] | None = None,
        direct_addr: tuple[str, int] | None = None,
        deadline: float = 15.0,
        client_id: int | None = None,
        timeout: float = 5.0,
    ):
        if confsvc_addr is None and direct_addr is None:
            raise ValueError("need a configuration service or a direct address")
        self._conf = ConfClient(confsvc_addr) if confsvc_addr else None
        self._direct = direct_addr
        self.deadline = deadline
        self.timeout = timeout
        self.client_id = client_id if client_id is not None else random.getrandbits(63)
        self._request_id = 0
        self._sock: socket.socket | None = None
        self._connect_count = 0
        self.last_view = 0

    def close(self):
        if self._sock is not None:
            try:
                self._sock.close()
            finally:
                self._sock = None
        if self._conf:
            self._conf.close()

    def _resolve(self) -> tuple[str, int]:
        if self._conf is None:
            return self._direct
        healthy, snap = self._conf.who_is_primary()
        if not healthy or not snap.primary_addr:
            raise WireError("cluster is failing over")
        host, port = snap.primary_addr.rsplit(":", 1)
        return host, int(port)

    def _connect(self):
        if self._sock is not None:
            return
        addr = self._resolve()
        self._sock = socket.create_connection(addr, timeout=self.timeout)
        self._sock.setsockopt(socket.IPPROTO_TCP, socket.TCP_NODELAY, 1)
        self._connect_count += 1

    def _drop(self):
        if self._sock is not None:
            try:
                self._sock.close()
            finally:
                self._sock = None

    def call(self, op: int, key: bytes, value: bytes = b"") -> tuple[int, bytes]:
        """Send one request, retrying across failover with the same request id."""
        from . import framing

        self._request_id += 1
        request_id = self._request_id
        body = _REQ.pack(op, self.client_id, request_id, len(key)) + key + value
        frame = struct.pack("<I", len(body)) + body
        give_up = time.monotonic() + self.deadline
        backoff = 0.025
        while True:
            try:
                self._connect()
                self._sock.sendall(frame)
                raw = framing.recv_exact(self._sock, _RESP.size)
                status, view, vlen = _RESP.unpack(raw)
                payload = framing.recv_exact(self._sock, vlen) if vlen else b""
                self.last_view = view
                if status == ST_NOT_PRIMARY:
                    self._drop()
                    raise WireError("stale primary")
                return status, payload
            except (OSError, WireError):
                self._drop()
                if time.monotonic() >= give_up:
                    raise KvTimeout(f"request {request_id} undelivered within deadline")
                time.sleep(backoff)
                backoff = min(backoff * 2, 0.5)

    def put(self, key: bytes, value: bytes) -> int:
        status, _ = self.call(OP_PUT, key, value)
        return status

    def get(self, key: bytes) -> bytes | None:
        status, payload = self.call(OP_GET, key)
        return payload if status == ST_OK else None

    def delete(self, key: bytes) -> int:
        status, _ = self.call(OP_DELETE, key)
        return status

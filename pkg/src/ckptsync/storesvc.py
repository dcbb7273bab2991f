"""Checkpoint blob storage: a TCP service, its client, and a directory backend.

Blob names are `ckpt-<seq>.core|mem` or `compact-<seq>.core|mem`. Puts are
atomic (readers see the old or the new payload, never a torn one), and
listings sort by sequence number then suffix. A single node suffices at
desk scale; swap in any durable object store behind the same client calls.

Wire opcodes: PUT=1, GET=2, LIST=3, DELETE=4. Response statuses: OK=0,
NOT_FOUND=1, NAME_INVALID=2, ERROR=3. LIST returns newline-separated names.
"""

from __future__ import annotations

import logging
import os
import re
import socket
import socketserver
import threading
from dataclasses import dataclass
from pathlib import Path

from . import framing
from .errors import NameInvalid, NotFound, StorageError, WireError

log = logging.getLogger("ckptsync.store")

OP_PUT, OP_GET, OP_LIST, OP_DELETE = 1, 2, 3, 4
ST_OK, ST_NOT_FOUND, ST_NAME_INVALID, ST_ERROR = 0, 1, 2, 3

_NAME_RE = re.compile(r"^(ckpt|compact)-(\d+)\.(core|mem)$")


@dataclass(frozen=True)
class BlobName:
    prefix: str
    seq: int
    suffix: str

    def __str__(self):
        return f"{self.prefix}-{self.seq}.{self.suffix}"


def parse_blob_name(name: str) -> BlobName:
    m = _NAME_RE.match(name)
    if not m:
        raise NameInvalid(f"bad blob name {name!r}")
    return BlobName(m.group(1), int(m.group(2)), m.group(3))


def _sort_key(name: str):
    parsed = parse_blob_name(name)
    return (parsed.seq, parsed.suffix, parsed.prefix)


class LocalDirStore:
    """File-backed blob store; put is temp-file + rename, so always atomic."""

    def __init__(self, root):
        self.root = Path(root)
        self.root.mkdir(parents=True, exist_ok=True)
        self._lock = threading.Lock()

    def put(self, name: str, data: bytes):
        parse_blob_name(name)
        tmp = self.root / f".{name}.tmp{os.getpid()}.{threading.get_ident()}"
        tmp.write_bytes(data)
        os.replace(tmp, self.root / name)

    def get(self, name: str) -> bytes:
        parse_blob_name(name)
        try:
            return (self.root / name).read_bytes()
        except FileNotFoundError:
            raise NotFound(name) from None

    def list(self, prefix: str = "") -> list[str]:
        names = []
        for p in self.root.iterdir():
            if not p.name.startswith(prefix):
                continue
            try:
                parse_blob_name(p.name)
            except NameInvalid:
                continue
            names.append(p.name)
        return sorted(names, key=_sort_key)

    def delete(self, name: str):
        parse_blob_name(name)
        try:
            (self.root / name).unlink()
        except FileNotFoundError:
            raise NotFound(name) from None


class _Handler(socketserver.BaseRequestHandler):
    def handle(self):
        store = self.server.store
        sock = self.request
        while True:
            try:
                opcode, raw_name, payload = framing.recv_frame(sock)
            except WireError:
                return
            try:
                name = raw_name.decode("utf-8")
                if opcode == OP_PUT:
                    store.put(name, payload)
                    framing.send_response(sock, ST_OK)
                elif opcode == OP_GET:
                    framing.send_response(sock, ST_OK, store.get(name))
                elif opcode == OP_LIST:
                    names = store.list(name)
                    framing.send_response(sock, ST_OK, "\n".join(names).encode("utf-8"))
                elif opcode == OP_DELETE:
                    store.delete(name)
                    framing.send_response(sock, ST_OK)
                else:
                    framing.send_response(sock, ST_ERROR, b"unknown opcode")
            except NotFound as exc:
                framing.send_response(sock, ST_NOT_FOUND, str(exc).encode())
            except NameInvalid as exc:
                framing.send_response(sock, ST_NAME_INVALID, str(exc).encode())
            except WireError:
                return
            except OSError as exc:
                log.exception("store op failed")
                try:
                    framing.send_response(sock, ST_ERROR, str(exc).encode())
                except OSError:
                    return


class BlobStoreServer(socketserver.ThreadingTCPServer):
    allow_reuse_address = True
    daemon_threads = True

    def __init__(self, listen: tuple[str, int], data_dir):
        super().__init__(listen, _Handler)
        self.store = LocalDirStore(data_dir)

    @property
    def address(self) -> tuple[str, int]:
        return self.server_address

    def serve_background(self) -> threading.Thread:
        t = threading.Thread(target=self.serve_forever, name="storesvc", daemon=True)
        t.start()
        return t


class StoreClient:
    """Blob store client; one in-flight request per client, reconnects lazily."""

    def __init__(self, addr: tuple[str, int], timeout: float = 10.0):
        self.addr = addr
        self.timeout = timeout
        self._sock: socket.socket | None = None
        self._lock = threading.Lock()

    def _connect(self):
        if self._sock is None:
            self._sock = socket.create_connection(self.addr, timeout=self.timeout)
            self._sock.setsockopt(socket.IPPROTO_TCP, socket.TCP_NODELAY, 1)

    def close(self):
        with self._lock:
            if self._sock is not None:
                try:
                    self._sock.close()
                finally:
                    self._sock = None

    def _call(self, opcode: int, name: str, payload: bytes = b"") -> bytes:
        with self._lock:
            try:
                self._connect()
                framing.send_frame(self._sock, opcode, name.encode("utf-8"), payload)
                status, body = framing.recv_response(self._sock)
            except (OSError, WireError) as exc:
                self.close()
                raise WireError(f"store {self.addr}: {exc}") from exc
        if status == ST_OK:
            return body
        if status == ST_NOT_FOUND:
            raise NotFound(body.decode())
        if status == ST_NAME_INVALID:
            raise NameInvalid(body.decode())
        raise StorageError(body.decode())

    def put(self, name: str, data: bytes):
        self._call(OP_PUT, name, data)

    def get(self, name: str) -> bytes:
        return self._call(OP_GET, name)

    def list(self, prefix: str = "") -> list[str]:
        body = self._call(OP_LIST, prefix)
        return body.decode("utf-8").split("\n") if body else []

    def delete(self, name: str):
        self._call(OP_DELETE, name)

    def ping(self) -> bool:
        try:
            self.list("ckpt-")
            return True
        except (WireError, StorageError):
            return False

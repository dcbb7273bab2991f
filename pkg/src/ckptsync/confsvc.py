"""Configuration service: cluster view, heartbeat monitoring, failover.

`ViewTracker` is the pure state machine (clock injected, so failover timing
is testable deterministically); `ConfService` wraps it in a TCP service with
the shared framing. The primary is declared failed when its heartbeat has
been silent for more than `miss_threshold` heartbeat intervals; the first
backup is then chosen and clients are told to retry until the chosen node
completes its restore and reports in.

Wire opcodes: REGISTER=1, HEARTBEAT=2, WHO_IS_PRIMARY=3, COMPLETE_FAILOVER=4,
TRIGGER_COMPACT=5. The frame's name field carries the node id.
"""

from __future__ import annotations

import logging
import socket
import socketserver
import struct
import threading
import time
from dataclasses import dataclass, field

from . import framing
from .errors import DuplicateNode, NotChosenNode, WireError

log = logging.getLogger("ckptsync.confsvc")

OP_REGISTER, OP_HEARTBEAT, OP_WHO_IS_PRIMARY, OP_COMPLETE_FAILOVER, OP_TRIGGER_COMPACT = (
    1, 2, 3, 4, 5,
)
ST_OK, ST_ERROR, ST_RETRY, ST_NOT_CHOSEN, ST_DUPLICATE = 0, 3, 4, 5, 6

ROLE_PRIMARY, ROLE_BACKUP = 1, 2

STATE_HEALTHY = "healthy"
STATE_FAILING_OVER = "failing_over"

_HB = struct.Struct("<QQ")
_U64 = struct.Struct("<Q")


@dataclass(frozen=True)
class FailoverDecision:
    view_number: int
    failed_primary: str
    new_primary: str | None


@dataclass
class ViewSnapshot:
    view_number: int
    state: str
    primary_id: str | None
    primary_addr: str | None
    chosen_id: str | None
    backups: list[str]
    compact_pending: bool


@dataclass
class _Node:
    node_id: str
    role: int
    addr: str
    last_heartbeat: float
    hb_seq: int = 0
    latest_checkpoint_seq: int = 0


@dataclass
class ViewTracker:
    """Cluster view state machine; `now` values come from the caller."""

    heartbeat_interval: float = 0.1
    miss_threshold: int = 3
    view_number: int = 1
    state: str = STATE_HEALTHY
    primary_id: str | None = None
    chosen_id: str | None = None
    compact_pending: bool = False
    nodes: dict[str, _Node] = field(default_factory=dict)
    backups: list[str] = field(default_factory=list)

    def register(self, node_id: str, role: int, addr: str, now: float) -> ViewSnapshot:
        existing = self.nodes.get(node_id)
        if role == ROLE_PRIMARY:
            if self.primary_id is not None and self.primary_id != node_id:
                raise DuplicateNode(
                    f"{self.primary_id} is already primary; {node_id} rejected"
                )
            self.primary_id = node_id
        else:
            if node_id == self.primary_id:
                raise DuplicateNode(f"{node_id} is the current primary")
            if node_id not in self.backups:
                self.backups.append(node_id)
        if existing is not None:
            log.info("node %s re-registered; heartbeat clock reset", node_id)
        self.nodes[node_id] = _Node(node_id, role, addr, last_heartbeat=now)
        return self.snapshot()

    def on_heartbeat(self, node_id: str, hb_seq: int, ckpt_seq: int, now: float) -> bool:
        """Record a heartbeat; returns whether the sender is the current primary."""
        node = self.nodes.get(node_id)
        if node is None:
            log.warning("heartbeat from unknown node %s ignored", node_id)
            return False
        if hb_seq <= node.hb_seq:
            log.debug("stale heartbeat seq %d from %s ignored", hb_seq, node_id)
            return node_id == self.primary_id
        node.hb_seq = hb_seq
        node.latest_checkpoint_seq = ckpt_seq
        node.last_heartbeat = now
        if node_id != self.primary_id:
            # a deposed primary (or any backup) never rolls the view back
            return False
        return True

    def tick(self, now: float) -> FailoverDecision | None:
        if self.state != STATE_HEALTHY or self.primary_id is None:
            return None
        node = self.nodes.get(self.primary_id)
        if node is None:
            return None
        if now - node.last_heartbeat <= self.miss_threshold * self.heartbeat_interval:
            return None
        self.state = STATE_FAILING_OVER
        self.chosen_id = self.backups[0] if self.backups else None
        decision = FailoverDecision(self.view_number, self.primary_id, self.chosen_id)
        log.warning(
            "primary %s silent for > %d intervals; failing over to %s",
            self.primary_id, self.miss_threshold, self.chosen_id,
        )
        return decision

    def complete_failover(
        self, node_id: str, addr: str | None = None, now: float | None = None
    ) -> ViewSnapshot:
        if self.state != STATE_FAILING_OVER or node_id != self.chosen_id:
            raise NotChosenNode(f"{node_id} was not chosen for promotion")
        old = self.primary_id
        if old in self.nodes:
            del self.nodes[old]
        self.primary_id = node_id
        self.backups = [b for b in self.backups if b != node_id]
        node = self.nodes[node_id]
        node.role = ROLE_PRIMARY
        node.hb_seq = 0  # the promoted manager restarts its heartbeat sequence
        if now is not None:
            node.last_heartbeat = now
        if addr:
            node.addr = addr
        self.chosen_id = None
        self.state = STATE_HEALTHY
        self.view_number += 1
        log.warning("view %d: %s promoted to primary", self.view_number, node_id)
        return self.snapshot()

    def snapshot(self) -> ViewSnapshot:
        addr = None
        if self.primary_id and self.primary_id in self.nodes:
            addr = self.nodes[self.primary_id].addr
        return ViewSnapshot(
            view_number=self.view_number,
            state=self.state,
            primary_id=self.primary_id,
            primary_addr=addr,
            chosen_id=self.chosen_id,
            backups=list(self.backups),
            compact_pending=self.compact_pending,
        )


def _encode_snapshot(s: ViewSnapshot) -> bytes:
    return b"".join([
        _U64.pack(s.view_number),
        bytes([1 if s.state == STATE_FAILING_OVER else 0, 1 if s.compact_pending else 0]),
        framing.pack_str(s.primary_id or ""),
        framing.pack_str(s.primary_addr or ""),
        framing.pack_str(s.chosen_id or ""),
        framing.pack_str(",".join(s.backups)),
    ])


def decode_snapshot(raw: bytes) -> ViewSnapshot:
    (view,) = _U64.unpack_from(raw)
    failing, compacting = raw[8], raw[9]
    pos = 10
    primary, pos = framing.unpack_str(raw, pos)
    addr, pos = framing.unpack_str(raw, pos)
    chosen, pos = framing.unpack_str(raw, pos)
    backups, pos = framing.unpack_str(raw, pos)
    return ViewSnapshot(
        view_number=view,
        state=STATE_FAILING_OVER if failing else STATE_HEALTHY,
        primary_id=primary or None,
        primary_addr=addr or None,
        chosen_id=chosen or None,
        backups=[b for b in backups.split(",") if b],
        compact_pending=bool(compacting),
    )


class _Handler(socketserver.BaseRequestHandler):
    def handle(self):
        svc = self.server
        sock = self.request
        while True:
            try:
                opcode, raw_name, payload = framing.recv_frame(sock)
            except WireError:
                return
            try:
                node_id = raw_name.decode("utf-8")
                status, body = svc.dispatch(opcode, node_id, payload)
                framing.send_response(sock, status, body)
            except WireError:
                return
            except OSError:
                return


class ConfService(socketserver.ThreadingTCPServer):
    """Single-node configuration authority with a real-time failover ticker."""

    allow_reuse_address = True
    daemon_threads = True

    def __init__(
        self,
        listen: tuple[str, int],
        heartbeat_interval: float = 0.1,
        miss_threshold: int = 3,
        tick_interval: float = 0.025,
    ):
        super().__init__(listen, _Handler)
        self.tracker = ViewTracker(
            heartbeat_interval=heartbeat_interval, miss_threshold=miss_threshold
        )
        self._lock = threading.Lock()
        self._tick_interval = tick_interval
        self._stop = threading.Event()
        self._ticker = threading.Thread(target=self._tick_loop, daemon=True)
        self._ticker.start()

    @property
    def address(self) -> tuple[str, int]:
        return self.server_address

    def serve_background(self) -> threading.Thread:
        t = threading.Thread(target=self.serve_forever, name="confsvc", daemon=True)
        t.start()
        return t

    def shutdown(self):
        self._stop.set()
        super().shutdown()

    def _tick_loop(self):
        while not self._stop.wait(self._tick_interval):
            with self._lock:
                self.tracker.tick(time.monotonic())

    def dispatch(self, opcode: int, node_id: str, payload: bytes) -> tuple[int, bytes]:
        now = time.monotonic()
        with self._lock:
            t = self.tracker
            if opcode == OP_REGISTER:
                role = payload[0] if payload else ROLE_BACKUP
                addr = payload[1:].decode("utf-8")
                try:
                    snap = t.register(node_id, role, addr, now)
                except DuplicateNode as exc:
                    return ST_DUPLICATE, str(exc).encode()
                return ST_OK, _encode_snapshot(snap)
            if opcode == OP_HEARTBEAT:
                hb_seq, ckpt_seq = _HB.unpack(payload)
                still_primary = t.on_heartbeat(node_id, hb_seq, ckpt_seq, now)
                return ST_OK, bytes([1 if still_primary else 0]) + _U64.pack(t.view_number)
            if opcode == OP_WHO_IS_PRIMARY:
                snap = t.snapshot()
                status = ST_RETRY if snap.state == STATE_FAILING_OVER else ST_OK
                return status, _encode_snapshot(snap)
            if opcode == OP_COMPLETE_FAILOVER:
                addr = payload.decode("utf-8") if payload else None
                try:
                    snap = t.complete_failover(node_id, addr, now=now)
                except NotChosenNode as exc:
                    return ST_NOT_CHOSEN, str(exc).encode()
                return ST_OK, _encode_snapshot(snap)
            if opcode == OP_TRIGGER_COMPACT:
                subop = payload[0] if payload else 1
                if subop == 1:
                    t.compact_pending = True
                else:
                    t.compact_pending = False
                return ST_OK, bytes([1 if t.compact_pending else 0])
            return ST_ERROR, b"unknown opcode"


class ConfClient:
    def __init__(self, addr: tuple[str, int], timeout: float = 10.0):
        self.addr = addr
        self.timeout = timeout
        self._sock: socket.socket | None = None
        self._lock = threading.Lock()

    def close(self):
        with self._lock:
            if self._sock is not None:
                try:
                    self._sock.close()
                finally:
                    self._sock = None

    def _call(self, opcode: int, node_id: str, payload: bytes = b"") -> tuple[int, bytes]:
        with self._lock:
            try:
                if self._sock is None:
                    self._sock = socket.create_connection(self.addr, timeout=self.timeout)
                    self._sock.setsockopt(socket.IPPROTO_TCP, socket.TCP_NODELAY, 1)
                framing.send_frame(self._sock, opcode, node_id.encode("utf-8"), payload)
                return framing.recv_response(self._sock)
            except (OSError, WireError) as exc:
                self.close()
                raise WireError(f"confsvc {self.addr}: {exc}") from exc

    def register(self, node_id: str, role: str, addr: str) -> ViewSnapshot:
        code = ROLE_PRIMARY if role == "primary" else ROLE_BACKUP
        status, body = self._call(OP_REGISTER, node_id, bytes([code]) + addr.encode())
        if status == ST_DUPLICATE:
            raise DuplicateNode(body.decode())
        if status != ST_OK:
            raise WireError(f"register failed: {body.decode()}")
        return decode_snapshot(body)

    def heartbeat(self, node_id: str, hb_seq: int, ckpt_seq: int) -> tuple[bool, int]:
        """Returns (still primary?, current view number)."""
        status, body = self._call(OP_HEARTBEAT, node_id, _HB.pack(hb_seq, ckpt_seq))
        if status != ST_OK:
            raise WireError(f"heartbeat failed: {body.decode()}")
        (view,) = _U64.unpack_from(body, 1)
        return bool(body[0]), view

    def who_is_primary(self) -> tuple[bool, ViewSnapshot]:
        """Returns (healthy?, snapshot); healthy=False asks the caller to retry."""
        status, body = self._call(OP_WHO_IS_PRIMARY, "")
        snap = decode_snapshot(body)
        return status == ST_OK, snap

    def complete_failover(self, node_id: str, addr: str = "") -> ViewSnapshot:
        status, body = self._call(OP_COMPLETE_FAILOVER, node_id, addr.encode())
        if status == ST_NOT_CHOSEN:
            raise NotChosenNode(body.decode())
        if status != ST_OK:
            raise WireError(f"complete_failover failed: {body.decode()}")
        return decode_snapshot(body)

    def trigger_compact(self, done: bool = False) -> bool:
        status, body = self._call(OP_TRIGGER_COMPACT, "", bytes([2 if done else 1]))
        if status != ST_OK:
            raise WireError("trigger_compact failed")
        return bool(body[0])

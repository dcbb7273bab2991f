"""Length-prefixed binary framing shared by the TCP services.

Request frame::

    length u32 | opcode u8 | name_len u16 | name bytes | payload

`length` counts everything after itself. Responses::

    status u8 | payload_len u32 | payload
"""

from __future__ import annotations

import struct

from .errors import WireError

_U32 = struct.Struct("<I")
_U16 = struct.Struct("<H")
_RESP = struct.Struct("<BI")

MAX_FRAME = 256 * 1024 * 1024
MAX_NAME = 4096


def recv_exact(sock, n: int) -> bytes:
    buf = bytearray()
    while len(buf) < n:
        chunk = sock.recv(n - len(buf))
        if not chunk:
            raise WireError(f"connection closed after {len(buf)}/{n} bytes")
        buf.extend(chunk)
    return bytes(buf)


def send_frame(sock, opcode: int, name: bytes, payload: bytes = b""):
    if len(name) > MAX_NAME:
        raise WireError("name too long")
    body = bytes([opcode]) + _U16.pack(len(name)) + name + payload
    if len(body) > MAX_FRAME:
        raise WireError("frame too large")
    sock.sendall(_U32.pack(len(body)) + body)


def recv_frame(sock) -> tuple[int, bytes, bytes]:
    (length,) = _U32.unpack(recv_exact(sock, 4))
    if length < 3 or length > MAX_FRAME:
        raise WireError(f"bad frame length {length}")
    body = recv_exact(sock, length)
    opcode = body[0]
    (name_len,) = _U16.unpack_from(body, 1)
    if 3 + name_len > len(body):
        raise WireError("name overruns frame")
    name = body[3:3 + name_len]
    payload = body[3 + name_len:]
    return opcode, name, payload


def send_response(sock, status: int, payload: bytes = b""):
    if len(payload) > MAX_FRAME:
        raise WireError("response too large")
    sock.sendall(_RESP.pack(status, len(payload)) + payload)


def recv_response(sock) -> tuple[int, bytes]:
    status, length = _RESP.unpack(recv_exact(sock, _RESP.size))
    if length > MAX_FRAME:
        raise WireError(f"bad response length {length}")
    return status, recv_exact(sock, length)


def pack_str(s: str) -> bytes:
    raw = s.encode("utf-8")
    return _U16.pack(len(raw)) + raw


def unpack_str(buf: bytes, pos: int) -> tuple[str, int]:
    (n,) = _U16.unpack_from(buf, pos)
    pos += 2
    return buf[pos:pos + n].decode("utf-8"), pos + n

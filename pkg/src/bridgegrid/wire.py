"""Length-prefixed binary framing shared by the rendezvous and collectives layers.

Frame layout (all integers big-endian)::

    +---------+----------------+--------+-----------------+
    | version | payload length | type   | payload         |
    | 1 byte  | 4 bytes (u32)  | 1 byte | <length> bytes  |
    +---------+----------------+--------+-----------------+

The length counts payload bytes only.  Message types 0x01-0x3F belong to the
rendezvous protocol, 0x40-0x7F to rank-to-rank transport.  See PROTOCOL.md.
"""

import base64
import enum
import json
import socket
import struct

from .errors import ProtocolError

WIRE_VERSION = 1
HEADER = struct.Struct(">BIB")
MAX_PAYLOAD = 1 << 30


class MsgType(enum.IntEnum):
    # client -> server requests (answered by REPLY or ERROR)
    ATTACH = 0x01
    PUT = 0x02
    FENCE = 0x03
    GET = 0x04
    CONNECT = 0x05
    DISCONNECT = 0x06
    FINALIZE = 0x07
    # client -> server notifications (never answered)
    HEARTBEAT = 0x10
    COLL_BEGIN = 0x11
    COLL_END = 0x12
    # server -> client
    REPLY = 0x20
    ERROR = 0x21
    EVENT = 0x22
    # rank <-> rank transport
    HELLO = 0x40
    DATA = 0x41


def encode_frame(msg_type, payload=b""):
    if len(payload) > MAX_PAYLOAD:
        raise ProtocolError(f"payload of {len(payload)} bytes exceeds limit")
    return HEADER.pack(WIRE_VERSION, len(payload), int(msg_type)) + payload


def _recv_exact(sock, n):
    buf = bytearray()
    while len(buf) < n:
        chunk = sock.recv(n - len(buf))
        if not chunk:
            return None
        buf += chunk
    return bytes(buf)


def read_frame(sock):
    """Read one frame; returns ``(MsgType, payload)`` or ``None`` on clean EOF."""
    try:
        head = _recv_exact(sock, HEADER.size)
    except (ConnectionError, OSError):
        return None
    if head is None:
        return None
    version, length, msg_type = HEADER.unpack(head)
    if version != WIRE_VERSION:
        raise ProtocolError(f"unsupported wire version {version}")
    if length > MAX_PAYLOAD:
        raise ProtocolError(f"frame length {length} exceeds limit")
    try:
        payload = _recv_exact(sock, length) if length else b""
    except (ConnectionError, OSError):
        return None
    if payload is None:
        return None
    try:
        return MsgType(msg_type), payload
    except ValueError:
        raise ProtocolError(f"unknown message type 0x{msg_type:02x}") from None


# Rendezvous payloads are UTF-8 JSON objects; byte strings travel base64-encoded.

def pack_json(obj):
    return json.dumps(obj, separators=(",", ":"), sort_keys=True).encode()


def unpack_json(payload):
    try:
        obj = json.loads(payload.decode())
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise ProtocolError(f"malformed payload: {exc}") from None
    if not isinstance(obj, dict):
        raise ProtocolError("payload must be a JSON object")
    return obj


def b64(data):
    return base64.b64encode(data).decode("ascii")


def unb64(text):
    return base64.b64decode(text.encode("ascii"))


def connect_tcp(host, port, timeout=5.0):
    sock = socket.create_connection((host, port), timeout=timeout)
    sock.settimeout(None)
    sock.setsockopt(socket.IPPROTO_TCP, socket.TCP_NODELAY, 1)
    return sock

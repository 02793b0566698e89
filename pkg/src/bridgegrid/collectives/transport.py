"""Rank-to-rank message transport over framed TCP.

One ``Transport`` per process listens on an ephemeral port; its
``host:port`` string is the endpoint published through the rendezvous
server.  Connections are dialed lazily and reused in both directions.  A
sender always uses the same connection toward a given peer, so messages for
one (group, source, channel, tag) key arrive in send order.
"""

import collections
import dataclasses
import logging
import socket
import struct
import threading
import time
import weakref

from ..errors import PeerUnreachable, ProtocolError
from ..wire import MsgType, connect_tcp, encode_frame, read_frame

log = logging.getLogger(__name__)

_DATA_HEAD = struct.Struct(">IBQ")

P2P = 0
COLLECTIVE = 1

_LIVE = weakref.WeakSet()


def close_all_transports(owner=None):
    """Close open Transports (used after a failed stage).

    ``owner`` restricts this to transports created by that thread ident.
    """
    for transport in list(_LIVE):
        if owner is None or transport.owner == owner:
            transport.close()


@dataclasses.dataclass
class Counters:
    messages_sent: int = 0
    bytes_sent: int = 0
    elements_sent: int = 0

    def reset(self):
        self.messages_sent = self.bytes_sent = self.elements_sent = 0


def parse_endpoint(text):
    if isinstance(text, bytes):
        text = text.decode()
    host, _, port = text.rpartition(":")
    return host, int(port)


def _pack_data(group, src, channel, tag, payload):
    g = group.encode()
    return struct.pack(">H", len(g)) + g + _DATA_HEAD.pack(src, channel, tag) + payload


def _unpack_data(body):
    (glen,) = struct.unpack_from(">H", body)
    group = body[2:2 + glen].decode()
    src, channel, tag = _DATA_HEAD.unpack_from(body, 2 + glen)
    return (group, src, channel, tag), body[2 + glen + _DATA_HEAD.size:]


class _Link:
    def __init__(self, sock):
        self.sock = sock
        self.lock = threading.Lock()
        self.closed = False
        self.peer = None

    def send(self, data):
        with self.lock:
            self.sock.sendall(data)

    def close(self):
        if self.closed:
            return
        self.closed = True
        try:
            self.sock.shutdown(socket.SHUT_RDWR)
        except OSError:
            pass
        self.sock.close()


class Transport:
    def __init__(self, host="127.0.0.1"):
        self._listener = socket.socket(socket.AF_INET, socket.SOCK_STREAM)
        self._listener.bind((host, 0))
        self._listener.listen(128)
        self.host, self.port = self._listener.getsockname()[:2]
        self.endpoint = f"{self.host}:{self.port}"
        self.counters = Counters()
        self.owner = threading.get_ident()
        self._mail = collections.defaultdict(collections.deque)
        self._cond = threading.Condition()
        self._links = {}
        self._all_links = []
        self._dead = set()
        self._llock = threading.Lock()
        self._closed = False
        self._acceptor = threading.Thread(target=self._accept_loop, daemon=True,
                                          name=f"transport-accept-{self.port}")
        self._acceptor.start()
        _LIVE.add(self)

    def __repr__(self):
        return f"<Transport {self.endpoint}>"

    # connection management ------------------------------------------------

    def _accept_loop(self):
        while True:
            try:
                sock, _ = self._listener.accept()
            except OSError:
                return
            sock.setsockopt(socket.IPPROTO_TCP, socket.TCP_NODELAY, 1)
            link = _Link(sock)
            with self._llock:
                self._all_links.append(link)
            threading.Thread(target=self._read_loop, args=(link,), daemon=True).start()

    def _link_to(self, endpoint):
        with self._llock:
            link = self._links.get(endpoint)
            if link is not None and not link.closed:
                return link
            if endpoint in self._dead:
                raise PeerUnreachable(f"peer {endpoint} is gone")
            try:
                sock = connect_tcp(*parse_endpoint(endpoint))
            except OSError as exc:
                self._dead.add(endpoint)
                raise PeerUnreachable(f"cannot reach peer {endpoint}: {exc}") from None
            link = _Link(sock)
            link.peer = endpoint
            link.send(encode_frame(MsgType.HELLO, self.endpoint.encode()))
            self._links[endpoint] = link
            self._all_links.append(link)
        threading.Thread(target=self._read_loop, args=(link,), daemon=True).start()
        return link

    def _read_loop(self, link):
        try:
            while True:
                try:
                    frame = read_frame(link.sock)
                except ProtocolError as exc:
                    log.warning("transport protocol error: %s", exc)
                    break
                if frame is None:
                    break
                msg_type, body = frame
                if msg_type == MsgType.HELLO:
                    link.peer = body.decode()
                    with self._llock:
                        self._links.setdefault(link.peer, link)
                elif msg_type == MsgType.DATA:
                    key, payload = _unpack_data(body)
                    with self._cond:
                        self._mail[key].append(payload)
                        self._cond.notify_all()
        finally:
            link.close()
            with self._llock:
                if link.peer is not None:
                    if self._links.get(link.peer) is link:
                        del self._links[link.peer]
                    if not self._closed:
                        self._dead.add(link.peer)
            with self._cond:
                self._cond.notify_all()

    # messaging ----------------------------------------------------------------

    def send(self, endpoint, group, src, channel, tag, payload):
        payload = bytes(payload)
        if endpoint == self.endpoint:
            with self._cond:
                self._mail[(group, src, channel, tag)].append(payload)
                self._cond.notify_all()
        else:
            link = self._link_to(endpoint)
            try:
                link.send(encode_frame(MsgType.DATA, _pack_data(group, src, channel, tag, payload)))
            except OSError as exc:
                raise PeerUnreachable(f"send to {endpoint} failed: {exc}") from None
        self.counters.messages_sent += 1
        self.counters.bytes_sent += len(payload)

    def recv(self, endpoint, group, src, channel, tag, timeout=None):
        key = (group, src, channel, tag)
        if endpoint != self.endpoint:
            # holding a link to the source lets us notice when it dies
            with self._cond:
                have_mail = bool(self._mail.get(key))
            if not have_mail:
                self._link_to(endpoint)
        deadline = None if timeout is None else time.monotonic() + timeout
        with self._cond:
            while True:
                box = self._mail.get(key)
                if box:
                    payload = box.popleft()
                    if not box:
                        del self._mail[key]
                    return payload
                if endpoint in self._dead:
                    raise PeerUnreachable(f"peer {endpoint} closed before sending tag {tag}")
                if self._closed:
                    raise PeerUnreachable("transport closed")
                wait = 0.5
                if deadline is not None:
                    wait = deadline - time.monotonic()
                    if wait <= 0:
                        raise TimeoutError(f"no message from rank {src} tag {tag}")
                self._cond.wait(min(wait, 0.5))

    def close(self):
        _LIVE.discard(self)
        self._closed = True
        try:
            self._listener.shutdown(socket.SHUT_RDWR)
        except OSError:
            pass
        try:
            self._listener.close()
        except OSError:
            pass
        with self._llock:
            links = list(self._all_links)
        for link in links:
            link.close()
        with self._cond:
            self._cond.notify_all()

    def __enter__(self):
        return self

    def __exit__(self, *exc):
        self.close()

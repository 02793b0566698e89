"""Client side of the rendezvous protocol."""

import itertools
import logging
import os
import queue
import threading
from concurrent.futures import Future

from ..errors import (
    InvalidRequest,
    NoServerFound,
    ProtocolError,
    SessionClosed,
    error_from_code,
)
from ..wire import MsgType, b64, connect_tcp, encode_frame, pack_json, read_frame, unb64, unpack_json
from .contact import default_contact_dir, find_server, list_contacts
from .server import DEFAULT_HEARTBEAT_INTERVAL
from .types import (
    ENDPOINT_KEY,
    ConnectRequest,
    EventKind,
    EventNotification,
    GroupInfo,
    ProcessId,
)

log = logging.getLogger(__name__)


def _event_from_wire(obj):
    kind = EventKind(obj["kind"])
    subject = obj["subject"]
    if kind is EventKind.PROCESS_TERMINATED:
        subject = ProcessId.from_wire(subject)
    else:
        subject = ConnectRequest.from_wire(subject)
    return EventNotification(kind, subject, unb64(obj.get("payload", "")))


class ClientSession:
    """An attached process.  Requests are multiplexed over one connection, so
    several threads may have calls in flight; events run one at a time on a
    dedicated delivery thread."""

    def __init__(self, sock, pid, size, server_address, heartbeat_interval=DEFAULT_HEARTBEAT_INTERVAL):
        self.pid = pid
        self.size = size
        self.server_address = server_address
        self._sock = sock
        self._wlock = threading.Lock()
        self._ids = itertools.count(1)
        self._pending = {}
        self._plock = threading.Lock()
        self._closed = threading.Event()
        self._attached = False
        self._handlers = {kind: {} for kind in EventKind}
        self._buffered = {kind: [] for kind in EventKind}
        self._hids = itertools.count(1)
        self._hlock = threading.Lock()
        self._events = queue.Queue()
        self._heartbeat_interval = heartbeat_interval
        self._coll_ids = itertools.count(1)
        self._reader = threading.Thread(target=self._read_loop, daemon=True, name=f"rdv-client-{pid}")
        self._delivery = threading.Thread(target=self._deliver_loop, daemon=True,
                                          name=f"rdv-events-{pid}")
        self._heartbeat = threading.Thread(target=self._heartbeat_loop, daemon=True,
                                           name=f"rdv-heartbeat-{pid}")
        self._reader.start()
        self._delivery.start()

    @property
    def closed(self):
        return self._closed.is_set()

    @property
    def namespace(self):
        return self.pid.namespace

    @property
    def rank(self):
        return self.pid.rank

    def __repr__(self):
        return f"<ClientSession {self.pid} size={self.size}>"

    # transport -------------------------------------------------------------

    def _send(self, msg_type, obj):
        data = encode_frame(msg_type, pack_json(obj))
        with self._wlock:
            if self._closed.is_set():
                raise SessionClosed(f"session {self.pid} is closed")
            try:
                self._sock.sendall(data)
            except OSError as exc:
                raise SessionClosed(f"lost connection to server: {exc}") from None

    def _request_async(self, msg_type, obj=None):
        fut = Future()
        if self._closed.is_set():
            fut.set_exception(SessionClosed(f"session {self.pid} is closed"))
            return fut
        rid = next(self._ids)
        body = dict(obj or {})
        body["id"] = rid
        with self._plock:
            self._pending[rid] = fut
        try:
            self._send(msg_type, body)
        except SessionClosed as exc:
            with self._plock:
                self._pending.pop(rid, None)
            fut.set_exception(exc)
        return fut

    def _request(self, msg_type, obj=None):
        return self._request_async(msg_type, obj).result()

    def _read_loop(self):
        try:
            while True:
                try:
                    frame = read_frame(self._sock)
                except ProtocolError as exc:
                    log.error("protocol error from server: %s", exc)
                    break
                if frame is None:
                    break
                msg_type, payload = frame
                obj = unpack_json(payload)
                if msg_type == MsgType.EVENT:
                    self._events.put(("event", _event_from_wire(obj)))
                    continue
                with self._plock:
                    fut = self._pending.pop(obj.get("id"), None)
                if fut is None:
                    continue
                if msg_type == MsgType.REPLY:
                    fut.set_result(obj)
                else:
                    fut.set_exception(error_from_code(obj.get("code", ""), obj.get("message", "")))
        finally:
            self._shutdown("connection to server closed")

    def _shutdown(self, reason):
        self._closed.set()
        try:
            self._sock.close()
        except OSError:
            pass
        with self._plock:
            pending, self._pending = self._pending, {}
        for fut in pending.values():
            if not fut.done():
                fut.set_exception(SessionClosed(reason))
        self._events.put(("stop", None))

    def _heartbeat_loop(self):
        while not self._closed.wait(self._heartbeat_interval):
            try:
                self._send(MsgType.HEARTBEAT, {})
            except SessionClosed:
                return

    # events ----------------------------------------------------------------

    def _deliver_loop(self):
        while True:
            item, payload = self._events.get()
            if item == "stop":
                return
            if item == "flush":
                with self._hlock:
                    events, self._buffered[payload] = self._buffered[payload], []
                for event in events:
                    self._run_handlers(event)
                continue
            with self._hlock:
                if not self._handlers[payload.kind] or self._buffered[payload.kind]:
                    self._buffered[payload.kind].append(payload)
                    continue
            self._run_handlers(payload)

    def _run_handlers(self, event):
        with self._hlock:
            handlers = list(self._handlers[event.kind].values())
        for handler in handlers:
            try:
                handler(event)
            except Exception:
                log.exception("event handler for %s failed", event.kind.value)

    def register_event_handler(self, kind, handler):
        """Call ``handler(event)`` for every event of ``kind``, including ones
        that arrived (or were cached by the server) before registration."""
        if self._closed.is_set():
            raise SessionClosed(f"session {self.pid} is closed")
        kind = EventKind(kind)
        with self._hlock:
            hid = next(self._hids)
            self._handlers[kind][hid] = handler
        self._events.put(("flush", kind))
        return hid

    def unregister_event_handler(self, hid):
        with self._hlock:
            for handlers in self._handlers.values():
                handlers.pop(hid, None)

    # PMI operations ----------------------------------------------------------

    def _attach(self, namespace, rank, size, token):
        reply = self._request(MsgType.ATTACH, {
            "namespace": namespace, "rank": rank, "size": size, "token": token,
        })
        self._attached = True
        self._heartbeat.start()
        return reply

    def put(self, key, value):
        if isinstance(value, str):
            value = value.encode()
        self._request(MsgType.PUT, {"key": key, "value": b64(bytes(value))})

    def fence(self):
        return self._request(MsgType.FENCE)["epoch"]

    def get(self, owner, key):
        """Committed value of ``key`` published by ``owner``.

        ``owner`` may be a ProcessId, a ``(namespace, rank)`` pair, or a bare
        rank within this session's own namespace.
        """
        if isinstance(owner, int):
            owner = ProcessId(self.pid.namespace, owner)
        elif not isinstance(owner, ProcessId):
            owner = ProcessId(*owner)
        return unb64(self._request(MsgType.GET, {"owner": owner.to_wire(), "key": key})["value"])

    def _as_request(self, request, tag, timeout_ms):
        if isinstance(request, ConnectRequest):
            return request
        parts = [p if isinstance(p, ProcessId) else ProcessId(*p) for p in request]
        return ConnectRequest(tuple(parts), tag, timeout_ms)

    def iconnect(self, request, tag=None, timeout_ms=None):
        """Start a connect; returns a Future resolving to GroupInfo."""
        request = self._as_request(request, tag, timeout_ms)
        if self.pid not in request.participants:
            raise InvalidRequest(f"{self.pid} is not among the connect participants")
        raw = self._request_async(MsgType.CONNECT, {"request": request.to_wire()})
        out = Future()

        def _done(f):
            exc = f.exception()
            if exc is not None:
                out.set_exception(exc)
                return
            obj = f.result()
            out.set_result(GroupInfo(
                namespace=obj["group"],
                rank_in_group=obj["rank_in_group"],
                participants=tuple(ProcessId.from_wire(p) for p in obj["participants"]),
                endpoints={ProcessId.from_wire(p): unb64(v) for p, v in obj["endpoints"]},
            ))

        raw.add_done_callback(_done)
        return out

    def connect(self, request, tag=None, timeout_ms=None):
        """Collective connect; ``request`` is a ConnectRequest or a list of participants."""
        return self.iconnect(request, tag, timeout_ms).result()

    def disconnect(self, group):
        name = group.namespace if isinstance(group, GroupInfo) else str(group)
        self._request(MsgType.DISCONNECT, {"group": name})

    def publish_endpoint(self, endpoint):
        self.put(ENDPOINT_KEY, endpoint)

    def collective_begin(self, group):
        """Tell the server a collective on ``group`` is in flight; returns its id."""
        coll = next(self._coll_ids)
        self._send(MsgType.COLL_BEGIN, {"group": group, "coll": coll})
        return coll

    def collective_end(self, group, coll):
        try:
            self._send(MsgType.COLL_END, {"group": group, "coll": coll})
        except SessionClosed:
            pass

    def finalize(self):
        if self._closed.is_set():
            return
        try:
            if self._attached:
                self._request(MsgType.FINALIZE)
        except SessionClosed:
            pass
        finally:
            self._attached = False
            try:
                self._sock.shutdown(2)
            except OSError:
                pass
            self._shutdown("session finalized")

    close = finalize

    def abort(self):
        """Drop the connection without finalizing; the server treats it as a crash."""
        if self._closed.is_set():
            return
        self._attached = False
        try:
            self._sock.shutdown(2)
        except OSError:
            pass
        self._shutdown("session aborted")

    def __enter__(self):
        return self

    def __exit__(self, *exc):
        self.finalize()


def _parse_address(text):
    host, _, port = text.rpartition(":")
    if not host or not port.isdigit():
        raise NoServerFound(f"bad server address {text!r}")
    return host, int(port)


def client_attach(env=None, contact_dir=None, heartbeat_interval=DEFAULT_HEARTBEAT_INTERVAL):
    """Attach this process to a rendezvous server.

    Identity comes from ``PMIX_RANK``, ``PMIX_NAMESPACE`` and ``PMIX_SIZE``.
    The server is ``BRIDGEGRID_SERVER`` (with ``BRIDGEGRID_TOKEN``) when set,
    otherwise the newest valid contact file under ``contact_dir``
    (default: ``BRIDGEGRID_CONTACT_DIR`` or a per-user temp directory).
    """
    env = dict(os.environ if env is None else env)
    try:
        rank = int(env["PMIX_RANK"])
        namespace = env["PMIX_NAMESPACE"]
        size = int(env["PMIX_SIZE"])
    except KeyError as exc:
        raise InvalidRequest(f"missing environment variable {exc.args[0]}") from None
    except ValueError as exc:
        raise InvalidRequest(f"bad PMIx environment: {exc}") from None
    directory = contact_dir or default_contact_dir(env)
    token = env.get("BRIDGEGRID_TOKEN")
    if env.get("BRIDGEGRID_SERVER"):
        host, port = _parse_address(env["BRIDGEGRID_SERVER"])
        if token is None:
            for rec in list_contacts(directory):
                if (rec.host, rec.port) == (host, port):
                    token = rec.token
                    break
    else:
        rec = find_server(directory)
        host, port = rec.host, rec.port
        token = rec.token if token is None else token
    try:
        sock = connect_tcp(host, port)
    except OSError as exc:
        raise NoServerFound(f"cannot reach server at {host}:{port}: {exc}") from None
    pid = ProcessId(namespace, rank)
    session = ClientSession(sock, pid, size, f"{host}:{port}", heartbeat_interval)
    try:
        reply = session._attach(namespace, rank, size, token or "")
    except Exception:
        session._shutdown("attach failed")
        raise
    session.pid = ProcessId(reply["namespace"], rank)
    return session

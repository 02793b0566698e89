"""Standalone rendezvous server.

The server never launches processes: workers started elsewhere attach to it
using the credentials in its contact file, publish key-value data, and
synchronize through fence, connect and disconnect collectives.  Every state
mutation happens under one lock, so the order of commits and group-namespace
assignment follows message arrival order.
"""

import dataclasses
import itertools
import json
import logging
import os
import secrets
import socket
import threading
import time
from typing import Dict, Optional, Set, Tuple

from ..errors import (
    BindFailed,
    BridgeGridError,
    ConnectTimeout,
    DuplicateRank,
    InvalidRequest,
    KeyNotVisible,
    NotAMember,
    PeerTerminated,
    ProtocolError,
    TokenMismatch,
    UnknownProcess,
)
from ..wire import MsgType, b64, encode_frame, pack_json, read_frame, unb64, unpack_json
from .contact import default_contact_dir, write_contact_file
from .types import (
    ENDPOINT_KEY,
    ConnectRequest,
    EventKind,
    Namespace,
    ProcessId,
    ServerContactInfo,
)

log = logging.getLogger(__name__)

DEFAULT_HEARTBEAT_INTERVAL = 2.0
DEFAULT_MISSED_HEARTBEATS = 3

# Kinds that would indicate the server launched a process.  No code path
# emits them; tests assert their absence.
LAUNCH_KINDS = frozenset({"spawn", "launch", "exec"})

_server_counter = itertools.count()
_ALL_ACTION_LOGS = []


def all_action_logs():
    """Action logs of every server created in this interpreter."""
    return list(_ALL_ACTION_LOGS)


@dataclasses.dataclass(frozen=True)
class Action:
    kind: str
    detail: str
    t: float


class _Conn:
    def __init__(self, sock, peer):
        self.sock = sock
        self.peer = peer
        self.wlock = threading.Lock()
        self.pid: Optional[ProcessId] = None
        self.last_seen = time.monotonic()
        self.closed = False

    def send(self, msg_type, obj):
        data = encode_frame(msg_type, pack_json(obj))
        with self.wlock:
            if self.closed:
                return False
            try:
                self.sock.sendall(data)
                return True
            except OSError:
                return False

    def close(self):
        with self.wlock:
            if self.closed:
                return
            self.closed = True
        try:
            self.sock.shutdown(socket.SHUT_RDWR)
        except OSError:
            pass
        self.sock.close()


@dataclasses.dataclass
class _Proc:
    pid: ProcessId
    conn: Optional[_Conn] = None
    committed: Dict[str, bytes] = dataclasses.field(default_factory=dict)
    pending: Dict[str, bytes] = dataclasses.field(default_factory=dict)

    def commit(self):
        self.committed.update(self.pending)
        self.pending.clear()


@dataclasses.dataclass
class _NsState:
    size: int
    epoch: int = 0
    fence_waiting: Dict[int, Tuple[_Conn, int]] = dataclasses.field(default_factory=dict)


@dataclasses.dataclass
class _ConnectOp:
    request: ConnectRequest
    arrived: Dict[ProcessId, tuple] = dataclasses.field(default_factory=dict)
    notified: Set[ProcessId] = dataclasses.field(default_factory=set)


@dataclasses.dataclass
class _Group:
    name: str
    members: Tuple[ProcessId, ...]
    request: ConnectRequest
    waiting: Dict[ProcessId, Tuple[_Conn, int]] = dataclasses.field(default_factory=dict)
    inflight: Set[tuple] = dataclasses.field(default_factory=set)
    broken: bool = False


class RendezvousServer:
    def __init__(self, host="127.0.0.1", port=0, contact_dir=None, cluster_id=None,
                 token=None, heartbeat_interval=DEFAULT_HEARTBEAT_INTERVAL,
                 missed_heartbeats=DEFAULT_MISSED_HEARTBEATS, log_path=None):
        self.host = host
        self.port = port
        self.contact_dir = contact_dir or default_contact_dir()
        self.cluster_id = cluster_id
        if cluster_id is not None:
            Namespace("probe", cluster_id)
        self.token = token or secrets.token_hex(16)
        self.heartbeat_interval = heartbeat_interval
        self.missed_heartbeats = missed_heartbeats
        self.log_path = log_path
        n = next(_server_counter)
        self.server_id = str(os.getpid()) if n == 0 else f"{os.getpid()}-{n}"

        self.action_log = []
        _ALL_ACTION_LOGS.append(self.action_log)
        self._lock = threading.RLock()
        self._procs: Dict[ProcessId, _Proc] = {}
        self._namespaces: Dict[str, _NsState] = {}
        self._terminated: Set[ProcessId] = set()
        self._event_cache: Dict[ProcessId, list] = {}
        self._connect_ops: Dict[tuple, _ConnectOp] = {}
        self._groups: Dict[str, _Group] = {}
        self._group_names: Set[str] = set()
        self._group_counter = itertools.count(1)
        self._conns: Set[_Conn] = set()
        self._listener = None
        self._threads = []
        self._stopping = threading.Event()
        self.info: Optional[ServerContactInfo] = None

    # lifecycle -------------------------------------------------------------

    def start(self):
        sock = socket.socket(socket.AF_INET, socket.SOCK_STREAM)
        try:
            sock.bind((self.host, self.port))
            sock.listen(256)
        except OSError as exc:
            sock.close()
            raise BindFailed(f"cannot bind {self.host}:{self.port}: {exc}") from None
        sock.settimeout(0.2)
        self._listener = sock
        host, port = sock.getsockname()[:2]
        try:
            path = write_contact_file(self.contact_dir, self.server_id, host, port,
                                      self.token, os.getpid())
        except BridgeGridError:
            sock.close()
            raise
        self.info = ServerContactInfo(host, port, self.token, path, os.getpid(), self.server_id)
        for target, name in ((self._accept_loop, "accept"), (self._watchdog_loop, "watchdog")):
            t = threading.Thread(target=target, name=f"rdv-{name}-{self.server_id}", daemon=True)
            t.start()
            self._threads.append(t)
        self._record("server_start", f"{host}:{port} contact={path}")
        return self.info

    def stop(self):
        if self._stopping.is_set():
            return
        self._stopping.set()
        if self._listener is not None:
            self._listener.close()
        with self._lock:
            conns = list(self._conns)
        for conn in conns:
            conn.close()
        for t in self._threads:
            t.join(timeout=2.0)
        if self.info is not None:
            try:
                os.remove(self.info.contact_file_path)
            except FileNotFoundError:
                pass
        self._record("server_stop", self.server_id)

    def __enter__(self):
        if self.info is None:
            self.start()
        return self

    def __exit__(self, *exc):
        self.stop()

    def serve_forever(self):
        self._stopping.wait()

    def launch_events(self):
        return [a for a in self.action_log if a.kind in LAUNCH_KINDS]

    # bookkeeping -----------------------------------------------------------

    def _record(self, kind, detail=""):
        action = Action(kind, detail, time.time())
        self.action_log.append(action)
        if self.log_path:
            with open(self.log_path, "a") as fh:
                fh.write(json.dumps(dataclasses.asdict(action)) + "\n")

    def _accept_loop(self):
        while not self._stopping.is_set():
            try:
                sock, peer = self._listener.accept()
            except socket.timeout:
                continue
            except OSError:
                break
            sock.settimeout(None)
            sock.setsockopt(socket.IPPROTO_TCP, socket.TCP_NODELAY, 1)
            conn = _Conn(sock, peer)
            with self._lock:
                self._conns.add(conn)
            t = threading.Thread(target=self._serve_conn, args=(conn,), daemon=True,
                                 name=f"rdv-conn-{peer[1]}")
            t.start()

    def _watchdog_loop(self):
        limit = self.heartbeat_interval * self.missed_heartbeats
        while not self._stopping.wait(self.heartbeat_interval / 2):
            now = time.monotonic()
            with self._lock:
                stale = [c for c in self._conns if c.pid is not None and now - c.last_seen > limit]
            for conn in stale:
                log.warning("no heartbeat from %s for %.1fs", conn.pid, limit)
                conn.close()

    def _serve_conn(self, conn):
        try:
            while True:
                try:
                    frame = read_frame(conn.sock)
                except ProtocolError as exc:
                    log.warning("protocol error from %s: %s", conn.peer, exc)
                    break
                if frame is None:
                    break
                conn.last_seen = time.monotonic()
                msg_type, payload = frame
                self._dispatch(conn, msg_type, payload)
        finally:
            conn.close()
            with self._lock:
                self._conns.discard(conn)
                if conn.pid is not None and not self._stopping.is_set():
                    self._depart(conn.pid, crashed=True)
                conn.pid = None

    def _dispatch(self, conn, msg_type, payload):
        try:
            obj = unpack_json(payload) if payload else {}
        except ProtocolError as exc:
            log.warning("bad payload from %s: %s", conn.peer, exc)
            return
        rid = obj.get("id")
        if msg_type == MsgType.HEARTBEAT:
            return
        if msg_type in (MsgType.COLL_BEGIN, MsgType.COLL_END):
            with self._lock:
                self._on_collective_note(conn, msg_type, obj)
            return
        handler = self._HANDLERS.get(msg_type)
        if handler is None:
            self._error(conn, rid, ProtocolError(f"unexpected message type {msg_type.name}"))
            return
        with self._lock:
            try:
                if msg_type != MsgType.ATTACH and conn.pid is None:
                    raise InvalidRequest("session is not attached")
                handler(self, conn, rid, obj)
            except BridgeGridError as exc:
                self._error(conn, rid, exc)
            except (KeyError, TypeError, ValueError) as exc:
                self._error(conn, rid, InvalidRequest(f"malformed request: {exc}"))

    def _reply(self, conn, rid, obj=None):
        body = dict(obj or {})
        body["id"] = rid
        conn.send(MsgType.REPLY, body)

    def _error(self, conn, rid, exc):
        conn.send(MsgType.ERROR, {"id": rid, "code": exc.code, "message": exc.message})

    def _deliver(self, pid, kind, subject, payload=b""):
        event = {"kind": kind.value, "subject": subject, "payload": b64(payload)}
        proc = self._procs.get(pid)
        if proc is not None and proc.conn is not None:
            proc.conn.send(MsgType.EVENT, event)
            self._record("event_delivered", f"{kind.value} -> {pid}")
        else:
            self._event_cache.setdefault(pid, []).append(event)
            self._record("event_cached", f"{kind.value} -> {pid}")

    def _check_alive(self, pids):
        for p in pids:
            if p in self._terminated:
                raise PeerTerminated(f"process {p} has terminated")

    # request handlers (called with the state lock held) ----------------------

    def _on_attach(self, conn, rid, obj):
        if not secrets.compare_digest(str(obj.get("token", "")), self.token):
            raise TokenMismatch("authentication token does not match this server")
        if conn.pid is not None:
            raise InvalidRequest("connection already attached")
        ns_name = Namespace.parse(str(obj["namespace"])).qualified
        rank, size = int(obj["rank"]), int(obj["size"])
        if size < 1 or not 0 <= rank < size:
            raise InvalidRequest(f"rank {rank} outside namespace size {size}")
        pid = ProcessId(ns_name, rank)
        self._check_alive([pid])
        ns = self._namespaces.get(ns_name)
        if ns is not None and ns.size != size:
            raise InvalidRequest(f"namespace {ns_name} already sized {ns.size}, got {size}")
        proc = self._procs.get(pid)
        if proc is not None and proc.conn is not None:
            raise DuplicateRank(f"{pid} is already attached")
        if ns is None:
            self._namespaces[ns_name] = _NsState(size)
        if proc is None:
            proc = self._procs[pid] = _Proc(pid)
        proc.conn = conn
        conn.pid = pid
        self._record("attach", str(pid))
        self._reply(conn, rid, {"server_id": self.server_id, "cluster_id": self.cluster_id,
                                "namespace": ns_name})
        for event in self._event_cache.pop(pid, []):
            conn.send(MsgType.EVENT, event)
            self._record("event_delivered", f"{event['kind']} -> {pid} (cached)")

    def _on_put(self, conn, rid, obj):
        proc = self._procs[conn.pid]
        proc.pending[str(obj["key"])] = unb64(obj["value"])
        self._record("put", f"{conn.pid} {obj['key']}")
        self._reply(conn, rid)

    def _on_get(self, conn, rid, obj):
        owner = ProcessId.from_wire(obj["owner"])
        key = str(obj["key"])
        if owner == conn.pid:
            proc = self._procs[owner]
            value = proc.pending.get(key, proc.committed.get(key))
        else:
            ns = self._namespaces.get(owner.namespace)
            if ns is None or owner.rank >= ns.size:
                raise UnknownProcess(f"unknown process {owner}")
            self._check_alive([owner])
            proc = self._procs.get(owner)
            value = proc.committed.get(key) if proc is not None else None
        if value is None:
            raise KeyNotVisible(f"key {key!r} of {owner} is not visible")
        self._reply(conn, rid, {"value": b64(value)})

    def _on_fence(self, conn, rid, obj):
        pid = conn.pid
        ns = self._namespaces[pid.namespace]
        self._check_alive(ProcessId(pid.namespace, r) for r in range(ns.size))
        if pid.rank in ns.fence_waiting:
            raise InvalidRequest(f"{pid} is already in a fence")
        ns.fence_waiting[pid.rank] = (conn, rid)
        self._record("fence_enter", f"{pid} epoch={ns.epoch}")
        if len(ns.fence_waiting) < ns.size:
            return
        for r in range(ns.size):
            proc = self._procs.get(ProcessId(pid.namespace, r))
            if proc is not None:
                proc.commit()
        waiting, ns.fence_waiting = ns.fence_waiting, {}
        epoch = ns.epoch
        ns.epoch += 1
        self._record("fence_complete", f"{pid.namespace} epoch={epoch}")
        for _, (c, r_id) in sorted(waiting.items()):
            self._reply(c, r_id, {"epoch": epoch})

    def _on_connect(self, conn, rid, obj):
        pid = conn.pid
        request = ConnectRequest.from_wire(obj["request"])
        if pid not in request.participants:
            raise InvalidRequest(f"{pid} is not among the connect participants")
        self._check_alive(request.participants)
        key = request.key
        op = self._connect_ops.get(key)
        if op is None:
            op = self._connect_ops[key] = _ConnectOp(request)
        if pid in op.arrived:
            raise InvalidRequest(f"{pid} already joined this connect")
        self._procs[pid].commit()
        timer = None
        if request.timeout_ms is not None:
            timer = threading.Timer(request.timeout_ms / 1000.0, self._expire_connect,
                                    (key, op, pid, rid))
            timer.daemon = True
        op.arrived[pid] = (conn, rid, timer)
        self._record("connect_enter", f"{pid} tag={request.tag} n={len(request.participants)}")
        if len(op.arrived) == len(request.participants):
            self._complete_connect(key, op)
            return
        if timer is not None:
            timer.start()
        self._notify_laggards(op, pid)

    def _notify_laggards(self, op, requester):
        subject = op.request.to_wire()
        for p in op.request.participants:
            if p in op.arrived or p in op.notified:
                continue
            op.notified.add(p)
            self._record("notify", f"CONNECT_REQUESTED -> {p}")
            self._deliver(p, EventKind.CONNECT_REQUESTED, subject, str(requester).encode())

    def _expire_connect(self, key, op, pid, rid):
        with self._lock:
            if self._connect_ops.get(key) is not op:
                return
            entry = op.arrived.get(pid)
            if entry is None or entry[1] != rid:
                return
            del op.arrived[pid]
            if not op.arrived:
                del self._connect_ops[key]
            self._record("connect_timeout", f"{pid} tag={op.request.tag}")
            self._error(entry[0], rid, ConnectTimeout(
                f"connect timed out after {op.request.timeout_ms} ms"))

    def _new_group_name(self):
        while True:
            name = Namespace(f"grp-{next(self._group_counter)}", self.cluster_id).qualified
            if name not in self._group_names and name not in self._namespaces:
                self._group_names.add(name)
                return name

    def _complete_connect(self, key, op):
        del self._connect_ops[key]
        members = tuple(sorted(op.request.participants))
        name = self._new_group_name()
        endpoints = []
        for p in members:
            value = self._procs[p].committed.get(ENDPOINT_KEY)
            if value is not None:
                endpoints.append([p.to_wire(), b64(value)])
        self._groups[name] = _Group(name, members, op.request)
        self._record("connect_complete", f"{name} members={len(members)} tag={op.request.tag}")
        for idx, p in enumerate(members):
            conn, rid, timer = op.arrived[p]
            if timer is not None:
                timer.cancel()
            self._reply(conn, rid, {
                "group": name,
                "rank_in_group": idx,
                "participants": [m.to_wire() for m in members],
                "endpoints": endpoints,
            })
            self._deliver(p, EventKind.GROUP_READY, op.request.to_wire(), name.encode())

    def _on_disconnect(self, conn, rid, obj):
        pid = conn.pid
        group = self._groups.get(str(obj["group"]))
        if group is None or pid not in group.members:
            raise NotAMember(f"{pid} is not a member of group {obj['group']!r}")
        if group.broken:
            raise PeerTerminated(f"a member of {group.name} has terminated")
        self._check_alive(group.members)
        if pid in group.waiting:
            raise InvalidRequest(f"{pid} already disconnecting from {group.name}")
        group.waiting[pid] = (conn, rid)
        self._record("disconnect_enter", f"{pid} {group.name}")
        self._check_disconnect(group)

    def _check_disconnect(self, group):
        if len(group.waiting) < len(group.members) or group.inflight:
            return
        del self._groups[group.name]
        self._record("disconnect_complete", group.name)
        for _, (c, r_id) in sorted(group.waiting.items()):
            self._reply(c, r_id)

    def _on_collective_note(self, conn, msg_type, obj):
        group = self._groups.get(str(obj.get("group")))
        if conn.pid is None or group is None or conn.pid not in group.members:
            return
        token = (conn.pid, obj.get("coll"))
        if msg_type == MsgType.COLL_BEGIN:
            group.inflight.add(token)
        else:
            group.inflight.discard(token)
            self._check_disconnect(group)

    def _on_finalize(self, conn, rid, obj):
        pid = conn.pid
        self._depart(pid, crashed=False)
        conn.pid = None
        self._record("finalize", str(pid))
        self._reply(conn, rid)

    _HANDLERS = {
        MsgType.ATTACH: _on_attach,
        MsgType.PUT: _on_put,
        MsgType.GET: _on_get,
        MsgType.FENCE: _on_fence,
        MsgType.CONNECT: _on_connect,
        MsgType.DISCONNECT: _on_disconnect,
        MsgType.FINALIZE: _on_finalize,
    }

    # failure handling ---------------------------------------------------------

    def _depart(self, pid, crashed):
        """Detach ``pid``; fail every pending collective that still needed it."""
        proc = self._procs.get(pid)
        if proc is not None:
            proc.conn = None
        failed = []
        ns = self._namespaces.get(pid.namespace)
        if ns is not None and ns.fence_waiting:
            if crashed or pid.rank not in ns.fence_waiting:
                failed.extend(v for r, v in ns.fence_waiting.items() if r != pid.rank)
                ns.fence_waiting = {}
        for key, op in list(self._connect_ops.items()):
            if pid not in op.request.participants:
                continue
            own = op.arrived.pop(pid, None)
            if own is not None and own[2] is not None:
                own[2].cancel()
            for conn, rid, timer in op.arrived.values():
                if timer is not None:
                    timer.cancel()
                failed.append((conn, rid))
            del self._connect_ops[key]
        peers = set()
        for group in self._groups.values():
            if pid not in group.members:
                continue
            peers.update(group.members)
            group.inflight = {t for t in group.inflight if t[0] != pid}
            others = {p: v for p, v in group.waiting.items() if p != pid}
            group.broken = True
            failed.extend(others.values())
            group.waiting = {}
        if crashed or failed:
            self._terminated.add(pid)
            self._record("terminated", f"{pid} crashed={crashed}")
            exc = PeerTerminated(f"process {pid} terminated")
            for conn, rid in failed:
                self._error(conn, rid, exc)
            if ns is not None:
                peers.update(ProcessId(pid.namespace, r) for r in range(ns.size))
            peers.discard(pid)
            for p in sorted(peers):
                other = self._procs.get(p)
                if other is not None and other.conn is not None:
                    self._deliver(p, EventKind.PROCESS_TERMINATED, pid.to_wire())

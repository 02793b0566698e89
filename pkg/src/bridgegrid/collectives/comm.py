"""Communicators and the collective algorithms that run over them."""

import contextlib
import dataclasses
import struct
import threading

import numpy as np

from ..errors import (
    BadRoot,
    ConcurrentCollective,
    InvalidRequest,
    LengthMismatch,
    MissingEndpoint,
)
from .reduce import AllreduceVariant, ReduceOp, from_wire, sequential_fold, to_wire
from .transport import COLLECTIVE, P2P

OK = 0
ERR_LENGTH = 1

# tags for collective traffic: seq * STEP_SPAN + step
STEP_SPAN = 1024

_RING_HEAD = struct.Struct(">QB")


@dataclasses.dataclass
class CommCounters:
    messages: int = 0
    bytes: int = 0
    elements: int = 0

    def reset(self):
        self.messages = self.bytes = self.elements = 0


def _pack_items(items):
    out = [struct.pack(">I", len(items))]
    for idx, data in items:
        out.append(struct.pack(">II", idx, len(data)))
        out.append(data)
    return b"".join(out)


def _unpack_items(data):
    (count,) = struct.unpack_from(">I", data)
    pos = 4
    items = []
    for _ in range(count):
        idx, length = struct.unpack_from(">II", data, pos)
        pos += 8
        items.append((idx, bytes(data[pos:pos + length])))
        pos += length
    return items


def chunk_bounds(length, size):
    """Ring chunk c covers ``[bounds[c], bounds[c+1])``."""
    return [c * length // size for c in range(size + 1)]


class Communicator:
    """A connected group as seen from one member.

    ``endpoints[i]`` is the ``host:port`` of rank ``i``.  At most one
    collective may be in flight per communicator; a second concurrent call
    raises ConcurrentCollective instead of corrupting the tag sequence.
    """

    def __init__(self, group, rank, size, endpoints, transport, session=None, owns_transport=False):
        if not 0 <= rank < size:
            raise InvalidRequest(f"rank {rank} outside group of size {size}")
        if len(endpoints) != size:
            raise MissingEndpoint(f"expected {size} endpoints, got {len(endpoints)}")
        self.group = str(group)
        self.rank = rank
        self.size = size
        self.endpoints = list(endpoints)
        self.transport = transport
        self.session = session
        self.counters = CommCounters()
        self.timeout = None
        self._owns_transport = owns_transport
        self._busy = threading.Lock()
        self._seq = 0

    def __repr__(self):
        return f"<Communicator {self.group} rank={self.rank}/{self.size}>"

    def close(self):
        if self._owns_transport:
            self.transport.close()

    # point to point ---------------------------------------------------------

    def _check_rank(self, rank, what="rank"):
        if not isinstance(rank, (int, np.integer)) or not 0 <= rank < self.size:
            raise InvalidRequest(f"{what} {rank} outside group of size {self.size}")

    def _raw_send(self, dest, channel, tag, payload, elements=0):
        self.transport.send(self.endpoints[dest], self.group, self.rank, channel, tag, payload)
        self.counters.messages += 1
        self.counters.bytes += len(payload)
        self.counters.elements += elements

    def _raw_recv(self, src, channel, tag):
        return self.transport.recv(self.endpoints[src], self.group, src, channel, tag,
                                   timeout=self.timeout)

    def send(self, dest, tag, payload):
        self._check_rank(dest, "destination")
        self._raw_send(dest, P2P, tag, bytes(payload))

    def recv(self, src, tag):
        self._check_rank(src, "source")
        return self._raw_recv(src, P2P, tag)

    # collective bookkeeping -------------------------------------------------

    @contextlib.contextmanager
    def _collective(self):
        if not self._busy.acquire(blocking=False):
            raise ConcurrentCollective(f"another collective is in flight on {self.group}")
        coll = None
        try:
            self._seq += 1
            if self.session is not None:
                coll = self.session.collective_begin(self.group)
            yield self._seq * STEP_SPAN
        finally:
            if coll is not None:
                self.session.collective_end(self.group, coll)
            self._busy.release()

    def _vrank(self, root):
        return (self.rank - root) % self.size

    def _real(self, vrank, root):
        return (vrank + root) % self.size

    # tree building blocks (run inside an open collective) ----------------

    # ``itemsize`` > 0 counts payload data as elements of that many bytes

    def _bcast(self, base, root, status, payload, itemsize=0):
        n = self.size
        vr = self._vrank(root)
        mask = 1
        while mask < n:
            if vr & mask:
                msg = self._raw_recv(self._real(vr - mask, root), COLLECTIVE, base)
                status, payload = msg[0], msg[1:]
                break
            mask <<= 1
        mask >>= 1
        msg = bytes([status]) + payload
        while mask > 0:
            if vr + mask < n:
                self._raw_send(self._real(vr + mask, root), COLLECTIVE, base, msg,
                               elements=len(payload) // itemsize if itemsize else 0)
            mask >>= 1
        return status, payload

    def _gather(self, base, root, payload, itemsize=0):
        n = self.size
        vr = self._vrank(root)
        items = [(self.rank, payload)]
        mask = 1
        while mask < n:
            if vr & mask:
                count = sum(len(d) for _, d in items) // itemsize if itemsize else 0
                self._raw_send(self._real(vr - mask, root), COLLECTIVE, base, _pack_items(items),
                               elements=count)
                return None
            if vr + mask < n:
                items.extend(_unpack_items(
                    self._raw_recv(self._real(vr + mask, root), COLLECTIVE, base)))
            mask <<= 1
        items.sort()
        return [data for _, data in items]

    # byte collectives ---------------------------------------------------------

    def barrier(self):
        """Dissemination barrier: ceil(log2 size) rounds."""
        with self._collective() as base:
            n = self.size
            dist, step = 1, 0
            while dist < n:
                self._raw_send((self.rank + dist) % n, COLLECTIVE, base + step, b"")
                self._raw_recv((self.rank - dist) % n, COLLECTIVE, base + step)
                dist <<= 1
                step += 1

    def broadcast(self, root, payload=b""):
        self._check_root(root)
        with self._collective() as base:
            _, out = self._bcast(base, root, OK, bytes(payload) if self.rank == root else b"")
            return bytes(out)

    def gather(self, root, payload):
        """List of every rank's payload on ``root``; ``None`` elsewhere."""
        self._check_root(root)
        with self._collective() as base:
            return self._gather(base, root, bytes(payload))

    def scatter(self, root, items=None):
        self._check_root(root)
        with self._collective() as base:
            n = self.size
            vr = self._vrank(root)
            if vr == 0:
                if items is None or len(items) != n:
                    status, mine = ERR_LENGTH, []
                else:
                    status = OK
                    mine = [((i - root) % n, bytes(item)) for i, item in enumerate(items)]
                top = 1
                while top < n:
                    top <<= 1
            else:
                low = vr & -vr
                msg = self._raw_recv(self._real(vr - low, root), COLLECTIVE, base)
                status, mine = msg[0], _unpack_items(msg[1:])
                top = low
            held = dict(mine)
            m = top >> 1
            while m >= 1:
                child = vr + m
                if child < n:
                    part = [] if status != OK else [(v, held[v]) for v in range(child, min(child + m, n))]
                    self._raw_send(self._real(child, root), COLLECTIVE, base,
                                   bytes([status]) + _pack_items(part))
                m >>= 1
            if status != OK:
                raise LengthMismatch(f"scatter needs exactly {n} items at root {root}")
            return held[vr]

    def allgather(self, payload):
        with self._collective() as base:
            gathered = self._gather(base, 0, bytes(payload))
            packed = _pack_items(list(enumerate(gathered))) if self.rank == 0 else b""
            _, packed = self._bcast(base + 1, 0, OK, packed)
            return [data for _, data in _unpack_items(packed)]

    def _check_root(self, root):
        if not isinstance(root, (int, np.integer)) or not 0 <= root < self.size:
            raise BadRoot(f"root {root} outside group of size {self.size}")

    # numeric collectives ------------------------------------------------------

    def allreduce_tree(self, vector, op=ReduceOp.SUM):
        """Gather to rank 0, fold in ascending rank order, broadcast.

        The result is bitwise equal to ``sequential_fold`` over the ranks'
        vectors, independent of group size.
        """
        op = ReduceOp(op)
        vec = np.asarray(vector, dtype=np.float64).ravel()
        with self._collective() as base:
            if self.size == 1:
                return vec.copy()
            gathered = self._gather(base, 0, to_wire(vec), itemsize=8)
            status, out = OK, b""
            if self.rank == 0:
                lengths = {len(g) for g in gathered}
                if len(lengths) != 1:
                    status = ERR_LENGTH
                else:
                    out = to_wire(sequential_fold([from_wire(g) for g in gathered], op))
            status, out = self._bcast(base + 1, 0, status, out, itemsize=8)
            if status != OK:
                raise LengthMismatch(f"allreduce vectors differ in length on {self.group}")
            return from_wire(out)

    def allreduce_ring(self, vector, op=ReduceOp.SUM):
        """Reduce-scatter then allgather around the ring ``rank -> rank+1``."""
        op = ReduceOp(op)
        acc = np.array(vector, dtype=np.float64, copy=True).ravel()
        with self._collective() as base:
            n = self.size
            if n == 1:
                return acc
            length = acc.size
            bounds = chunk_bounds(length, n)
            right, left = (self.rank + 1) % n, (self.rank - 1) % n
            status = OK

            def exchange(step, send_chunk, recv_chunk, combine):
                nonlocal status
                lo, hi = bounds[send_chunk], bounds[send_chunk + 1]
                body = b"" if status != OK else to_wire(acc[lo:hi])
                self._raw_send(right, COLLECTIVE, base + step,
                               _RING_HEAD.pack(length, status) + body,
                               elements=0 if status != OK else hi - lo)
                msg = self._raw_recv(left, COLLECTIVE, base + step)
                their_len, their_status = _RING_HEAD.unpack_from(msg)
                if their_status != OK or their_len != length:
                    status = ERR_LENGTH
                if status != OK:
                    return
                lo, hi = bounds[recv_chunk], bounds[recv_chunk + 1]
                incoming = from_wire(msg[_RING_HEAD.size:])
                acc[lo:hi] = op.combine(incoming, acc[lo:hi]) if combine else incoming

            for s in range(n - 1):
                exchange(s, (self.rank - s) % n, (self.rank - s - 1) % n, True)
            for s in range(n - 1):
                exchange(n - 1 + s, (self.rank + 1 - s) % n, (self.rank - s) % n, False)
            if status != OK:
                raise LengthMismatch(f"allreduce vectors differ in length on {self.group}")
            return acc

    def allreduce(self, vector, op=ReduceOp.SUM, variant=AllreduceVariant.TREE):
        if AllreduceVariant.parse(variant) is AllreduceVariant.RING:
            return self.allreduce_ring(vector, op)
        return self.allreduce_tree(vector, op)


def communicator_from_group(session, group_info, transport):
    """Build a Communicator for a group returned by ``session.connect``.

    Every member must have put its transport endpoint (``publish_endpoint``)
    and fenced before connecting.
    """
    endpoints = []
    for pid in group_info.participants:
        raw = group_info.endpoints.get(pid)
        if not raw:
            raise MissingEndpoint(f"{pid} published no endpoint before connect")
        endpoints.append(raw.decode() if isinstance(raw, bytes) else str(raw))
    return Communicator(group_info.namespace, group_info.rank_in_group, group_info.size,
                        endpoints, transport, session=session)


# module-level spellings of the collective API
def barrier(comm):
    comm.barrier()


def broadcast(comm, root, payload=b""):
    return comm.broadcast(root, payload)


def gather(comm, root, payload):
    return comm.gather(root, payload)


def scatter(comm, root, items=None):
    return comm.scatter(root, items)


def allgather(comm, payload):
    return comm.allgather(payload)


def allreduce_tree(comm, vector, op=ReduceOp.SUM):
    return comm.allreduce_tree(vector, op)


def allreduce_ring(comm, vector, op=ReduceOp.SUM):
    return comm.allreduce_ring(vector, op)

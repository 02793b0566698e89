"""Rendezvous conformance scenarios, run as taskgrid stages in worker processes.

Each function is a stage ``fn(partition, session, args)``.  Checks local to
one rank are asserted in place (a failure surfaces as WorkerFailed); values
that must agree across ranks are returned for the test to compare.
"""

import os
import threading
import time

from bridgegrid.collectives import connect_world
from bridgegrid.errors import ConnectTimeout, KeyNotVisible, UnknownProcess
from bridgegrid.rendezvous.client import client_attach
from bridgegrid.rendezvous.types import ConnectRequest, EventKind, ProcessId

TIMEOUT_SLACK = 2.0


def _everyone(session):
    return [ProcessId(session.namespace, r) for r in range(session.size)]


def put_fence_get(partition, session, args=None):
    me, n = session.rank, session.size
    session.put("ep", f"addr-{me}")
    assert session.get(me, "ep") == f"addr-{me}".encode()  # owner sees its own put
    if n > 1:
        # nobody has fenced yet, so peers' keys cannot be committed
        session.put("probe-before", b"x")
        peer = (me + 1) % n
        try:
            session.get(peer, "never-put")
        except KeyNotVisible:
            pass
        else:
            raise AssertionError("uncommitted key visible")
    session.put("twice", b"first")
    session.put("twice", f"second-{me}")
    session.fence()
    return [(session.get(r, "ep").decode(), session.get(r, "twice").decode()) for r in range(n)]


def fence_atomicity(partition, session, args):
    # staggered puts: every key put before its owner's fence is visible after ours
    me = session.rank
    delay = (args["seed"] * 7 + me * 13) % 5 * 0.01
    for i in range(3):
        session.put(f"k{i}", f"{me}:{i}")
        time.sleep(delay)
    session.fence()
    out = []
    for r in range(session.size):
        out.append([session.get(r, f"k{i}").decode() for i in range(3)])
    return out


def connect_agreement(partition, session, args=None):
    session.put("endpoint", f"ep-{session.rank}")
    session.fence()
    participants = list(reversed(_everyone(session)))
    group = session.connect(participants, tag="agree")
    endpoints = sorted((str(p), v.decode()) for p, v in group.endpoints.items())
    session.disconnect(group)
    return {"group": group.namespace, "rank_in_group": group.rank_in_group,
            "endpoints": endpoints, "participants": [str(p) for p in group.participants]}


def tagged_connects(partition, session, args=None):
    everyone = _everyone(session)
    fa = session.iconnect(everyone, tag="a")
    fb = session.iconnect(everyone, tag="b")
    ga, gb = fb.result(timeout=20), fa.result(timeout=20)
    assert ga.namespace != gb.namespace
    session.disconnect(ga)
    session.disconnect(gb)
    return sorted([ga.namespace, gb.namespace])


def namespace_unique(partition, session, args=None):
    everyone = _everyone(session)
    names = []
    for i in range(3):
        g = session.connect(everyone, tag="again")
        names.append(g.namespace)
        session.disconnect(g)
    assert len(set(names)) == 3, names
    solo = session.connect([session.pid], tag=f"solo-{session.rank}")
    assert solo.size == 1 and solo.rank_in_group == 0
    names.append(solo.namespace)
    return names


def laggard_event(partition, session, args=None):
    everyone = _everyone(session)
    if session.rank == 0:
        group = session.connect(everyone, tag="lag", timeout_ms=20000)
        return {"group": group.namespace, "events": 0}
    got = []
    seen = threading.Event()

    def handler(ev):
        got.append(ev)
        seen.set()

    session.register_event_handler(EventKind.CONNECT_REQUESTED, handler)
    assert seen.wait(20), "no CONNECT_REQUESTED event"
    req = got[0].subject
    assert isinstance(req, ConnectRequest) and req.tag == "lag"
    group = session.connect(req)
    time.sleep(0.1)  # a duplicate would have arrived by now
    return {"group": group.namespace, "events": len(got)}


def cached_event(partition, session, args=None):
    """Ranks > 0 attach only after rank 0's connect is pending."""
    env = dict(os.environ)
    rank, size, ns = int(env["PMIX_RANK"]), int(env["PMIX_SIZE"]), env["PMIX_NAMESPACE"]
    everyone = [ProcessId(ns, r) for r in range(size)]
    if rank == 0:
        s = client_attach(env)
        try:
            group = s.connect(everyone, tag="cached", timeout_ms=20000)
            return {"group": group.namespace, "events": 0}
        finally:
            s.finalize()
    time.sleep(0.5)
    s = client_attach(env)
    try:
        got, seen = [], threading.Event()
        time.sleep(0.2)  # event is buffered in the session before anyone listens

        def handler(ev):
            got.append(ev)
            seen.set()

        s.register_event_handler(EventKind.CONNECT_REQUESTED, handler)
        assert seen.wait(20), "cached CONNECT_REQUESTED never delivered"
        group = s.connect(got[0].subject)
        time.sleep(0.1)
        return {"group": group.namespace, "events": len(got)}
    finally:
        s.finalize()


def connect_timeout(partition, session, args=None):
    peer = ProcessId(session.namespace, (session.rank + 1) % session.size)
    t0 = time.monotonic()
    try:
        session.connect([session.pid, peer], tag=f"lonely-{session.rank}", timeout_ms=100)
    except ConnectTimeout:
        elapsed = time.monotonic() - t0
    else:
        raise AssertionError("connect did not time out")
    assert elapsed >= 0.1, f"timeout fired early after {elapsed:.3f}s"
    assert elapsed < 0.1 + TIMEOUT_SLACK, f"timeout fired late after {elapsed:.3f}s"
    session.fence()  # nobody leaves while a peer's request still names them
    return elapsed


def disconnect_after_collectives(partition, session, args=None):
    """A barrier runs on the group, then every rank but 0 marks another
    collective in flight for 0.4 s.  Nobody's disconnect may return before
    the last of those collectives ends."""
    comm = connect_world(session, tag="ordering")
    hold = 0.4
    try:
        comm.barrier()
        ender = None
        ended = {}
        if comm.rank != 0:
            coll = session.collective_begin(comm.group)

            def finish():
                time.sleep(hold)
                ended["t"] = time.monotonic()
                session.collective_end(comm.group, coll)

            ender = threading.Thread(target=finish)
            ender.start()
        t0 = time.monotonic()
        session.disconnect(comm.group)
        t_disc = time.monotonic()
        if ender is not None:
            ender.join(10)
            assert t_disc >= ended["t"], (t_disc, ended)
        if comm.size > 1:
            assert t_disc - t0 >= hold - 0.05, t_disc - t0
        return t_disc - t0
    finally:
        comm.transport.close()


def handlers_and_errors(partition, session, args=None):
    try:
        session.get(ProcessId("no-such-namespace", 0), "k")
    except UnknownProcess:
        pass
    else:
        raise AssertionError("get on unknown namespace succeeded")
    everyone = _everyone(session)
    if session.rank == 0:
        session.fence()
        group = session.connect(everyone, tag="handlers", timeout_ms=20000)
        return group.namespace
    calls = {"a": 0, "b": 0, "gone": 0}
    ready = threading.Event()

    def mk(name):
        def handler(ev):
            calls[name] += 1
            if calls["a"] and calls["b"]:
                ready.set()
        return handler

    session.register_event_handler(EventKind.CONNECT_REQUESTED, mk("a"))
    session.register_event_handler(EventKind.CONNECT_REQUESTED, mk("b"))
    hid = session.register_event_handler(EventKind.CONNECT_REQUESTED, mk("gone"))
    session.unregister_event_handler(hid)
    session.fence()
    assert ready.wait(20)
    group = session.connect(everyone, tag="handlers")
    assert calls == {"a": 1, "b": 1, "gone": 0}, calls
    return group.namespace


SCENARIOS = {
    "put_fence_get": (put_fence_get, True),
    "fence_atomicity": (fence_atomicity, True),
    "connect_agreement": (connect_agreement, True),
    "tagged_connects": (tagged_connects, True),
    "namespace_unique": (namespace_unique, True),
    "laggard_event": (laggard_event, True),
    "cached_event": (cached_event, False),
    "connect_timeout": (connect_timeout, True),
    "disconnect_after_collectives": (disconnect_after_collectives, True),
    "handlers_and_errors": (handlers_and_errors, True),
}


# cross-rank checks ------------------------------------------------------------

def _same(results):
    assert all(r == results[0] for r in results), results


def check(name, results, n):
    """Assert the agreement properties of scenario ``name`` over all ranks' results."""
    assert len(results) == n
    if name == "put_fence_get":
        _same(results)
        assert [tuple(x) for x in results[0]] == [(f"addr-{r}", f"second-{r}") for r in range(n)]
    elif name == "fence_atomicity":
        for seen in results:
            assert seen == [[f"{r}:{i}" for i in range(3)] for r in range(n)]
    elif name == "connect_agreement":
        group = results[0]["group"]
        for rank, res in enumerate(results):
            assert res["group"] == group
            assert res["endpoints"] == results[0]["endpoints"]
            assert res["participants"] == results[0]["participants"]
            assert res["rank_in_group"] == rank
        assert [v for _, v in results[0]["endpoints"]] == sorted(f"ep-{r}" for r in range(n))
    elif name == "tagged_connects":
        _same(results)
        assert len(set(results[0])) == 2
    elif name == "namespace_unique":
        shared = [r[:3] for r in results]
        _same(shared)
        solos = [r[3] for r in results]
        assert len(set(solos)) == n and not set(solos) & set(shared[0])
    elif name in ("laggard_event", "cached_event"):
        _same([r["group"] for r in results])
        assert [r["events"] for r in results[1:]] == [1] * (n - 1)
    elif name == "connect_timeout":
        assert all(0.1 <= t < 0.1 + TIMEOUT_SLACK for t in results), results
    elif name == "disconnect_after_collectives":
        if n > 1:
            assert all(t >= 0.35 for t in results), results
    elif name == "handlers_and_errors":
        _same(results)
    else:
        raise KeyError(name)


def run_case(pool, name, n, seed=0):
    from bridgegrid.taskgrid import Dataset

    fn, attach = SCENARIOS[name]
    data = Dataset([[] for _ in range(n)])
    results = pool.run(data, fn, {"seed": seed}, attach=attach, timeout=30)
    check(name, results, n)
    return results

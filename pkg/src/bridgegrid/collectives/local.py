"""In-process communicator groups, one Transport per simulated rank."""

import threading

from .comm import Communicator
from .transport import Transport


def local_communicators(size, group="local", host="127.0.0.1"):
    """``size`` communicators wired to each other over loopback TCP.

    Meant for tests: drive each one from its own thread and call ``close()``
    on all of them afterwards.
    """
    transports = [Transport(host) for _ in range(size)]
    endpoints = [t.endpoint for t in transports]
    return [Communicator(group, r, size, endpoints, t, owns_transport=True)
            for r, t in enumerate(transports)]


def run_ranks(comms, fn, timeout=60):
    """Run ``fn(comm)`` on every communicator concurrently; return results by rank.

    The first exception raised by any rank is re-raised after all threads end.
    """
    results = [None] * len(comms)
    errors = [None] * len(comms)

    def body(i):
        try:
            results[i] = fn(comms[i])
        except BaseException as exc:  # noqa: BLE001 - reported to caller
            errors[i] = exc

    threads = [threading.Thread(target=body, args=(i,), daemon=True) for i in range(len(comms))]
    for t in threads:
        t.start()
    for t in threads:
        t.join(timeout)
        if t.is_alive():
            raise TimeoutError("a rank did not finish in time")
    for exc in errors:
        if exc is not None:
            raise exc
    return results

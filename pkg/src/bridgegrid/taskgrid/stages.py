"""Stage functions shipped with bridgegrid.

A stage is called as ``fn(partition, session)`` or ``fn(partition, session,
args)`` inside a worker.  Workers refer to these by their short names.
"""

import json
import os
import signal


def echo(partition, session, args=None):
    """Return the partition unchanged (plus identity when attached)."""
    ident = None if session is None else (session.namespace, session.rank, session.size)
    return {"records": list(partition), "identity": ident, "args": args}


def partition_sizes(partition, session, args=None):
    """Fence, then allgather every worker's partition size over a communicator."""
    from ..collectives import connect_world, leave_world

    comm = connect_world(session, tag=(args or {}).get("tag", "sizes"))
    try:
        sizes = comm.allgather(json.dumps(len(partition)).encode())
        return [json.loads(s) for s in sizes]
    finally:
        leave_world(comm)


def fail_on(partition, session, args):
    """Fault injection: raise (or die) on ``args["worker"]``; others fence and wait.

    ``args["how"]`` is ``"raise"`` or ``"kill"`` (SIGKILL on itself).
    """
    target = args["worker"]
    if session.rank == target:
        if args.get("how") == "kill":
            os.kill(os.getpid(), signal.SIGKILL)
        raise RuntimeError(f"injected failure on worker {target}")
    session.put("alive", b"1")
    session.fence()
    return "survived"


def ptycho_reconstruct(partition, session, args):
    """Distributed reconstruction over this worker's frame records.

    ``args``: ``config`` (SolverConfig fields), ``object_shape``,
    ``probe_shape`` and optional ``tag``, plus ``probe``/``obj`` arrays to
    warm-start from.  Every rank returns the final
    fields and error history; they agree because all updates are allreduced.
    """
    from ..collectives import connect_world, leave_world
    from ..ptycho.io import decode_frame_record
    from ..ptycho.solver import reconstruct
    from ..ptycho.types import SolverConfig

    config = SolverConfig(**args["config"])
    decoded = [decode_frame_record(r) for r in partition]
    frames = [f for f, _ in decoded]
    positions = [p for _, p in decoded]
    comm = connect_world(session, tag=args.get("tag", "ptycho"))
    try:
        comm.counters.reset()
        state = reconstruct(frames, positions, config, comm,
                            object_shape=tuple(args["object_shape"]),
                            probe_shape=tuple(args["probe_shape"]),
                            probe=args.get("probe"), obj=args.get("obj"))
        counters = {"messages": comm.counters.messages, "bytes": comm.counters.bytes,
                    "elements": comm.counters.elements}
    finally:
        leave_world(comm)
    return {"rank": session.rank, "frames": [f.j for f in frames], "probe": state.probe,
            "obj": state.obj, "error_history": list(state.error_history),
            "counters": counters}


BUILTIN_STAGES = {
    "echo": echo,
    "partition_sizes": partition_sizes,
    "fail_on": fail_on,
    "ptycho_reconstruct": ptycho_reconstruct,
}

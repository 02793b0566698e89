"""Stage functions used by the taskgrid tests (importable by worker processes)."""

import os
import time


def whoami(partition, session, args=None):
    return {"rank": session.rank, "size": session.size, "namespace": session.namespace,
            "records": [r.decode() for r in partition], "pid": os.getpid(), "args": args}


def unattached(partition, session, args=None):
    return session is None and "PMIX_RANK" in os.environ


def sleeper(partition, session, args):
    time.sleep(args["seconds"])
    return "woke"


def exit_hard(partition, session, args):
    if session.rank == args["worker"]:
        os._exit(7)
    session.fence()
    return "survived"


def unpicklable(partition, session, args=None):
    return lambda: None

"""Worker process entry point (installed as ``bridgegrid-worker``).

The driver talks to a worker over its stdin and original stdout using
length-prefixed pickled messages.  Anything the stage prints goes to stderr
so it cannot corrupt the control stream.

Messages from the driver::

    {"op": "stage", "stage": "pkg.mod:func", "partition": [...], "args": ...,
     "attach": bool, "namespace": str}
    {"op": "exit"}

Replies::

    {"op": "ready", "pid": int}
    {"op": "result", "ok": True, "result": ...}
    {"op": "result", "ok": False, "code": str, "message": str, "traceback": str}
"""

import argparse
import importlib
import json
import os
import pickle
import struct
import sys
import threading
import traceback

from ..errors import BridgeGridError, InvalidRequest

_LEN = struct.Struct(">I")


def write_message(stream, obj):
    data = pickle.dumps(obj, protocol=pickle.HIGHEST_PROTOCOL)
    stream.write(_LEN.pack(len(data)) + data)
    stream.flush()


def _read_exact(stream, n):
    buf = b""
    while len(buf) < n:
        chunk = stream.read(n - len(buf))
        if not chunk:
            return None
        buf += chunk
    return buf


def read_message(stream):
    head = _read_exact(stream, _LEN.size)
    if head is None:
        return None
    body = _read_exact(stream, _LEN.unpack(head)[0])
    if body is None:
        return None
    return pickle.loads(body)


def stage_name(fn):
    """``module:qualname`` for an importable function."""
    if isinstance(fn, str):
        return fn
    module = getattr(fn, "__module__", None)
    qualname = getattr(fn, "__qualname__", "")
    if not module or module == "__main__" or "<locals>" in qualname:
        raise InvalidRequest(f"stage {fn!r} is not importable by a worker process")
    return f"{module}:{qualname}"


def resolve_stage(name):
    if callable(name):
        return name
    from .stages import BUILTIN_STAGES

    if name in BUILTIN_STAGES:
        return BUILTIN_STAGES[name]
    module, sep, qualname = name.partition(":")
    if not sep:
        raise InvalidRequest(f"unknown stage {name!r}")
    obj = importlib.import_module(module)
    for part in qualname.split("."):
        obj = getattr(obj, part)
    return obj


def _close_transports(owner):
    mod = sys.modules.get("bridgegrid.collectives.transport")
    if mod is not None:
        mod.close_all_transports(owner)


def run_task(stage, partition, args=None, attach=True, env=None, thread_local=False):
    """Run one stage invocation and return the reply message.

    On failure every Transport the stage opened is closed so peers fail fast.
    With ``thread_local`` only transports created by the calling thread are
    touched (several simulated workers share one process).
    """
    session = None
    try:
        fn = resolve_stage(stage)
        if attach:
            from ..rendezvous.client import client_attach

            session = client_attach(env=env)
        result = fn(partition, session) if args is None else fn(partition, session, args)
        if session is not None:
            session.finalize()
        return {"op": "result", "ok": True, "result": result}
    except BaseException as exc:
        _close_transports(threading.get_ident() if thread_local else None)
        if session is not None:
            # a failed stage counts as a crash so peers blocked on us are released
            session.abort()
        code = exc.code if isinstance(exc, BridgeGridError) else type(exc).__name__
        return {"op": "result", "ok": False, "code": code, "message": str(exc),
                "traceback": traceback.format_exc()}


def serve(ctrl_in, ctrl_out, default_stage=None):
    write_message(ctrl_out, {"op": "ready", "pid": os.getpid()})
    while True:
        msg = read_message(ctrl_in)
        if msg is None or msg.get("op") == "exit":
            return 0
        if msg.get("op") != "stage":
            continue
        if msg.get("namespace"):
            os.environ["PMIX_NAMESPACE"] = msg["namespace"]
        reply = run_task(msg.get("stage") or default_stage, msg.get("partition", ()),
                         msg.get("args"), msg.get("attach", True))
        try:
            write_message(ctrl_out, reply)
        except (pickle.PicklingError, TypeError, AttributeError) as exc:
            write_message(ctrl_out, {"op": "result", "ok": False, "code": "UNPICKLABLE_RESULT",
                                     "message": str(exc), "traceback": ""})


def main(argv=None):
    parser = argparse.ArgumentParser(prog="bridgegrid-worker",
                                     description="bridgegrid worker process")
    parser.add_argument("--stage", help="default stage: a builtin name or module:function")
    parser.add_argument("--standalone", action="store_true",
                        help="run --stage once on an empty partition and print the result as JSON")
    opts = parser.parse_args(argv)
    if opts.standalone:
        if not opts.stage:
            parser.error("--standalone needs --stage")
        reply = run_task(opts.stage, ())
        print(json.dumps(reply, default=repr))
        return 0 if reply["ok"] else 3
    ctrl_out = os.fdopen(os.dup(1), "wb", buffering=0)
    os.dup2(2, 1)
    return serve(sys.stdin.buffer, ctrl_out, opts.stage)


if __name__ == "__main__":
    sys.exit(main())

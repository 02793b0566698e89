"""Driver side: spawn workers and run bulk-synchronous stages on them.

The driver, never the rendezvous server, starts worker processes.  Each
worker gets the PMI identity (``PMIX_RANK``, ``PMIX_SIZE``,
``PMIX_NAMESPACE``) and the server's contact details in its environment, so
stage functions can attach without knowing who launched them.
"""

import dataclasses
import itertools
import logging
import os
import queue
import secrets
import subprocess
import sys
import threading
import time
from typing import Any, List, Optional

from ..errors import (
    SECONDARY_CODES,
    InvalidRequest,
    NoServerFound,
    SpawnFailed,
    WorkerFailed,
)
from ..rendezvous.contact import default_contact_dir, find_server
from .worker import read_message, run_task, stage_name, write_message

log = logging.getLogger(__name__)

DEFAULT_READY_TIMEOUT = 30.0
DEFAULT_GRACE = 5.0

# same entry point as the bridgegrid-worker console script
_WORKER_BOOT = "import sys; from bridgegrid.taskgrid.worker import main; sys.exit(main())"

_stage_counter = itertools.count(1)


@dataclasses.dataclass(eq=False)
class WorkerHandle:
    worker_id: int
    process: Optional[subprocess.Popen]
    env: dict
    mode: str = "process"
    partitions: List[int] = dataclasses.field(default_factory=list)
    os_pid: Optional[int] = None
    job: str = ""
    _sink: Any = dataclasses.field(default=None, repr=False)
    _dead: bool = dataclasses.field(default=False, repr=False)

    @property
    def alive(self):
        if self._dead:
            return False
        if self.process is not None:
            return self.process.poll() is None
        return True

    def kill(self):
        self._dead = True
        if self.process is not None and self.process.poll() is None:
            self.process.kill()
            self.process.wait()

    # control channel -----------------------------------------------------

    def _post(self, msg):
        self._sink.put((self.worker_id, msg))

    def _reader(self):
        while True:
            try:
                msg = read_message(self.process.stdout)
            except Exception as exc:
                msg = None
                log.warning("worker %d: bad control message: %s", self.worker_id, exc)
            if msg is None:
                rc = self.process.wait()
                self._dead = True
                self._post({"op": "eof", "returncode": rc})
                return
            self._post(msg)

    def _submit(self, stage, partition, args, attach, namespace):
        if self.mode == "thread":
            self.env["PMIX_NAMESPACE"] = namespace

            def body():
                self._post(run_task(stage, partition, args, attach, env=self.env,
                                    thread_local=True))
            threading.Thread(target=body, daemon=True,
                             name=f"taskgrid-worker-{self.worker_id}").start()
            return
        try:
            write_message(self.process.stdin, {
                "op": "stage", "stage": stage_name(stage), "partition": list(partition),
                "args": args, "attach": attach, "namespace": namespace,
            })
        except (BrokenPipeError, OSError) as exc:
            self._dead = True
            self._post({"op": "eof", "returncode": self.process.poll(), "error": str(exc)})


def _server_env(server):
    if server is None:
        return {}
    info = getattr(server, "info", server)
    if info is None:
        raise SpawnFailed("rendezvous server has not been started")
    return info.env()


def _python_path():
    entries = []
    for p in sys.path:
        p = p or os.getcwd()
        if os.path.isdir(p) and p not in entries:
            entries.append(p)
    return os.pathsep.join(entries)


def spawn_workers(n, env_overrides=None, *, server=None, namespace=None, mode="process",
                  python=None, ready_timeout=DEFAULT_READY_TIMEOUT):
    """Launch ``n`` workers with PMI identity ``PMIX_RANK = worker_id``.

    ``server`` is a RendezvousServer or ServerContactInfo.  Without it the
    contact details come from ``env_overrides`` or the contact directory.
    ``mode="thread"`` runs workers as threads of this process (tests only).
    """
    if n < 1:
        raise InvalidRequest(f"need at least one worker, got {n}")
    overrides = {k: str(v) for k, v in (env_overrides or {}).items()}
    base = {}
    base.update(_server_env(server))
    base.update(overrides)
    if "BRIDGEGRID_SERVER" not in base:
        try:
            find_server(base.get("BRIDGEGRID_CONTACT_DIR") or default_contact_dir())
        except NoServerFound as exc:
            raise SpawnFailed(f"no rendezvous server to point workers at: {exc.message}") from None
    namespace = namespace or base.get("PMIX_NAMESPACE") or f"job-{secrets.token_hex(4)}"

    handles = []
    sink = queue.Queue()
    for wid in range(n):
        env = dict(os.environ) if mode == "process" else {}
        env.update(base)
        env.update({"PMIX_RANK": str(wid), "PMIX_SIZE": str(n), "PMIX_NAMESPACE": namespace})
        if mode == "thread":
            handles.append(WorkerHandle(wid, None, env, mode="thread", job=namespace, _sink=sink))
            continue
        env["PYTHONPATH"] = _python_path()
        try:
            proc = subprocess.Popen(
                [python or sys.executable, "-c", _WORKER_BOOT],
                stdin=subprocess.PIPE, stdout=subprocess.PIPE, env=env)
        except OSError as exc:
            for h in handles:
                h.kill()
            raise SpawnFailed(f"cannot start worker {wid}: {exc}") from None
        handle = WorkerHandle(wid, proc, env, os_pid=proc.pid, job=namespace, _sink=sink)
        threading.Thread(target=handle._reader, daemon=True,
                         name=f"taskgrid-ctrl-{wid}").start()
        handles.append(handle)

    if mode == "thread":
        return handles
    deadline = time.monotonic() + ready_timeout
    waiting = {h.worker_id for h in handles}
    while waiting:
        try:
            wid, msg = sink.get(timeout=max(0.0, deadline - time.monotonic()))
        except queue.Empty:
            break
        if msg.get("op") == "ready":
            waiting.discard(wid)
        elif msg.get("op") == "eof":
            break
    if waiting:
        for h in handles:
            h.kill()
        raise SpawnFailed(f"workers {sorted(waiting)} did not become ready")
    return handles


def shutdown_workers(workers, timeout=5.0):
    for h in workers:
        if h.process is None or not h.alive:
            continue
        try:
            write_message(h.process.stdin, {"op": "exit"})
            h.process.stdin.close()
        except OSError:
            pass
    for h in workers:
        if h.process is None:
            h._dead = True
            continue
        try:
            h.process.wait(timeout)
        except subprocess.TimeoutExpired:
            h.process.kill()
            h.process.wait()
        h._dead = True


@dataclasses.dataclass
class _Failure:
    worker_id: int
    code: str
    message: str
    traceback: str = ""

    @property
    def cause(self):
        return f"{self.code}: {self.message}"


def run_mpi_stage(dataset, workers, stage_fn, args=None, attach=True, timeout=None,
                  grace=DEFAULT_GRACE):
    """Run ``stage_fn(partition, session[, args])`` on every worker; return results by worker.

    Worker ``i`` receives partition ``i``.  With ``attach`` each invocation
    gets a fresh attached ClientSession which is finalized when it returns.
    Any failure aborts the stage with WorkerFailed naming the worker whose
    error is most likely the root cause; workers still running ``grace``
    seconds after the first failure (or past ``timeout``) are killed.
    """
    if len(workers) != dataset.num_partitions:
        raise InvalidRequest(f"{dataset.num_partitions} partitions for {len(workers)} workers")
    if any(h.mode == "process" for h in workers):
        stage_name(stage_fn)  # fail early if workers could not import it
    sink = queue.Queue()
    # every stage attaches under a fresh namespace derived from the job id, so
    # a crash in one stage cannot poison ranks of the next
    namespace = f"{workers[0].job}.{next(_stage_counter)}"
    for h in workers:
        if not h.alive:
            err = WorkerFailed(worker_id=h.worker_id, cause="worker is not running")
            err.failures, err.traceback = [], ""
            raise err
        h._sink = sink
        h.partitions = [h.worker_id]
    for idx, h in enumerate(workers):
        h._submit(stage_fn, dataset.partition(idx), args, attach, namespace)

    by_id = {h.worker_id: i for i, h in enumerate(workers)}
    results = [None] * len(workers)
    pending = set(by_id)
    failures = []
    abort_at = None if timeout is None else time.monotonic() + timeout
    timed_out = False
    while pending:
        wait = None if abort_at is None else max(0.0, abort_at - time.monotonic())
        try:
            wid, msg = sink.get(timeout=wait)
        except queue.Empty:
            timed_out = not failures
            break
        if wid not in pending:
            continue
        op = msg.get("op")
        if op == "result" and msg["ok"]:
            results[by_id[wid]] = msg["result"]
        elif op == "result":
            failures.append(_Failure(wid, msg["code"], msg["message"], msg.get("traceback", "")))
        elif op == "eof":
            failures.append(_Failure(wid, "EXITED",
                                     f"worker process exited with code {msg.get('returncode')}"))
        else:
            continue
        pending.discard(wid)
        if failures and (abort_at is None or abort_at > time.monotonic() + grace):
            abort_at = time.monotonic() + grace

    if pending:
        for wid in sorted(pending):
            workers[by_id[wid]].kill()
    if timed_out:
        wid = min(pending)
        raise WorkerFailed(worker_id=wid, cause=f"TIMEOUT: stage exceeded {timeout}s")
    if failures:
        primary = next((f for f in failures if f.code not in SECONDARY_CODES), failures[0])
        for f in failures:
            log.info("worker %d failed: %s\n%s", f.worker_id, f.cause, f.traceback)
        err = WorkerFailed(worker_id=primary.worker_id, cause=primary.cause)
        err.failures = failures
        err.traceback = primary.traceback
        raise err
    return results


class WorkerPool:
    """Workers plus the rendezvous server they attach to, as one context manager."""

    def __init__(self, n, server=None, mode="process", **spawn_kwargs):
        self._own_server = server is None
        if server is None:
            from ..rendezvous import server_start

            server = server_start()
        self.server = server
        try:
            self.workers = spawn_workers(n, server=server, mode=mode, **spawn_kwargs)
        except BaseException:
            if self._own_server:
                server.stop()
            raise

    def run(self, dataset, stage_fn, args=None, **kwargs):
        return run_mpi_stage(dataset, self.workers, stage_fn, args, **kwargs)

    def close(self):
        shutdown_workers(self.workers)
        if self._own_server:
            self.server.stop()

    def __enter__(self):
        return self

    def __exit__(self, *exc):
        self.close()


__all__ = ["WorkerHandle", "WorkerPool", "run_mpi_stage",
           "shutdown_workers", "spawn_workers"]

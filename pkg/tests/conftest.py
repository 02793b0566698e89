import os
import sys
import tempfile

import pytest

HERE = os.path.dirname(os.path.abspath(__file__))
if HERE not in sys.path:
    sys.path.insert(0, HERE)  # workers import helper stages from here

# Every server and client in the suite (including worker processes, which
# inherit the environment) uses a private contact directory.
_CONTACTS = tempfile.mkdtemp(prefix="bridgegrid-test-contacts-")
os.environ["BRIDGEGRID_CONTACT_DIR"] = _CONTACTS
for _name in ("BRIDGEGRID_SERVER", "BRIDGEGRID_TOKEN"):
    os.environ.pop(_name, None)

ACCEPTANCE = {}


@pytest.fixture(scope="session")
def contact_dir():
    return _CONTACTS


@pytest.fixture(scope="session")
def rdv_server():
    from bridgegrid.rendezvous import server_start

    server = server_start(contact_dir=_CONTACTS)
    yield server
    server.stop()


@pytest.fixture(scope="session")
def pools(rdv_server):
    """``pools(n)`` returns a shared process-mode WorkerPool of ``n`` workers."""
    from bridgegrid.taskgrid import WorkerPool

    made = {}

    def get(n):
        pool = made.get(n)
        if pool is None or not all(w.alive for w in pool.workers):
            if pool is not None:
                pool.close()
            pool = made[n] = WorkerPool(n, server=rdv_server)
        return pool

    yield get
    for pool in made.values():
        pool.close()


@pytest.fixture
def acceptance():
    """Record one summary line per acceptance criterion."""

    def record(number, passed, detail):
        ACCEPTANCE[number] = (bool(passed), detail)

    return record


def pytest_terminal_summary(terminalreporter):
    from bridgegrid.rendezvous import LAUNCH_KINDS, all_action_logs

    if ACCEPTANCE:
        terminalreporter.section("acceptance criteria")
        for number in sorted(ACCEPTANCE, key=str):
            passed, detail = ACCEPTANCE[number]
            terminalreporter.write_line(
                f"criterion {number}: {'PASS' if passed else 'FAIL'}  {detail}")
    launches = [a for log in all_action_logs() for a in log if a.kind in LAUNCH_KINDS]
    actions = sum(len(log) for log in all_action_logs())
    terminalreporter.write_line(
        f"rendezvous action logs: {actions} actions, {len(launches)} process-launch events")


def pytest_sessionfinish(session, exitstatus):
    from bridgegrid.rendezvous import LAUNCH_KINDS, all_action_logs

    if any(a.kind in LAUNCH_KINDS for log in all_action_logs() for a in log):
        session.exitstatus = 1

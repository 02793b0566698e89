"""Contact files: how clients find a server they were not started by.

Each running server writes ``bridgegrid-<server id>.contact`` holding one line
``address port token pid``.  Clients pick the newest valid file.
"""

import dataclasses
import getpass
import glob
import os
import tempfile

from ..errors import ContactFileUnwritable, NoServerFound

PREFIX = "bridgegrid-"
SUFFIX = ".contact"


def default_contact_dir(env=None):
    env = os.environ if env is None else env
    explicit = env.get("BRIDGEGRID_CONTACT_DIR")
    if explicit:
        return explicit
    try:
        user = getpass.getuser()
    except Exception:
        user = str(os.getuid())
    return os.path.join(tempfile.gettempdir(), f"bridgegrid-{user}")


def contact_file_name(server_id):
    return f"{PREFIX}{server_id}{SUFFIX}"


@dataclasses.dataclass(frozen=True)
class ContactRecord:
    host: str
    port: int
    token: str
    pid: int
    path: str
    mtime: float


def write_contact_file(directory, server_id, host, port, token, pid):
    path = os.path.join(directory, contact_file_name(server_id))
    tmp = path + ".tmp"
    try:
        os.makedirs(directory, exist_ok=True)
        with open(tmp, "w") as fh:
            fh.write(f"{host} {port} {token} {pid}\n")
        os.replace(tmp, path)
    except OSError as exc:
        raise ContactFileUnwritable(f"cannot write contact file in {directory!r}: {exc}") from None
    return path


def parse_contact_file(path):
    """Parse one contact file; returns ``None`` when it is malformed."""
    try:
        with open(path) as fh:
            fields = fh.read().split()
        mtime = os.stat(path).st_mtime
    except OSError:
        return None
    if len(fields) != 4:
        return None
    host, port, token, pid = fields
    try:
        return ContactRecord(host, int(port), token, int(pid), path, mtime)
    except ValueError:
        return None


def _pid_alive(pid):
    try:
        os.kill(pid, 0)
    except ProcessLookupError:
        return False
    except PermissionError:
        return True
    return True


def list_contacts(directory):
    """Valid contact records in ``directory``, newest first (ties: name descending)."""
    records = []
    for path in glob.glob(os.path.join(directory, f"{PREFIX}*{SUFFIX}")):
        rec = parse_contact_file(path)
        if rec is not None and _pid_alive(rec.pid):
            records.append(rec)
    records.sort(key=lambda r: (r.mtime, os.path.basename(r.path)), reverse=True)
    return records


def find_server(directory):
    records = list_contacts(directory)
    if not records:
        raise NoServerFound(f"no valid contact file under {directory!r}")
    return records[0]

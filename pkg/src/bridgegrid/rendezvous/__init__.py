"""PMI-style rendezvous: a standalone server plus the client session library."""

from .client import ClientSession, client_attach
from .contact import default_contact_dir, find_server, list_contacts
from .server import LAUNCH_KINDS, RendezvousServer, all_action_logs
from .types import (
    ENDPOINT_KEY,
    ConnectRequest,
    EventKind,
    EventNotification,
    GroupInfo,
    Namespace,
    ProcessId,
    ServerContactInfo,
)


def server_start(bind_address=("127.0.0.1", 0), contact_dir=None, **kwargs):
    """Start a server and return it; ``server.info`` holds its contact info."""
    host, port = bind_address
    server = RendezvousServer(host=host, port=port, contact_dir=contact_dir, **kwargs)
    server.start()
    return server


__all__ = [
    "ClientSession", "ConnectRequest", "ENDPOINT_KEY", "EventKind", "EventNotification",
    "GroupInfo", "LAUNCH_KINDS", "Namespace", "ProcessId", "RendezvousServer",
    "ServerContactInfo", "all_action_logs", "client_attach", "default_contact_dir",
    "find_server", "list_contacts", "server_start",
]

"""Bootstrap a communicator over every rank of a session's namespace."""

from ..rendezvous.types import ProcessId
from .comm import communicator_from_group
from .transport import Transport


def connect_world(session, tag="world", timeout_ms=None, host="127.0.0.1"):
    """Publish an endpoint, fence, connect all ranks and return the Communicator.

    The returned communicator owns its transport; call ``leave_world`` (or
    ``comm.close()`` after disconnecting) when done.
    """
    transport = Transport(host)
    try:
        session.publish_endpoint(transport.endpoint)
        session.fence()
        members = [ProcessId(session.namespace, r) for r in range(session.size)]
        group = session.connect(members, tag, timeout_ms)
        comm = communicator_from_group(session, group, transport)
    except BaseException:
        transport.close()
        raise
    comm._owns_transport = True
    return comm


def leave_world(comm):
    """Collective: disconnect the group, then close the transport."""
    try:
        if comm.session is not None:
            comm.session.disconnect(comm.group)
    finally:
        comm.close()

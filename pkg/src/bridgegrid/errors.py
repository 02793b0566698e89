"""Exception hierarchy shared by every bridgegrid layer.

Each exception carries a stable ``code`` string.  The code is what travels
over the wire between server and clients and what the command-line tools
print as the machine-readable error class.
"""


class BridgeGridError(Exception):
    code = "INTERNAL"

    def __init__(self, message="", **details):
        super().__init__(message or self.code)
        self.message = message or self.code
        self.details = details

    def __str__(self):
        return f"{self.code}: {self.message}"


_REGISTRY = {}


def _register(cls):
    _REGISTRY[cls.code] = cls
    return cls


def error_from_code(code, message=""):
    """Rebuild an exception instance from its wire code."""
    cls = _REGISTRY.get(code, BridgeGridError)
    err = cls(message)
    if cls is BridgeGridError:
        err.code = code
    return err


# rendezvous
@_register
class BindFailed(BridgeGridError):
    code = "BIND_FAILED"


@_register
class ContactFileUnwritable(BridgeGridError):
    code = "CONTACT_FILE_UNWRITABLE"


@_register
class NoServerFound(BridgeGridError):
    code = "NO_SERVER_FOUND"


@_register
class DuplicateRank(BridgeGridError):
    code = "DUPLICATE_RANK"


@_register
class TokenMismatch(BridgeGridError):
    code = "TOKEN_MISMATCH"


@_register
class SessionClosed(BridgeGridError):
    code = "SESSION_CLOSED"


@_register
class KeyNotVisible(BridgeGridError):
    code = "KEY_NOT_VISIBLE"


@_register
class UnknownProcess(BridgeGridError):
    code = "UNKNOWN_PROCESS"


@_register
class PeerTerminated(BridgeGridError):
    code = "PEER_TERMINATED"


@_register
class ConnectTimeout(BridgeGridError):
    code = "TIMEOUT"


@_register
class NotAMember(BridgeGridError):
    code = "NOT_A_MEMBER"


@_register
class InvalidRequest(BridgeGridError):
    code = "INVALID_REQUEST"


@_register
class ProtocolError(BridgeGridError):
    code = "PROTOCOL_ERROR"


# collectives
@_register
class MissingEndpoint(BridgeGridError):
    code = "MISSING_ENDPOINT"


@_register
class PeerUnreachable(BridgeGridError):
    code = "PEER_UNREACHABLE"


@_register
class BadRoot(BridgeGridError):
    code = "BAD_ROOT"


@_register
class LengthMismatch(BridgeGridError):
    code = "LENGTH_MISMATCH"


@_register
class ConcurrentCollective(BridgeGridError):
    code = "CONCURRENT_COLLECTIVE"


# taskgrid
@_register
class SpawnFailed(BridgeGridError):
    code = "SPAWN_FAILED"


@_register
class WorkerFailed(BridgeGridError):
    code = "WORKER_FAILED"

    def __init__(self, message="", worker_id=None, cause=None, **details):
        super().__init__(message or f"worker {worker_id} failed: {cause}", **details)
        self.worker_id = worker_id
        self.cause = cause


@_register
class HandlerFailed(BridgeGridError):
    code = "HANDLER_FAILED"

    def __init__(self, message="", batch_index=None, **details):
        super().__init__(message or f"batch {batch_index} handler failed", **details)
        self.batch_index = batch_index


# ptycho / cli
@_register
class Diverged(BridgeGridError):
    code = "DIVERGED"


@_register
class DataNotFound(BridgeGridError):
    code = "DATA_NOT_FOUND"


@_register
class ConfigError(BridgeGridError):
    code = "CONFIG_ERROR"


# errors whose presence on a worker usually means some *other* worker failed
SECONDARY_CODES = frozenset({PeerTerminated.code, PeerUnreachable.code, SessionClosed.code})

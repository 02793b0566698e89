import dataclasses
import enum
import os
from typing import Dict, Optional, Tuple

from ..errors import InvalidRequest


@dataclasses.dataclass(frozen=True, order=True)
class Namespace:
    name: str
    cluster_id: Optional[str] = None

    def __post_init__(self):
        if not self.name or "/" in self.name:
            raise InvalidRequest(f"invalid namespace name {self.name!r}")
        if self.cluster_id is not None and (not self.cluster_id or "/" in self.cluster_id):
            raise InvalidRequest(f"invalid cluster id {self.cluster_id!r}")

    @property
    def qualified(self):
        return f"{self.cluster_id}/{self.name}" if self.cluster_id else self.name

    @classmethod
    def parse(cls, text):
        if "/" in text:
            cluster, _, name = text.partition("/")
            return cls(name, cluster)
        return cls(text)

    def __str__(self):
        return self.qualified


@dataclasses.dataclass(frozen=True, order=True)
class ProcessId:
    """A process is named by its qualified namespace string and rank."""

    namespace: str
    rank: int

    def __post_init__(self):
        if self.rank < 0:
            raise InvalidRequest(f"rank must be nonnegative, got {self.rank}")
        Namespace.parse(self.namespace)

    def to_wire(self):
        return [self.namespace, self.rank]

    @classmethod
    def from_wire(cls, item):
        ns, rank = item
        return cls(str(ns), int(rank))

    def __str__(self):
        return f"{self.namespace}:{self.rank}"


@dataclasses.dataclass(frozen=True)
class ServerContactInfo:
    host: str
    port: int
    token: str
    contact_file_path: str
    pid: int
    server_id: str

    @property
    def address(self):
        return f"{self.host}:{self.port}"

    def env(self):
        """Environment entries pointing a client straight at this server."""
        return {
            "BRIDGEGRID_SERVER": self.address,
            "BRIDGEGRID_TOKEN": self.token,
            "BRIDGEGRID_CONTACT_DIR": os.path.dirname(os.path.abspath(self.contact_file_path)),
        }


@dataclasses.dataclass(frozen=True)
class ConnectRequest:
    participants: Tuple[ProcessId, ...]
    tag: Optional[str] = None
    timeout_ms: Optional[int] = None

    def __post_init__(self):
        parts = tuple(self.participants)
        object.__setattr__(self, "participants", parts)
        if not parts:
            raise InvalidRequest("connect needs at least one participant")
        if len(set(parts)) != len(parts):
            raise InvalidRequest("connect participants must be distinct")
        if self.timeout_ms is not None and self.timeout_ms < 0:
            raise InvalidRequest("timeout must be nonnegative")

    @property
    def key(self):
        """Two connect calls are the same operation iff their keys are equal."""
        return (tuple(sorted(self.participants)), self.tag)

    def to_wire(self):
        return {
            "participants": [p.to_wire() for p in self.participants],
            "tag": self.tag,
            "timeout_ms": self.timeout_ms,
        }

    @classmethod
    def from_wire(cls, obj):
        return cls(
            tuple(ProcessId.from_wire(p) for p in obj["participants"]),
            obj.get("tag"),
            obj.get("timeout_ms"),
        )


class EventKind(enum.Enum):
    CONNECT_REQUESTED = "CONNECT_REQUESTED"
    PROCESS_TERMINATED = "PROCESS_TERMINATED"
    GROUP_READY = "GROUP_READY"


@dataclasses.dataclass(frozen=True)
class EventNotification:
    kind: EventKind
    subject: object
    payload: bytes = b""


@dataclasses.dataclass(frozen=True)
class GroupInfo:
    namespace: str
    rank_in_group: int
    participants: Tuple[ProcessId, ...]
    endpoints: Dict[ProcessId, bytes]

    @property
    def size(self):
        return len(self.participants)


ENDPOINT_KEY = "endpoint"

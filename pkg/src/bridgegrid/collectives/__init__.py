"""Point-to-point messaging and collectives over rendezvous-provided endpoints."""

from .comm import (
    CommCounters,
    Communicator,
    allgather,
    allreduce_ring,
    allreduce_tree,
    barrier,
    broadcast,
    chunk_bounds,
    communicator_from_group,
    gather,
    scatter,
)
from .exactsum import sum_scalars, window_sum
from .local import local_communicators, run_ranks
from .reduce import AllreduceVariant, ReduceOp, from_wire, sequential_fold, to_wire
from .transport import Counters, Transport, close_all_transports
from .world import connect_world, leave_world

__all__ = [
    "AllreduceVariant", "CommCounters", "Communicator", "Counters", "ReduceOp", "Transport",
    "allgather", "allreduce_ring", "allreduce_tree", "barrier", "broadcast", "chunk_bounds",
    "close_all_transports", "communicator_from_group", "connect_world", "from_wire", "gather",
    "leave_world", "local_communicators", "run_ranks", "scatter", "sequential_fold",
    "sum_scalars", "to_wire", "window_sum",
]

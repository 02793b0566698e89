"""Driver/worker harness: datasets, MPI stages and micro-batch streams."""

from .dataset import Dataset, empty, parallelize, union
from .driver import WorkerHandle, WorkerPool, run_mpi_stage, shutdown_workers, spawn_workers
from .stream import (
    BATCH_MARKER,
    INIT_MARKER,
    BatchEntry,
    MicroBatch,
    StreamReport,
    StreamSource,
    format_stream,
    micro_batches,
    parse_stream_lines,
    stream_run,
    write_stream_file,
)

__all__ = [
    "BATCH_MARKER", "BatchEntry", "Dataset", "INIT_MARKER", "MicroBatch", "StreamReport",
    "StreamSource", "WorkerHandle", "WorkerPool", "empty", "format_stream", "micro_batches",
    "parallelize", "parse_stream_lines", "run_mpi_stage", "shutdown_workers", "spawn_workers", "stream_run", "union",
    "write_stream_file",
]

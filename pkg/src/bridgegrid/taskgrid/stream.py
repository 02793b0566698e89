"""Micro-batch streaming: replay a record stream and hand each batch to a handler.

Replay files hold one record per line, ``topic<TAB>base64(payload)``.  The
literal line ``__init__`` is the topic-init record and ``__batch__`` closes
the current micro-batch.  Records after the last ``__batch__`` form a final
batch.  Blank lines and lines starting with ``#`` are ignored.
"""

import base64
import binascii
import dataclasses
import logging
import time
from typing import Any, Dict, Iterable, List

from ..errors import DataNotFound, HandlerFailed, InvalidRequest
from .dataset import Dataset, empty, parallelize, union

log = logging.getLogger(__name__)

INIT_MARKER = "__init__"
BATCH_MARKER = "__batch__"


@dataclasses.dataclass
class MicroBatch:
    batch_index: int
    topics: Dict[str, List[bytes]]

    @property
    def num_records(self):
        return sum(len(v) for v in self.topics.values())

    def to_dataset(self):
        """One partition per topic, in first-appearance order."""
        data = empty(0)
        for records in self.topics.values():
            data = union(data, parallelize(records, 1))
        return data


@dataclasses.dataclass
class StreamSource:
    """Where events come from.

    ``events`` yields ``("init",)``, ``("record", topic, payload)`` and
    ``("batch",)`` tuples.  ``interval`` seconds are waited between batches.
    """

    events: Iterable[tuple]
    interval: float = 0.0
    init_marker: str = INIT_MARKER

    @classmethod
    def from_file(cls, path, interval=0.0):
        try:
            with open(path) as fh:
                lines = fh.read().splitlines()
        except OSError as exc:
            raise DataNotFound(f"cannot read stream file {path!r}: {exc}") from None
        return cls(list(parse_stream_lines(lines)), interval)

    @classmethod
    def from_batches(cls, batches, interval=0.0, init=True):
        """``batches`` is a list of ``{topic: [payload, ...]}`` mappings."""
        events = [("init",)] if init else []
        for batch in batches:
            for topic, records in batch.items():
                events.extend(("record", topic, bytes(r)) for r in records)
            events.append(("batch",))
        return cls(events, interval)


def parse_stream_lines(lines):
    for lineno, raw in enumerate(lines, 1):
        line = raw.rstrip("\r\n")
        if not line.strip() or line.startswith("#"):
            continue
        if line == INIT_MARKER:
            yield ("init",)
        elif line == BATCH_MARKER:
            yield ("batch",)
        else:
            topic, sep, payload = line.partition("\t")
            if not sep or not topic:
                raise InvalidRequest(f"stream line {lineno}: expected topic<TAB>base64")
            try:
                data = base64.b64decode(payload, validate=True)
            except binascii.Error:
                raise InvalidRequest(f"stream line {lineno}: bad base64 payload") from None
            yield ("record", topic, data)


def format_stream(batches, init=True):
    lines = [INIT_MARKER] if init else []
    for batch in batches:
        for topic, records in batch.items():
            if "\t" in topic or topic in (INIT_MARKER, BATCH_MARKER):
                raise InvalidRequest(f"illegal topic name {topic!r}")
            lines.extend(f"{topic}\t{base64.b64encode(bytes(r)).decode()}" for r in records)
        lines.append(BATCH_MARKER)
    return "\n".join(lines) + "\n"


def write_stream_file(path, batches, init=True):
    with open(path, "w") as fh:
        fh.write(format_stream(batches, init))
    return path


def micro_batches(source, report=None):
    """Yield MicroBatch objects, skipping everything before topic-init.

    Events are consumed lazily, so a live generator blocks here until its
    topic-init arrives.
    """
    started = False
    topics = {}
    pending = False
    index = 0
    for event in source.events:
        kind = event[0]
        if kind == "init":
            if started:
                log.warning("ignoring repeated topic-init record")
            started = True
            if report is not None:
                report.init_seen = True
            continue
        if not started:
            log.debug("dropping %s event received before topic-init", kind)
            continue
        if kind == "record":
            topics.setdefault(event[1], []).append(bytes(event[2]))
            pending = True
        elif kind == "batch":
            yield MicroBatch(index, topics)
            index += 1
            topics, pending = {}, False
    if pending:
        yield MicroBatch(index, topics)


@dataclasses.dataclass
class BatchEntry:
    batch_index: int
    topics: Dict[str, int]
    records: int
    seconds: float
    result: Any = None

    def to_dict(self):
        return dataclasses.asdict(self)


@dataclasses.dataclass
class StreamReport:
    init_seen: bool = False
    entries: List[BatchEntry] = dataclasses.field(default_factory=list)

    @property
    def batch_indices(self):
        return [e.batch_index for e in self.entries]

    def to_dict(self):
        return {"init_seen": self.init_seen, "batches": [e.to_dict() for e in self.entries]}


def stream_run(source, run_batch, on_entry=None):
    """Feed each micro-batch, in order, to ``run_batch(batch_index, dataset)``.

    Empty batches are delivered too.  A handler exception stops the stream
    with HandlerFailed carrying the batch index.
    """
    report = StreamReport()
    for n, batch in enumerate(micro_batches(source, report)):
        if n and source.interval > 0:
            time.sleep(source.interval)
        dataset: Dataset = batch.to_dataset()
        t0 = time.perf_counter()
        try:
            result = run_batch(batch.batch_index, dataset)
        except Exception as exc:
            raise HandlerFailed(f"batch {batch.batch_index} handler failed: {exc}",
                                batch_index=batch.batch_index) from exc
        entry = BatchEntry(batch.batch_index, {k: len(v) for k, v in batch.topics.items()},
                           batch.num_records, time.perf_counter() - t0, result)
        report.entries.append(entry)
        if on_entry is not None:
            on_entry(entry)
    if not report.init_seen:
        log.warning("stream ended without a topic-init record; nothing processed")
    return report


__all__ = ["BATCH_MARKER", "INIT_MARKER", "BatchEntry", "MicroBatch", "StreamReport",
           "StreamSource", "format_stream", "micro_batches", "parse_stream_lines",
           "stream_run", "write_stream_file"]

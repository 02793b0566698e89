"""Partitioned record collections."""

from ..errors import InvalidRequest


def _freeze(record):
    if isinstance(record, str):
        return record.encode()
    return bytes(record)


class Dataset:
    """An immutable list of partitions, each an ordered tuple of byte records."""

    def __init__(self, partitions):
        self._partitions = tuple(tuple(_freeze(r) for r in part) for part in partitions)

    @property
    def partitions(self):
        return self._partitions

    @property
    def num_partitions(self):
        return len(self._partitions)

    def __len__(self):
        return sum(len(p) for p in self._partitions)

    def partition(self, index):
        return self._partitions[index]

    def sizes(self):
        return [len(p) for p in self._partitions]

    def collect(self):
        return [r for part in self._partitions for r in part]

    def __eq__(self, other):
        return isinstance(other, Dataset) and self._partitions == other._partitions

    def __hash__(self):
        return hash(self._partitions)

    def __repr__(self):
        return f"Dataset(partitions={self.num_partitions}, records={len(self)})"


def parallelize(records, num_partitions):
    """Round-robin ``records`` into ``num_partitions`` partitions, keeping order."""
    if num_partitions < 1:
        raise InvalidRequest(f"num_partitions must be >= 1, got {num_partitions}")
    parts = [[] for _ in range(num_partitions)]
    for i, record in enumerate(records):
        parts[i % num_partitions].append(record)
    return Dataset(parts)


def union(a, b):
    """Partitions of ``a`` followed by partitions of ``b``."""
    return Dataset(a.partitions + b.partitions)


def empty(num_partitions=0):
    return Dataset([[] for _ in range(num_partitions)])

import enum

import numpy as np


class ReduceOp(enum.Enum):
    SUM = "SUM"
    MIN = "MIN"
    MAX = "MAX"

    def combine(self, acc, other):
        """Return ``acc (op) other`` as a new array; ``acc`` is the left operand."""
        if self is ReduceOp.SUM:
            return np.add(acc, other)
        if self is ReduceOp.MIN:
            return np.minimum(acc, other)
        return np.maximum(acc, other)


class AllreduceVariant(enum.Enum):
    TREE = "TREE"
    RING = "RING"

    @classmethod
    def parse(cls, value):
        if isinstance(value, cls):
            return value
        return cls(str(value).upper())


def sequential_fold(vectors, op):
    """Reference reduction: left fold over ``vectors`` in list order."""
    acc = np.array(vectors[0], dtype=np.float64, copy=True)
    for vec in vectors[1:]:
        acc = op.combine(acc, np.asarray(vec, dtype=np.float64))
    return acc


def to_wire(vec):
    return np.ascontiguousarray(vec, dtype="<f8").tobytes()


def from_wire(data):
    return np.frombuffer(data, dtype="<f8").astype(np.float64)

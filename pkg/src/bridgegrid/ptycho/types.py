"""Data carriers for ptychographic reconstruction.

Complex fields (probe, object, exit waves) are plain ``numpy.complex128``
arrays in row-major ``(height, width)`` layout; exit-wave sets are stacked
into ``(frames, height, width)`` arrays.
"""

import dataclasses
import enum
import math
from typing import List, Optional

import numpy as np

from ..collectives.reduce import AllreduceVariant
from ..errors import ConfigError


@dataclasses.dataclass(frozen=True)
class ScanPosition:
    j: int
    x: int
    y: int

    @property
    def offset(self):
        return (self.x, self.y)


@dataclasses.dataclass(frozen=True)
class DiffractionFrame:
    j: int
    intensity: np.ndarray

    def __post_init__(self):
        if np.any(self.intensity < 0):
            raise ValueError(f"frame {self.j} has negative intensity")


class Algorithm(enum.Enum):
    DM = "DM"
    RAAR = "RAAR"


@dataclasses.dataclass(frozen=True)
class ObjectConstraints:
    amp_min: float = 0.0
    amp_max: float = 1.0
    phase_min: float = -math.pi
    phase_max: float = math.pi
    enabled: bool = False

    def __post_init__(self):
        if self.amp_min > self.amp_max:
            raise ConfigError("amp_min must not exceed amp_max")
        if self.phase_min > self.phase_max:
            raise ConfigError("phase_min must not exceed phase_max")
        if self.phase_min < -math.pi - 1e-12 or self.phase_max > math.pi + 1e-12:
            raise ConfigError("phase bounds must lie within [-pi, pi]")


DEFAULT_BETA = {Algorithm.DM: 1.0, Algorithm.RAAR: 0.9}


@dataclasses.dataclass
class SolverConfig:
    """Solver settings.

    ``eps_reg`` is relative: the denominator regularizer actually applied in
    the probe and object updates is ``eps_reg * max(denominator)``.  When
    ``gamma1``/``gamma2`` are left unset they default to ``-1/beta`` and
    ``1/beta``; ``beta`` defaults per algorithm (DM 1.0, RAAR 0.9).
    """

    algorithm: Algorithm = Algorithm.RAAR
    beta: Optional[float] = None
    gamma1: Optional[float] = None
    gamma2: Optional[float] = None
    iterations: int = 300
    eps_reg: float = 1e-8
    allreduce_variant: AllreduceVariant = AllreduceVariant.TREE
    constraints: ObjectConstraints = dataclasses.field(default_factory=ObjectConstraints)
    probe_update_start: int = 10
    probe_radius: float = 0.45
    amp_floor: float = 1e-14
    diverge_check: bool = True

    def __post_init__(self):
        self.algorithm = Algorithm(self.algorithm) if not isinstance(self.algorithm, Algorithm) \
            else self.algorithm
        self.allreduce_variant = AllreduceVariant.parse(self.allreduce_variant)
        if isinstance(self.constraints, dict):
            self.constraints = ObjectConstraints(**self.constraints)
        if self.beta is None:
            self.beta = DEFAULT_BETA[self.algorithm]
        if not 0.0 < self.beta <= 1.0:
            raise ConfigError(f"beta must lie in (0, 1], got {self.beta}")
        if self.gamma1 is None:
            self.gamma1 = -1.0 / self.beta
        if self.gamma2 is None:
            self.gamma2 = 1.0 / self.beta
        if self.iterations < 1:
            raise ConfigError("iterations must be >= 1")
        if not self.eps_reg > 0:
            raise ConfigError("eps_reg must be > 0")
        if self.probe_update_start < 0:
            raise ConfigError("probe_update_start must be >= 0")

    def to_dict(self):
        out = dataclasses.asdict(self)
        out["algorithm"] = self.algorithm.value
        out["allreduce_variant"] = self.allreduce_variant.value
        return out


@dataclasses.dataclass
class ReconstructionState:
    probe: np.ndarray
    obj: np.ndarray
    psi: np.ndarray
    error_history: List[float] = dataclasses.field(default_factory=list)

    @property
    def iteration(self):
        return len(self.error_history)

    def copy(self):
        return ReconstructionState(
            self.probe.copy(), self.obj.copy(), self.psi.copy(), list(self.error_history)
        )

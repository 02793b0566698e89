"""Ptychographic phase retrieval with allreduce-distributed probe/object updates."""

from .io import (
    decode_frame_record,
    encode_frame_record,
    read_dataset,
    read_field,
    write_dataset,
    write_field,
)
from .ops import (
    apply_object_constraints,
    error_metric,
    exit_wave,
    exit_waves,
    fft2u,
    forward_intensity,
    ifft2u,
    modulus_projection,
    object_update,
    overlap_projection,
    probe_update,
)
from .simulate import SimulationSpec, SyntheticDataset, simulate_dataset
from .solver import (
    FrameSet,
    align_global_phase,
    dm_step,
    partition_frames,
    raar_step,
    reconstruct,
)
from .types import (
    Algorithm,
    DiffractionFrame,
    ObjectConstraints,
    ReconstructionState,
    ScanPosition,
    SolverConfig,
)

__all__ = [
    "Algorithm", "DiffractionFrame", "FrameSet", "ObjectConstraints", "ReconstructionState",
    "ScanPosition", "SimulationSpec", "SolverConfig", "SyntheticDataset", "align_global_phase",
    "apply_object_constraints", "decode_frame_record", "dm_step", "encode_frame_record",
    "error_metric", "exit_wave", "exit_waves", "fft2u", "forward_intensity", "ifft2u",
    "modulus_projection", "object_update", "overlap_projection", "partition_frames",
    "probe_update", "raar_step", "read_dataset", "read_field", "reconstruct",
    "simulate_dataset", "write_dataset", "write_field",
]

"""Difference-map and RAAR iterations over a (possibly distributed) frame set."""

import logging
import math

import numpy as np

from ..collectives.reduce import AllreduceVariant
from ..errors import Diverged
from ..collectives.exactsum import sum_scalars
from .ops import (
    error_metric,
    exit_waves,
    modulus_projection,
    overlap_projection,
)
from .simulate import circular_aperture
from .types import Algorithm, ReconstructionState

log = logging.getLogger(__name__)


class FrameSet:
    """The frames one rank owns, stacked for vectorized projections."""

    def __init__(self, frames, positions, comm=None, variant=AllreduceVariant.TREE):
        if len(frames) != len(positions):
            raise ValueError("frames and positions differ in length")
        self.indices = [f.j for f in frames]
        self.positions = [p.offset if hasattr(p, "offset") else tuple(p) for p in positions]
        if frames:
            self.intensity = np.stack([f.intensity for f in frames])
        else:
            self.intensity = np.zeros((0, 0, 0))
        self.comm = comm
        rows = [[float(np.sum(f.intensity)), 1.0] for f in frames]
        total, count = sum_scalars(rows, 2, comm, variant)
        self.total_intensity = total
        self.total_frames = int(round(count))

    def __len__(self):
        return len(self.positions)


def partition_frames(n_frames, size, rank):
    """Contiguous block of frame indices owned by ``rank``; the first
    ``n_frames % size`` ranks hold one extra frame."""
    base, extra = divmod(n_frames, size)
    start = rank * base + min(rank, extra)
    stop = start + base + (1 if rank < extra else 0)
    return range(start, stop)


def _projection_kwargs(state, config):
    return dict(
        update_probe=state.iteration >= config.probe_update_start,
        constraints=config.constraints if config.constraints.enabled else None,
        eps_reg=config.eps_reg,
        relative=True,
        variant=config.allreduce_variant,
    )


def _modulus(psi, frameset, config):
    if len(frameset) == 0:
        return psi.copy()
    return modulus_projection(psi, frameset.intensity, config.amp_floor)


def dm_step(state, frameset, config, comm=None):
    """One difference-map update; returns a new state."""
    kw = _projection_kwargs(state, config)
    pos = frameset.positions
    psi, beta, g1, g2 = state.psi, config.beta, config.gamma1, config.gamma2

    p2, _, _ = overlap_projection(psi, state.obj, state.probe, pos, comm, **kw)
    t1 = _modulus((1 + g2) * p2 - g2 * psi, frameset, config)
    if g1 == -1.0:
        # f1 is the identity map, so its overlap projection is p2 again
        t2, new_obj, new_probe = overlap_projection(psi, state.obj, state.probe, pos, comm, **kw)
    else:
        f1 = (1 + g1) * _modulus(psi, frameset, config) - g1 * psi
        t2, new_obj, new_probe = overlap_projection(f1, state.obj, state.probe, pos, comm, **kw)
    new_psi = psi + beta * (t1 - t2)
    err = error_metric(t1, new_probe, new_obj, pos, comm, frameset.total_intensity,
                       config.allreduce_variant)
    return ReconstructionState(new_probe, new_obj, new_psi, state.error_history + [err])


def raar_step(state, frameset, config, comm=None):
    """One RAAR update in projector form:
    ``psi <- 2b*Po(Pa psi) + (1-2b)*Pa psi + b*(psi - Po psi)``."""
    kw = _projection_kwargs(state, config)
    pos = frameset.positions
    psi, beta = state.psi, config.beta

    pa = _modulus(psi, frameset, config)
    po_pa, new_obj, new_probe = overlap_projection(pa, state.obj, state.probe, pos, comm, **kw)
    po, _, _ = overlap_projection(psi, state.obj, state.probe, pos, comm, **kw)
    new_psi = 2 * beta * po_pa + (1 - 2 * beta) * pa + beta * (psi - po)
    err = error_metric(pa, new_probe, new_obj, pos, comm, frameset.total_intensity,
                       config.allreduce_variant)
    return ReconstructionState(new_probe, new_obj, new_psi, state.error_history + [err])


STEPS = {Algorithm.DM: dm_step, Algorithm.RAAR: raar_step}


def initial_probe(shape, frameset, radius_fraction):
    """Flat-phase circular aperture scaled to the mean frame energy."""
    aperture, _ = circular_aperture(shape[0], radius_fraction)
    if aperture.shape != tuple(shape):
        aperture = np.ones(shape)
    mean_energy = frameset.total_intensity / max(frameset.total_frames, 1)
    norm = float(np.sum(aperture ** 2))
    scale = math.sqrt(mean_energy / norm) if norm > 0 and mean_energy > 0 else 1.0
    return (scale * aperture).astype(np.complex128)


def initial_state(frameset, probe_shape, object_shape, config, probe=None, obj=None):
    if probe is None:
        probe = initial_probe(probe_shape, frameset, config.probe_radius)
    if obj is None:
        obj = np.ones(object_shape, dtype=np.complex128)
    psi = exit_waves(probe, obj, frameset.positions)
    return ReconstructionState(np.array(probe, dtype=np.complex128),
                               np.array(obj, dtype=np.complex128), psi, [])


def reconstruct(frames, positions, config, comm=None, *, object_shape, probe_shape=None,
                probe=None, obj=None, callback=None):
    """Run ``config.iterations`` solver steps over the local frames.

    ``frames``/``positions`` are this rank's share; ``comm`` (size > 1) joins
    the ranks through allreduce.  ``probe``/``obj`` optionally warm-start.
    """
    frameset = FrameSet(frames, positions, comm, config.allreduce_variant)
    if probe_shape is None:
        if probe is not None:
            probe_shape = probe.shape
        elif frames:
            probe_shape = frames[0].intensity.shape
        else:
            raise ValueError("probe_shape is required when a rank owns no frames")
    state = initial_state(frameset, probe_shape, object_shape, config, probe, obj)
    step = STEPS[config.algorithm]
    for _ in range(config.iterations):
        state = step(state, frameset, config, comm)
        err = state.error_history[-1]
        if callback is not None:
            callback(state)
        if config.diverge_check and (not np.isfinite(err) or err > 10 * state.error_history[0]):
            raise Diverged(f"normalized error {err:.3e} at iteration {state.iteration} exceeds "
                           f"10x its initial value {state.error_history[0]:.3e}")
    log.debug("reconstruction finished after %d iterations, error %.3e",
              state.iteration, state.error_history[-1])
    return state


def align_global_phase(estimate, reference):
    """Rotate ``estimate`` by the phase of <estimate, reference>."""
    inner = np.vdot(estimate, reference)
    if inner == 0:
        return estimate
    return estimate * (inner / abs(inner))

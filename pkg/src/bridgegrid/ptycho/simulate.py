"""Seeded synthetic ptychography datasets for desk-scale verification."""

import dataclasses
import math

import numpy as np

from ..errors import ConfigError
from .ops import exit_wave, forward_intensity
from .types import DiffractionFrame, ScanPosition


@dataclasses.dataclass(frozen=True)
class SimulationSpec:
    object_size: int = 64
    probe_size: int = 16
    grid: int = 5
    step: int = 6
    seed: int = 0
    probe_radius: float = 0.45
    probe_curvature: float = 0.02
    smoothness: float = 4.0

    def __post_init__(self):
        if self.grid < 1:
            raise ConfigError("grid must be >= 1")
        if self.step < 1 or self.step > 0.4 * self.probe_size:
            raise ConfigError(
                f"step {self.step} must be in [1, 0.4 * probe_size] for >= 60% overlap"
            )
        extent = self.probe_size + (self.grid - 1) * self.step
        if extent > self.object_size:
            raise ConfigError(f"scan extent {extent} exceeds object size {self.object_size}")

    @property
    def frames(self):
        return self.grid * self.grid


@dataclasses.dataclass
class SyntheticDataset:
    probe: np.ndarray
    obj: np.ndarray
    positions: list
    frames: list
    spec: SimulationSpec


def circular_aperture(size, radius_fraction):
    c = (size - 1) / 2.0
    yy, xx = np.mgrid[0:size, 0:size]
    rho2 = (xx - c) ** 2 + (yy - c) ** 2
    return (rho2 <= (radius_fraction * size) ** 2).astype(np.float64), rho2


def make_probe(size, radius_fraction, curvature):
    aperture, rho2 = circular_aperture(size, radius_fraction)
    return aperture * np.exp(1j * curvature * rho2)


def _smooth_unit_field(rng, size, smoothness):
    noise = rng.standard_normal((size, size))
    fy = np.fft.fftfreq(size)[:, None]
    fx = np.fft.fftfreq(size)[None, :]
    kernel = np.exp(-0.5 * (fx ** 2 + fy ** 2) * (2 * math.pi * smoothness) ** 2)
    field = np.real(np.fft.ifft2(np.fft.fft2(noise) * kernel))
    lo, hi = field.min(), field.max()
    return (field - lo) / (hi - lo) if hi > lo else np.zeros_like(field)


def make_object(rng, size, smoothness):
    amp = 0.8 + 0.2 * _smooth_unit_field(rng, size, smoothness)
    phase = -math.pi / 3 + (2 * math.pi / 3) * _smooth_unit_field(rng, size, smoothness)
    return amp * np.exp(1j * phase)


def raster_positions(spec):
    extent = spec.probe_size + (spec.grid - 1) * spec.step
    start = (spec.object_size - extent) // 2
    out = []
    for row in range(spec.grid):
        for col in range(spec.grid):
            out.append(ScanPosition(len(out), start + col * spec.step, start + row * spec.step))
    return out


def simulate_dataset(spec=None):
    spec = spec or SimulationSpec()
    rng = np.random.default_rng(spec.seed)
    obj = make_object(rng, spec.object_size, spec.smoothness)
    probe = make_probe(spec.probe_size, spec.probe_radius, spec.probe_curvature)
    positions = raster_positions(spec)
    frames = [
        DiffractionFrame(p.j, forward_intensity(exit_wave(probe, obj, p.offset)))
        for p in positions
    ]
    return SyntheticDataset(probe, obj, positions, frames, spec)

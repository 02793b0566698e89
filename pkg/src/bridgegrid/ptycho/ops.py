"""Forward model, projections and the closed-form probe/object updates.

Exit waves live in probe coordinates: ``psi[j][u] = P(u) * O(u + r_j)`` where
``r_j = (x, y)`` is the integer offset of frame ``j``'s window inside the
object.  All Fourier transforms are unitary.

Every function that sums over frames takes an optional communicator.  Frame
sums go through ``collectives.exactsum`` so that splitting the frames across
ranks reproduces the serial result bit for bit.
"""

import numpy as np

from ..collectives.exactsum import sum_scalars, window_sum
from ..collectives.reduce import AllreduceVariant


def fft2u(a):
    return np.fft.fft2(a, norm="ortho")


def ifft2u(a):
    return np.fft.ifft2(a, norm="ortho")


def _window(obj, pos, shape):
    x, y = pos
    h, w = shape
    if x < 0 or y < 0 or y + h > obj.shape[0] or x + w > obj.shape[1]:
        raise ValueError(f"probe window at {pos} leaves object of shape {obj.shape}")
    return (slice(y, y + h), slice(x, x + w))


def _ratio_parts(shape, terms, comm, variant):
    """Sum per-frame (index, complex num, real den) terms into full arrays."""
    re, im, den = window_sum(shape, [(sl, (n.real, n.imag, d)) for sl, n, d in terms], 3,
                             comm, variant)
    return re + 1j * im, den


def exit_wave(probe, obj, pos):
    return probe * obj[_window(obj, pos, probe.shape)]


def exit_waves(probe, obj, positions):
    out = np.empty((len(positions),) + probe.shape, dtype=np.complex128)
    for k, pos in enumerate(positions):
        out[k] = exit_wave(probe, obj, pos)
    return out


def forward_intensity(psi):
    return np.abs(fft2u(psi)) ** 2


def modulus_projection(psi, intensity, amp_floor=1e-14):
    """Replace Fourier magnitudes of ``psi`` by ``sqrt(intensity)``, keeping phases.

    Bins whose current magnitude is at or below ``amp_floor`` get phase zero.
    Works on a single frame or a stack of frames.
    """
    phi = fft2u(psi)
    mag = np.abs(phi)
    target = np.sqrt(intensity)
    live = mag > amp_floor
    out = np.where(live, target * phi / np.where(live, mag, 1.0), target)
    return ifft2u(out)


def probe_update(psi, obj, positions, comm=None, eps_reg=0.0, relative=False,
                 variant=AllreduceVariant.TREE):
    """Least-squares probe given exit waves and a fixed object."""
    shape = psi.shape[1:]
    terms = []
    for k, pos in enumerate(positions):
        win = obj[_window(obj, pos, shape)]
        terms.append(((), psi[k] * np.conj(win), np.abs(win) ** 2))
    num, den = _ratio_parts(shape, terms, comm, variant)
    reg = eps_reg * den.max() if relative else eps_reg
    return num / (den + reg)


def object_update(psi, probe, positions, obj, comm=None, eps_reg=0.0, relative=False,
                  variant=AllreduceVariant.TREE):
    """Least-squares object given exit waves and a fixed probe.

    ``obj`` supplies the output shape and the values kept at pixels no
    probe window illuminates (zero denominator).
    """
    probe_conj = np.conj(probe)
    probe_sq = np.abs(probe) ** 2
    terms = [(_window(obj, pos, probe.shape), psi[k] * probe_conj, probe_sq)
             for k, pos in enumerate(positions)]
    num, den = _ratio_parts(obj.shape, terms, comm, variant)
    reg = eps_reg * den.max() if relative else eps_reg
    lit = den > 0
    out = obj.astype(np.complex128, copy=True)
    out[lit] = num[lit] / (den[lit] + reg)
    return out


def apply_object_constraints(obj, constraints):
    """Clamp per-pixel amplitude and phase into the configured bounds."""
    if not constraints.enabled:
        return obj
    amp = np.clip(np.abs(obj), constraints.amp_min, constraints.amp_max)
    phase = np.clip(np.angle(obj), constraints.phase_min, constraints.phase_max)
    return amp * np.exp(1j * phase)


def overlap_projection(psi, obj, probe, positions, comm=None, *, update_probe=True,
                       constraints=None, eps_reg=1e-8, relative=True,
                       variant=AllreduceVariant.TREE):
    """Project exit waves onto the set of waves factorizable as one (P, O) pair.

    One object update (with constraints) followed by one probe update, then
    the exit waves are rebuilt from the new pair.
    """
    new_obj = object_update(psi, probe, positions, obj, comm, eps_reg, relative, variant)
    if constraints is not None:
        new_obj = apply_object_constraints(new_obj, constraints)
    new_probe = probe
    if update_probe:
        new_probe = probe_update(psi, new_obj, positions, comm, eps_reg, relative, variant)
    return exit_waves(new_probe, new_obj, positions), new_obj, new_probe


def error_metric(psi, probe, obj, positions, comm=None, total_intensity=None,
                 variant=AllreduceVariant.TREE):
    """Squared distance between ``psi`` and the waves generated by (probe, obj).

    Normalized by ``total_intensity`` (sum of all measured intensities) when given.
    """
    rows = [[np.sum(np.abs(psi[k] - exit_wave(probe, obj, pos)) ** 2)]
            for k, pos in enumerate(positions)]
    total = sum_scalars(rows, 1, comm, variant)[0]
    if total_intensity is not None:
        return total / total_intensity
    return total

"""On-disk dataset layout and raw field/PGM writers.

A dataset directory holds ``meta.json``, ``positions.csv`` (``j,x,y``) and one
raw little-endian float64 intensity file per frame (``frame_00000.bin``...).
Complex fields are stored as interleaved little-endian float64 (re, im).
"""

import csv
import json
import math
import os
import struct

import numpy as np

from ..errors import DataNotFound
from .types import DiffractionFrame, ScanPosition

META_VERSION = 1
FRAME_NAME = "frame_%05d.bin"


def write_dataset(path, frames, positions, object_shape, seed=None, extra=None):
    os.makedirs(path, exist_ok=True)
    probe_shape = list(frames[0].intensity.shape) if frames else [0, 0]
    meta = {
        "version": META_VERSION,
        "object_shape": list(object_shape),
        "probe_shape": probe_shape,
        "frames": len(frames),
        "seed": seed,
        "units": "pixel",
    }
    if extra:
        meta.update(extra)
    with open(os.path.join(path, "meta.json"), "w") as fh:
        json.dump(meta, fh, indent=2, sort_keys=True)
    with open(os.path.join(path, "positions.csv"), "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["j", "x", "y"])
        for p in positions:
            writer.writerow([p.j, p.x, p.y])
    for f in frames:
        np.ascontiguousarray(f.intensity, dtype="<f8").tofile(os.path.join(path, FRAME_NAME % f.j))
    return meta


def read_dataset(path):
    """Return ``(meta, frames, positions)`` ordered by frame index."""
    meta_path = os.path.join(path, "meta.json")
    if not os.path.isfile(meta_path):
        raise DataNotFound(f"no dataset at {path!r} (missing meta.json)")
    with open(meta_path) as fh:
        meta = json.load(fh)
    positions = []
    with open(os.path.join(path, "positions.csv"), newline="") as fh:
        for row in csv.DictReader(fh):
            positions.append(ScanPosition(int(row["j"]), int(row["x"]), int(row["y"])))
    positions.sort(key=lambda p: p.j)
    h, w = meta["probe_shape"]
    frames = []
    for p in positions:
        fpath = os.path.join(path, FRAME_NAME % p.j)
        if not os.path.isfile(fpath):
            raise DataNotFound(f"missing frame file {fpath!r}")
        data = np.fromfile(fpath, dtype="<f8").astype(np.float64)
        frames.append(DiffractionFrame(p.j, data.reshape(h, w)))
    return meta, frames, positions


def write_field(path, field):
    arr = np.asarray(field, dtype=np.complex128)
    inter = np.empty(arr.shape + (2,), dtype="<f8")
    inter[..., 0] = arr.real
    inter[..., 1] = arr.imag
    inter.tofile(path)


def read_field(path, shape):
    if not os.path.isfile(path):
        raise DataNotFound(f"missing field file {path!r}")
    inter = np.fromfile(path, dtype="<f8").reshape(tuple(shape) + (2,))
    return inter[..., 0] + 1j * inter[..., 1]


def write_pgm(path, image):
    image = np.asarray(image, dtype=np.uint8)
    h, w = image.shape
    with open(path, "wb") as fh:
        fh.write(b"P5\n%d %d\n255\n" % (w, h))
        fh.write(image.tobytes())


def read_pgm(path):
    with open(path, "rb") as fh:
        data = fh.read()
    parts = data.split(b"\n", 3)
    if parts[0] != b"P5":
        raise ValueError(f"{path!r} is not a binary PGM")
    w, h = (int(v) for v in parts[1].split())
    return np.frombuffer(parts[3], dtype=np.uint8).reshape(h, w)


def amplitude_image(field):
    amp = np.abs(field)
    top = amp.max()
    if top <= 0:
        return np.zeros(amp.shape, dtype=np.uint8)
    return np.round(255 * amp / top).astype(np.uint8)


def phase_image(field):
    """Map phase from [-pi, pi] linearly onto [0, 255]."""
    phase = np.angle(field)
    return np.round((phase + math.pi) / (2 * math.pi) * 255).astype(np.uint8)


_RECORD_HEAD = struct.Struct("<iiiii")


def encode_frame_record(frame, position):
    """Pack one frame and its scan offset into a byte record."""
    h, w = frame.intensity.shape
    head = _RECORD_HEAD.pack(frame.j, position.x, position.y, h, w)
    return head + np.ascontiguousarray(frame.intensity, dtype="<f8").tobytes()


def decode_frame_record(record):
    j, x, y, h, w = _RECORD_HEAD.unpack_from(record)
    data = np.frombuffer(record, dtype="<f8", offset=_RECORD_HEAD.size).astype(np.float64)
    return DiffractionFrame(j, data.reshape(h, w)), ScanPosition(j, x, y)

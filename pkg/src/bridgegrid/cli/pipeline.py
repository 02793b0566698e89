"""Glue between the CLI and the runtime: data loading and distributed solves."""

import contextlib
import logging

import numpy as np

from ..errors import ConfigError, DataNotFound
from ..ptycho.io import encode_frame_record, read_dataset
from ..ptycho.simulate import simulate_dataset
from ..ptycho.solver import align_global_phase, partition_frames
from ..rendezvous import server_start
from ..rendezvous.contact import default_contact_dir, find_server
from ..rendezvous.types import ServerContactInfo
from ..taskgrid import Dataset, run_mpi_stage, shutdown_workers, spawn_workers
from ..taskgrid.stages import ptycho_reconstruct

log = logging.getLogger(__name__)


class LoadedData:
    def __init__(self, frames, positions, object_shape, probe_shape, source, path=None,
                 seed=None, truth=None):
        self.frames = frames
        self.positions = positions
        self.object_shape = tuple(object_shape)
        self.probe_shape = tuple(probe_shape)
        self.source = source
        self.path = path
        self.seed = seed
        self.truth = truth  # (probe, obj) when simulated

    def describe(self):
        return {"source": self.source, "path": self.path, "frames": len(self.frames),
                "object_shape": list(self.object_shape), "probe_shape": list(self.probe_shape),
                "seed": self.seed}


def load_data(cfg):
    path = cfg.data.get("path")
    if path:
        meta, frames, positions = read_dataset(path)
        if not frames:
            raise DataNotFound(f"dataset {path!r} contains no frames")
        return LoadedData(frames, positions, meta["object_shape"], meta["probe_shape"],
                          "path", path=path, seed=meta.get("seed"))
    spec = cfg.simulation_spec()
    if spec is None:
        raise ConfigError("no data: set data.path or data.simulate")
    ds = simulate_dataset(spec)
    return LoadedData(ds.frames, ds.positions, ds.obj.shape, ds.probe.shape, "simulated",
                      seed=spec.seed, truth=(ds.probe, ds.obj))


def frame_dataset(frames, positions, workers):
    """Contiguous frame blocks, one partition per worker."""
    records = [encode_frame_record(f, p) for f, p in zip(frames, positions)]
    return Dataset([[records[i] for i in partition_frames(len(records), workers, r)]
                    for r in range(workers)])


@contextlib.contextmanager
def job_runtime(cfg, attach=False, workers=None):
    """Yield ``(server_info, worker_handles, server)``; tears it all down afterwards.

    ``server`` is None with ``attach`` (an already running server is used).
    """
    contact_dir = cfg.server.get("contact_dir") or default_contact_dir()
    server = None
    if attach:
        rec = find_server(contact_dir)
        info = ServerContactInfo(rec.host, rec.port, rec.token, rec.path, rec.pid, "")
    else:
        server = server_start((cfg.server["host"], cfg.server["port"]), contact_dir=contact_dir)
        info = server.info
    handles = []
    try:
        handles = spawn_workers(workers or cfg.job["workers"], server=info, mode=cfg.job["mode"])
        yield info, handles, server
    finally:
        shutdown_workers(handles)
        if server is not None:
            server.stop()


def solve(frames, positions, object_shape, probe_shape, solver_config, handles, timeout=None,
          probe=None, obj=None):
    """One distributed reconstruction; returns rank 0's result plus per-rank counters."""
    data = frame_dataset(frames, positions, len(handles))
    args = {"config": solver_config.to_dict(), "object_shape": list(object_shape),
            "probe_shape": list(probe_shape), "probe": probe, "obj": obj}
    results = run_mpi_stage(data, handles, ptycho_reconstruct, args, timeout=timeout)
    first = results[0]
    for res in results[1:]:
        # every rank derives its fields from the same allreduced sums
        if not (np.array_equal(res["obj"], first["obj"]) and
                np.array_equal(res["probe"], first["probe"])):
            log.warning("rank %d fields differ from rank 0", res["rank"])
    counters = [dict(rank=r["rank"], frames=len(r["frames"]), **r["counters"]) for r in results]
    return first, counters


def scanned_mask(object_shape, positions, probe_shape):
    mask = np.zeros(object_shape, dtype=bool)
    h, w = probe_shape
    for p in positions:
        mask[p.y:p.y + h, p.x:p.x + w] = True
    return mask


def quality(result, data):
    """Relative object/probe error against ground truth after phase alignment.

    The object is compared only over pixels some scan window illuminated.
    """
    if data.truth is None:
        return None
    probe_t, obj_t = data.truth
    mask = scanned_mask(data.object_shape, data.positions, data.probe_shape)
    out = {}
    for name, est, ref in (("object", result["obj"][mask], obj_t[mask]),
                           ("probe", result["probe"].ravel(), probe_t.ravel())):
        aligned = align_global_phase(est, ref)
        out[f"{name}_relative_error"] = float(np.linalg.norm(aligned - ref) / np.linalg.norm(ref))
    return out

"""``bridgegrid`` command line: serve, simulate, run, stream, bench, render.

Exit codes: 0 success, 2 usage or configuration problem, 3 runtime failure.
Failures print one JSON object ``{"error": CODE, "message": ...}`` on stderr.
"""

import argparse
import dataclasses
import json
import logging
import math
import os
import signal
import sys
import threading
import time

import numpy as np

from ..errors import BridgeGridError, ConfigError, DataNotFound, InvalidRequest, WorkerFailed
from ..ptycho import io as pio
from ..ptycho.simulate import SimulationSpec, simulate_dataset
from ..taskgrid.stream import StreamSource, stream_run, write_stream_file
from .config import load_config
from .report import REPORT_VERSION, transport_summary, write_report

log = logging.getLogger("bridgegrid")

EXIT_OK = 0
EXIT_USAGE = 2
EXIT_RUNTIME = 3

USAGE_CODES = {"CONFIG_ERROR", "DATA_NOT_FOUND", "INVALID_REQUEST"}


class Fail(Exception):
    def __init__(self, code, message, status, **extra):
        super().__init__(message)
        self.code, self.message, self.status, self.extra = code, message, status, extra


def _fail_from(exc):
    if isinstance(exc, WorkerFailed):
        cause = str(exc.cause or "")
        code = "TIMEOUT" if cause.startswith("TIMEOUT") else exc.code
        return Fail(code, exc.message, EXIT_RUNTIME, worker_id=exc.worker_id, cause=cause)
    status = EXIT_USAGE if exc.code in USAGE_CODES else EXIT_RUNTIME
    return Fail(exc.code, exc.message, status)


def _shape(text):
    try:
        parts = [int(p) for p in text.lower().replace(",", "x").split("x")]
    except ValueError:
        raise argparse.ArgumentTypeError(f"bad shape {text!r}, expected HxW") from None
    if len(parts) == 1:
        parts = parts * 2
    if len(parts) != 2 or min(parts) < 1:
        raise argparse.ArgumentTypeError(f"bad shape {text!r}, expected HxW")
    return tuple(parts)


def _constraints(text):
    try:
        amp_min, amp_max, ph_min, ph_max = (float(v) for v in text.split(","))
    except ValueError:
        raise argparse.ArgumentTypeError(
            "constraints take amp_min,amp_max,phase_min,phase_max") from None
    return {"amp_min": amp_min, "amp_max": amp_max, "phase_min": ph_min, "phase_max": ph_max,
            "enabled": True}


# shared flag plumbing -------------------------------------------------------

def _add_job_flags(p, workers=True):
    p.add_argument("--config", help="pipeline config (JSON)")
    if workers:
        p.add_argument("--workers", type=int, help="number of worker processes")
    p.add_argument("--variant", choices=["TREE", "RING", "tree", "ring"], help="allreduce variant")
    p.add_argument("--algorithm", choices=["DM", "RAAR", "dm", "raar"])
    p.add_argument("--beta", type=float)
    p.add_argument("--iterations", type=int)
    p.add_argument("--constraints", type=_constraints, metavar="AMIN,AMAX,PMIN,PMAX",
                   help="enable object constraints with these bounds")
    p.add_argument("--data", help="dataset directory")
    p.add_argument("--seed", type=int, help="seed for a simulated dataset")
    p.add_argument("--simulate", action="store_true",
                   help="reconstruct a freshly simulated dataset (default when no data is set)")
    p.add_argument("--contact-dir")
    p.add_argument("--attach", action="store_true",
                   help="use an already running server instead of starting one")
    p.add_argument("--mode", choices=["process", "thread"], help=argparse.SUPPRESS)
    p.add_argument("--timeout", type=float, help="stage timeout in seconds")
    p.add_argument("--out", default="bridgegrid-out", help="output directory")


def _flag_overrides(args):
    out = {"job": {}, "solver": {}, "data": {}, "server": {}}
    if getattr(args, "workers", None) is not None:
        out["job"]["workers"] = args.workers
    if args.variant:
        out["job"]["allreduce_variant"] = args.variant.upper()
    if args.mode:
        out["job"]["mode"] = args.mode
    if args.timeout is not None:
        out["job"]["timeout"] = args.timeout
    if args.algorithm:
        out["solver"]["algorithm"] = args.algorithm.upper()
    if args.beta is not None:
        out["solver"]["beta"] = args.beta
    if args.iterations is not None:
        out["solver"]["iterations"] = args.iterations
    if args.constraints:
        out["solver"]["constraints"] = args.constraints
    if args.data:
        out["data"]["path"] = args.data
    if args.contact_dir:
        out["server"]["contact_dir"] = args.contact_dir
    return {k: v for k, v in out.items() if v}


def _load(args, extra=None):
    overrides = _flag_overrides(args)
    for section, values in (extra or {}).items():
        overrides.setdefault(section, {}).update(values)
    cfg = load_config(args.config, overrides=overrides)
    if getattr(args, "simulate", False):
        cfg.data["path"] = None
    if not cfg.data.get("path"):
        sim = dict(cfg.data.get("simulate") or {})
        if args.seed is not None:
            sim["seed"] = args.seed
        cfg.data["simulate"] = sim
        cfg.simulation_spec()
    return cfg


def _print_json(obj):
    print(json.dumps(obj, sort_keys=True))


def _write_fields(out, obj, probe):
    from .plotting import plot_fields

    os.makedirs(out, exist_ok=True)
    pio.write_field(os.path.join(out, "object.bin"), obj)
    pio.write_field(os.path.join(out, "probe.bin"), probe)
    fields = {"object": {"file": "object.bin", "shape": list(obj.shape)},
              "probe": {"file": "probe.bin", "shape": list(probe.shape)},
              "format": "interleaved little-endian float64 (re, im), row-major"}
    with open(os.path.join(out, "fields.json"), "w") as fh:
        json.dump(fields, fh, indent=2, sort_keys=True)
    outputs = {"object": "object.bin", "probe": "probe.bin", "fields": "fields.json"}
    outputs.update(_render_pgms(out, "object", obj))
    outputs.update(_render_pgms(out, "probe", probe))
    plot_fields(obj, probe, os.path.join(out, "fields.png"))
    outputs["fields_figure"] = "fields.png"
    return outputs


def _render_pgms(out, name, field):
    amp, phase = f"{name}_amplitude.pgm", f"{name}_phase.pgm"
    pio.write_pgm(os.path.join(out, amp), pio.amplitude_image(field))
    pio.write_pgm(os.path.join(out, phase), pio.phase_image(field))
    return {f"{name}_amplitude": amp, f"{name}_phase": phase}


# commands -----------------------------------------------------------------

def cmd_serve(args):
    from ..rendezvous import server_start

    server = server_start((args.host, args.port), contact_dir=args.contact_dir,
                          cluster_id=args.cluster_id, log_path=args.log)
    stop = threading.Event()

    def _stop(signum, frame):
        stop.set()

    signal.signal(signal.SIGTERM, _stop)
    signal.signal(signal.SIGINT, _stop)
    print(server.info.contact_file_path, flush=True)
    try:
        while not stop.wait(0.5):
            pass
    finally:
        server.stop()
    return EXIT_OK


def cmd_simulate(args):
    grid = math.isqrt(args.frames)
    if grid * grid != args.frames:
        raise ConfigError(f"--frames must be a perfect square (raster scan), got {args.frames}")
    spec = SimulationSpec(object_size=args.object_size, probe_size=args.probe_size, grid=grid,
                          step=args.step, seed=args.seed)
    ds = simulate_dataset(spec)
    meta = pio.write_dataset(args.out, ds.frames, ds.positions, ds.obj.shape, seed=args.seed,
                             extra={"simulation": {"grid": grid, "step": args.step,
                                                   "probe_size": args.probe_size,
                                                   "object_size": args.object_size}})
    pio.write_field(os.path.join(args.out, "truth_object.bin"), ds.obj)
    pio.write_field(os.path.join(args.out, "truth_probe.bin"), ds.probe)
    summary = {"dataset": os.path.abspath(args.out), "frames": meta["frames"],
               "object_shape": meta["object_shape"], "probe_shape": meta["probe_shape"]}
    if args.stream:
        batches = _stream_batches(ds, args.batches, args.empty_batch or [], args.topics)
        write_stream_file(args.stream, batches)
        summary["stream"] = os.path.abspath(args.stream)
        summary["batches"] = len(batches)
    _print_json(summary)
    return EXIT_OK


def _stream_batches(ds, n_batches, empty, n_topics):
    """Split the frames into ``n_batches`` batches (skipping ``empty`` ones)
    and, within a batch, round-robin over ``n_topics`` topics."""
    if n_batches < 1:
        raise ConfigError("--batches must be >= 1")
    live = [b for b in range(n_batches) if b not in set(empty)]
    if not live:
        raise ConfigError("every batch would be empty")
    records = [pio.encode_frame_record(f, p) for f, p in zip(ds.frames, ds.positions)]
    batches = [{} for _ in range(n_batches)]
    for k, b in enumerate(live):
        chunk = records[k * len(records) // len(live):(k + 1) * len(records) // len(live)]
        for i, rec in enumerate(chunk):
            batches[b].setdefault(f"detector{i % n_topics}", []).append(rec)
    return batches


def _run_report(cfg, data, result, counters, outputs, quality, workers):
    hist = list(result["error_history"])
    return {
        "report_version": REPORT_VERSION,
        "command": "run",
        "workers": workers,
        "allreduce_variant": cfg.job["allreduce_variant"],
        "solver": cfg.solver_config().to_dict(),
        "dataset": data.describe(),
        "iterations": len(hist),
        "final_error": hist[-1] if hist else None,
        "error_history": hist,
        "transport": transport_summary(counters),
        "outputs": outputs,
        "quality": quality,
    }


def cmd_run(args):
    from . import pipeline
    from .plotting import plot_error_history

    cfg = _load(args)
    data = pipeline.load_data(cfg)
    solver = cfg.solver_config()
    with pipeline.job_runtime(cfg, attach=args.attach) as (_, handles, _server):
        result, counters = pipeline.solve(data.frames, data.positions, data.object_shape,
                                          data.probe_shape, solver, handles,
                                          timeout=cfg.job["timeout"])
    outputs = _write_fields(args.out, result["obj"], result["probe"])
    plot_error_history({solver.algorithm.value: result["error_history"]},
                       os.path.join(args.out, "error_history.png"))
    outputs["error_figure"] = "error_history.png"
    outputs["report"] = "report.json"
    report = _run_report(cfg, data, result, counters, outputs, pipeline.quality(result, data),
                         cfg.job["workers"])
    write_report(os.path.join(args.out, "report.json"), report)
    _print_json({"report": os.path.abspath(os.path.join(args.out, "report.json")),
                 "final_error": report["final_error"], "iterations": report["iterations"]})
    return EXIT_OK


def cmd_stream(args):
    from . import pipeline
    from .plotting import plot_error_history, plot_stream

    extra = {"stream": {}}
    if args.replay:
        extra["stream"]["replay"] = args.replay
    if args.interval is not None:
        extra["stream"]["interval"] = args.interval
    if args.batch_iterations is not None:
        extra["stream"]["iterations"] = args.batch_iterations
    cfg = _load(args, extra)
    replay = cfg.stream.get("replay")
    if not replay:
        raise ConfigError("no stream to replay: pass --replay or set stream.replay")
    source = StreamSource.from_file(replay, interval=float(cfg.stream["interval"]))
    object_shape = args.object_shape
    if object_shape is None and cfg.data.get("path"):
        object_shape = tuple(pio.read_dataset(cfg.data["path"])[0]["object_shape"])
    if object_shape is None:
        raise ConfigError("the stream needs --object-shape (or a data.path dataset)")
    solver = cfg.solver_config()
    if cfg.stream.get("iterations"):
        solver = dataclasses.replace(solver, iterations=int(cfg.stream["iterations"]))

    frames, positions = [], []
    state = {"probe": None, "obj": None, "counters": []}
    histories = {}
    with pipeline.job_runtime(cfg, attach=args.attach) as (_, handles, _server):
        def run_batch(batch_index, dataset):
            new = [pio.decode_frame_record(r) for r in dataset.collect()]
            for f, p in new:
                frames.append(f)
                positions.append(p)
            entry = {"frames_new": len(new), "frames_total": len(frames),
                     "reconstructed": False, "final_error": None, "iterations": 0}
            if not frames:
                return entry
            result, counters = pipeline.solve(frames, positions, object_shape,
                                              frames[0].intensity.shape, solver, handles,
                                              timeout=cfg.job["timeout"],
                                              probe=state["probe"], obj=state["obj"])
            state.update(probe=result["probe"], obj=result["obj"])
            state["counters"].append(counters)
            histories[f"batch {batch_index}"] = result["error_history"]
            entry.update(reconstructed=True, final_error=result["error_history"][-1],
                         iterations=len(result["error_history"]),
                         transport=transport_summary(counters))
            return entry

        report_obj = stream_run(source, run_batch)

    os.makedirs(args.out, exist_ok=True)
    outputs = {}
    if state["obj"] is not None:
        outputs.update(_write_fields(args.out, state["obj"], state["probe"]))
        plot_error_history(histories, os.path.join(args.out, "error_history.png"),
                           title="per-batch reconstruction")
        outputs["error_figure"] = "error_history.png"
    batches = [{"batch_index": e.batch_index, "records": e.records, "topics": e.topics,
                "result": e.result} for e in report_obj.entries]
    if batches:
        plot_stream(batches, os.path.join(args.out, "stream.png"))
        outputs["stream_figure"] = "stream.png"
    outputs["report"] = "report.json"
    report = {
        "report_version": REPORT_VERSION,
        "command": "stream",
        "workers": cfg.job["workers"],
        "allreduce_variant": cfg.job["allreduce_variant"],
        "solver": solver.to_dict(),
        "dataset": {"source": "stream", "path": os.path.abspath(replay), "frames": len(frames),
                    "object_shape": list(object_shape),
                    "probe_shape": list(frames[0].intensity.shape) if frames else [0, 0]},
        "init_seen": report_obj.init_seen,
        "batches": batches,
        "outputs": outputs,
    }
    write_report(os.path.join(args.out, "report.json"), report)
    _print_json({"report": os.path.abspath(os.path.join(args.out, "report.json")),
                 "batches": len(batches)})
    return EXIT_OK


BENCH_COLUMNS = ["workers", "seconds", "speedup", "iterations", "final_error",
                 "messages_per_rank", "bytes_per_rank"]


def cmd_bench(args):
    from . import pipeline
    from .plotting import plot_bench

    try:
        counts = [int(v) for v in args.workers_list.split(",") if v.strip()]
    except ValueError:
        raise ConfigError(f"bad --workers-list {args.workers_list!r}") from None
    if not counts or min(counts) < 1:
        raise ConfigError("--workers-list needs positive integers")
    cfg = _load(args)
    data = pipeline.load_data(cfg)
    solver = cfg.solver_config()
    rows = []
    for n in counts:
        with pipeline.job_runtime(cfg, attach=args.attach, workers=n) as (_, handles, _server):
            t0 = time.perf_counter()
            result, counters = pipeline.solve(data.frames, data.positions, data.object_shape,
                                              data.probe_shape, solver, handles,
                                              timeout=cfg.job["timeout"])
            seconds = time.perf_counter() - t0
        rows.append({"workers": n, "seconds": seconds,
                     "iterations": len(result["error_history"]),
                     "final_error": result["error_history"][-1],
                     "messages_per_rank": int(np.mean([c["messages"] for c in counters])),
                     "bytes_per_rank": int(np.mean([c["bytes"] for c in counters]))})
    base = rows[0]["seconds"]
    for r in rows:
        r["speedup"] = base / r["seconds"] if r["seconds"] > 0 else float("nan")
    os.makedirs(args.out, exist_ok=True)
    lines = ["\t".join(BENCH_COLUMNS)]
    for r in rows:
        lines.append("\t".join([str(r["workers"]), f"{r['seconds']:.3f}", f"{r['speedup']:.2f}",
                                str(r["iterations"]), f"{r['final_error']:.3e}",
                                str(r["messages_per_rank"]), str(r["bytes_per_rank"])]))
    table = "\n".join(lines) + "\n"
    with open(os.path.join(args.out, "bench.tsv"), "w") as fh:
        fh.write(table)
    plot_bench(rows, os.path.join(args.out, "bench.png"))
    sys.stdout.write(table)
    return EXIT_OK


def cmd_render(args):
    from .plotting import plot_field

    targets = []
    if os.path.isdir(args.field):
        spec_path = os.path.join(args.field, "fields.json")
        if not os.path.isfile(spec_path):
            raise InvalidRequest(f"{args.field!r} has no fields.json; pass a .bin and --shape")
        with open(spec_path) as fh:
            spec = json.load(fh)
        for name in ("object", "probe"):
            if name in spec:
                targets.append((name, os.path.join(args.field, spec[name]["file"]),
                                tuple(spec[name]["shape"])))
        out = args.out or args.field
    else:
        if args.shape is None:
            raise ConfigError("--shape is required when rendering a single .bin file")
        name = os.path.splitext(os.path.basename(args.field))[0]
        targets.append((name, args.field, args.shape))
        out = args.out or os.path.dirname(os.path.abspath(args.field))
    os.makedirs(out, exist_ok=True)
    written = {}
    for name, path, shape in targets:
        if not os.path.isfile(path):
            raise DataNotFound(f"no field file {path!r}")
        field = pio.read_field(path, shape)
        written.update(_render_pgms(out, name, field))
        figure = plot_field(field, os.path.join(out, f"{name}.png"), name)
        written[f"{name}_figure"] = os.path.basename(figure)
    _print_json({"out": os.path.abspath(out), "files": written})
    return EXIT_OK


def build_parser():
    parser = argparse.ArgumentParser(prog="bridgegrid", description=__doc__.splitlines()[0])
    parser.add_argument("-v", "--verbose", action="count", default=0)
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("serve", help="run a rendezvous server until interrupted")
    p.add_argument("--contact-dir")
    p.add_argument("--port", type=int, default=0)
    p.add_argument("--host", default="127.0.0.1")
    p.add_argument("--cluster-id")
    p.add_argument("--log", help="append the server action log (JSON lines) here")
    p.set_defaults(func=cmd_serve)

    p = sub.add_parser("simulate", help="write a synthetic dataset")
    p.add_argument("--out", required=True)
    p.add_argument("--frames", type=int, default=25)
    p.add_argument("--probe-size", type=int, default=16)
    p.add_argument("--object-size", type=int, default=64)
    p.add_argument("--step", type=int, default=6)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--stream", help="also write a replay stream file here")
    p.add_argument("--batches", type=int, default=3)
    p.add_argument("--topics", type=int, default=2)
    p.add_argument("--empty-batch", type=int, action="append",
                   help="batch index left empty in the stream (repeatable)")
    p.set_defaults(func=cmd_simulate)

    p = sub.add_parser("run", help="distributed reconstruction")
    _add_job_flags(p)
    p.set_defaults(func=cmd_run)

    p = sub.add_parser("stream", help="replay a stream; reconstruct after every micro-batch")
    _add_job_flags(p)
    p.add_argument("--replay", help="stream file (topic<TAB>base64 lines)")
    p.add_argument("--interval", type=float)
    p.add_argument("--object-shape", type=_shape)
    p.add_argument("--batch-iterations", type=int, help="solver iterations per batch")
    p.set_defaults(func=cmd_stream)

    p = sub.add_parser("bench", help="time one reconstruction across worker counts")
    _add_job_flags(p, workers=False)
    p.add_argument("--workers-list", default="1,2,4")
    p.set_defaults(func=cmd_bench)

    p = sub.add_parser("render", help="raw complex field to PGM/PNG images")
    p.add_argument("field", help="a .bin field file or a run output directory")
    p.add_argument("--shape", type=_shape)
    p.add_argument("--out")
    p.set_defaults(func=cmd_render)
    return parser


def main(argv=None):
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.WARNING - 10 * min(args.verbose, 2),
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        try:
            return args.func(args)
        except BridgeGridError as exc:
            raise _fail_from(exc) from exc
        except KeyboardInterrupt:
            raise Fail("INTERRUPTED", "interrupted", EXIT_RUNTIME) from None
    except Fail as fail:
        sys.stderr.write(json.dumps({"error": fail.code, "message": fail.message, **fail.extra},
                                    sort_keys=True) + "\n")
        return fail.status


if __name__ == "__main__":
    sys.exit(main())

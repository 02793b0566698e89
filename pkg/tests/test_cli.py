import json
import os
import signal
import subprocess
import sys

import jsonschema
import numpy as np
import pytest

from bridgegrid import errors
from bridgegrid.cli.config import DEFAULTS, env_overrides, load_config
from bridgegrid.cli.main import main
from bridgegrid.cli.report import REPORT_SCHEMA, REPORT_VERSION
from bridgegrid.ptycho.io import read_field, read_pgm


def run_cli(capsys, *argv):
    code = main([str(a) for a in argv])
    out, err = capsys.readouterr()
    return code, out, err


@pytest.fixture(scope="module")
def dataset(tmp_path_factory):
    root = tmp_path_factory.mktemp("cli")
    code = main(["simulate", "--out", str(root / "ds"), "--frames", "9", "--seed", "3",
                 "--stream", str(root / "s.tsv"), "--batches", "3", "--empty-batch", "1"])
    assert code == 0
    return root


# configuration -------------------------------------------------------------------

def test_defaults():
    cfg = load_config(environ={})
    assert cfg.job["workers"] == 1 and cfg.job["allreduce_variant"] == "TREE"
    assert cfg.solver_config().iterations == 300
    assert set(cfg.to_dict()) == set(DEFAULTS)


def test_precedence_file_env_flags(tmp_path):
    path = tmp_path / "c.json"
    path.write_text(json.dumps({"job": {"workers": 2, "timeout": 50},
                                "solver": {"iterations": 10, "beta": 0.7}}))
    env = {"BRIDGEGRID_JOB_WORKERS": "3", "BRIDGEGRID_SOLVER_ITERATIONS": "20"}
    cfg = load_config(str(path), environ=env, overrides={"solver": {"iterations": 30}})
    assert cfg.job["workers"] == 3          # env beats file
    assert cfg.job["timeout"] == 50         # file beats default
    assert cfg.solver["iterations"] == 30   # flag beats env
    assert cfg.solver_config().beta == 0.7


def test_env_values_parse_as_json_or_string():
    env = {"BRIDGEGRID_SOLVER_CONSTRAINTS": '{"amp_min": 0.5, "enabled": true}',
           "BRIDGEGRID_SERVER_HOST": "localhost",
           "BRIDGEGRID_SERVER": "127.0.0.1:1", "BRIDGEGRID_TOKEN": "abc", "OTHER": "1"}
    out = env_overrides(env)
    assert out == {"solver": {"constraints": {"amp_min": 0.5, "enabled": True}},
                   "server": {"host": "localhost"}}


@pytest.mark.parametrize("raw", [
    {"nope": {}},
    {"job": {"wrkers": 2}},
    {"job": {"workers": 0}},
    {"job": {"allreduce_variant": "STAR"}},
    {"solver": {"allreduce_variant": "RING"}},
    {"solver": {"beta": 2.0}},
    {"solver": {"constraints": {"amp_lo": 1}}},
    {"data": {"simulate": {"grid": 0}}},
    {"server": {"port": 70000}},
    [1, 2],
])
def test_bad_config_rejected(tmp_path, raw):
    path = tmp_path / "bad.json"
    path.write_text(json.dumps(raw))
    with pytest.raises(errors.ConfigError):
        load_config(str(path), environ={})


def test_bad_env_key_and_unreadable_file(tmp_path):
    with pytest.raises(errors.ConfigError):
        load_config(environ={"BRIDGEGRID_JOB_WORKRS": "2"})
    with pytest.raises(errors.ConfigError):
        load_config(str(tmp_path / "missing.json"), environ={})
    (tmp_path / "x.json").write_text("{not json")
    with pytest.raises(errors.ConfigError):
        load_config(str(tmp_path / "x.json"), environ={})


# exit codes --------------------------------------------------------------------------

def test_missing_data_exits_2(capsys, tmp_path):
    code, _, err = run_cli(capsys, "run", "--data", tmp_path / "none", "--out", tmp_path / "o")
    assert code == 2
    assert json.loads(err)["error"] == "DATA_NOT_FOUND"


def test_bad_config_exits_2(capsys, tmp_path):
    (tmp_path / "c.json").write_text('{"job": {"workers": -1}}')
    code, _, err = run_cli(capsys, "run", "--config", tmp_path / "c.json", "--out", tmp_path / "o")
    assert code == 2 and json.loads(err)["error"] == "CONFIG_ERROR"


def test_usage_error_exits_2():
    with pytest.raises(SystemExit) as info:
        main(["run", "--workers", "many"])
    assert info.value.code == 2


def test_stage_timeout_exits_3(capsys, dataset, tmp_path):
    code, _, err = run_cli(capsys, "run", "--data", dataset / "ds", "--timeout", "0.05",
                           "--out", tmp_path / "o")
    assert code == 3
    assert json.loads(err)["error"] == "TIMEOUT"


def test_simulate_rejects_non_square_frames(capsys, tmp_path):
    code, _, err = run_cli(capsys, "simulate", "--out", tmp_path / "d", "--frames", "10")
    assert code == 2


# commands ----------------------------------------------------------------------------

def test_simulate_outputs(dataset):
    names = set(os.listdir(dataset / "ds"))
    assert {"meta.json", "positions.csv", "truth_object.bin", "truth_probe.bin"} <= names
    lines = open(dataset / "s.tsv").read().splitlines()
    assert lines[0] == "__init__" and lines.count("__batch__") == 3


def test_run_writes_outputs_and_valid_report(capsys, dataset, tmp_path):
    out = tmp_path / "run"
    code, stdout, _ = run_cli(capsys, "run", "--data", dataset / "ds", "--workers", 2,
                              "--iterations", 40, "--out", out)
    assert code == 0
    printed = json.loads(stdout)
    report = json.load(open(out / "report.json"))
    jsonschema.validate(report, REPORT_SCHEMA)
    assert report["report_version"] == REPORT_VERSION and report["workers"] == 2
    assert printed["iterations"] == report["iterations"] == 40
    assert len(report["transport"]["per_rank"]) == 2
    assert report["transport"]["per_rank"][0]["elements"] > 0
    for name in ("object.bin", "probe.bin", "fields.png", "error_history.png",
                 "object_phase.pgm", "probe_amplitude.pgm"):
        assert (out / name).exists(), name
    obj = read_field(str(out / "object.bin"), report["dataset"]["object_shape"])
    assert np.all(np.isfinite(obj))


def test_run_simulated_reports_quality(capsys, tmp_path):
    out = tmp_path / "sim"
    code, _, _ = run_cli(capsys, "run", "--simulate", "--seed", 1, "--iterations", 30,
                         "--mode", "thread", "--out", out)
    assert code == 0
    report = json.load(open(out / "report.json"))
    jsonschema.validate(report, REPORT_SCHEMA)
    assert report["dataset"]["source"] == "simulated"
    assert set(report["quality"]) == {"object_relative_error", "probe_relative_error"}


def test_ring_variant_from_env(capsys, dataset, tmp_path, monkeypatch):
    monkeypatch.setenv("BRIDGEGRID_JOB_ALLREDUCE_VARIANT", "RING")
    out = tmp_path / "ring"
    code, _, _ = run_cli(capsys, "run", "--data", dataset / "ds", "--workers", 2,
                         "--iterations", 20, "--out", out)
    assert code == 0
    report = json.load(open(out / "report.json"))
    assert report["allreduce_variant"] == "RING"
    assert report["solver"]["allreduce_variant"] == "RING"


def test_stream_command(capsys, dataset, tmp_path):
    out = tmp_path / "stream"
    code, _, _ = run_cli(capsys, "stream", "--replay", dataset / "s.tsv", "--data", dataset / "ds",
                         "--workers", 2, "--batch-iterations", 15, "--out", out)
    assert code == 0
    report = json.load(open(out / "report.json"))
    jsonschema.validate(report, REPORT_SCHEMA)
    batches = report["batches"]
    assert [b["batch_index"] for b in batches] == [0, 1, 2]
    assert batches[1]["records"] == 0 and batches[1]["result"]["frames_new"] == 0
    assert batches[-1]["result"]["frames_total"] == 9
    assert (out / "stream.png").exists()


def test_stream_needs_object_shape_without_dataset(capsys, dataset, tmp_path):
    code, _, err = run_cli(capsys, "stream", "--replay", dataset / "s.tsv", "--out", tmp_path / "o")
    assert code == 2


def test_bench_writes_tsv_and_plot(capsys, dataset, tmp_path):
    out = tmp_path / "bench"
    code, stdout, _ = run_cli(capsys, "bench", "--data", dataset / "ds", "--workers-list", "1,2",
                              "--iterations", 10, "--out", out)
    assert code == 0
    rows = open(out / "bench.tsv").read().splitlines()
    assert rows[0].split("\t")[:3] == ["workers", "seconds", "speedup"]
    assert [r.split("\t")[0] for r in rows[1:]] == ["1", "2"]
    assert (out / "bench.png").exists()


def test_render(capsys, tmp_path):
    field = tmp_path / "f.bin"
    from bridgegrid.ptycho.io import write_field

    write_field(str(field), np.exp(1j * np.linspace(-1, 1, 12)).reshape(3, 4))
    code, _, _ = run_cli(capsys, "render", field, "--shape", "3x4", "--out", tmp_path / "img")
    assert code == 0
    pgms = [n for n in os.listdir(tmp_path / "img") if n.endswith(".pgm")]
    assert pgms and read_pgm(str(tmp_path / "img" / pgms[0])).shape == (3, 4)
    code, _, err = run_cli(capsys, "render", tmp_path / "nothing.bin", "--shape", "3x4")
    assert code == 2


# report schema ------------------------------------------------------------------------

def test_schema_rejects_incomplete_reports():
    good = {"report_version": REPORT_VERSION, "command": "stream", "workers": 1,
            "allreduce_variant": "TREE", "solver": {"algorithm": "RAAR", "beta": 0.9,
                                                     "iterations": 1},
            "dataset": {"source": "stream", "frames": 0, "object_shape": [8, 8],
                        "probe_shape": [4, 4]},
            "batches": []}
    jsonschema.validate(good, REPORT_SCHEMA)
    for broken in ({**good, "report_version": 99}, {**good, "command": "run"},
                   {k: v for k, v in good.items() if k != "batches"}):
        with pytest.raises(jsonschema.ValidationError):
            jsonschema.validate(broken, REPORT_SCHEMA)


def test_serve_and_attached_run(capsys, dataset, tmp_path):
    contacts = tmp_path / "contacts"
    contacts.mkdir()
    proc = subprocess.Popen([sys.executable, "-m", "bridgegrid.cli", "serve",
                             "--contact-dir", str(contacts)],
                            stdout=subprocess.PIPE, text=True)
    try:
        contact_file = proc.stdout.readline().strip()
        assert os.path.dirname(contact_file) == str(contacts)
        host, port, token, pid = open(contact_file).read().split()
        assert int(pid) == proc.pid
        code, _, _ = run_cli(capsys, "run", "--data", dataset / "ds", "--attach",
                             "--contact-dir", contacts, "--workers", 2, "--iterations", 5,
                             "--out", tmp_path / "o")
        assert code == 0
    finally:
        proc.send_signal(signal.SIGTERM)
        assert proc.wait(timeout=10) == 0
    assert not os.path.exists(contact_file)


def test_attach_without_server_exits_3(capsys, tmp_path):
    code, _, err = run_cli(capsys, "run", "--attach", "--contact-dir", tmp_path, "--out",
                           tmp_path / "o")
    assert code == 3 and json.loads(err)["error"] == "NO_SERVER_FOUND"


def test_sixteen_frame_run_converges_and_is_worker_count_independent(capsys, tmp_path):
    assert main(["simulate", "--out", str(tmp_path / "d16"), "--frames", "16", "--seed", "7"]) == 0
    fields = {}
    for n in (1, 2):
        out = tmp_path / f"w{n}"
        code, _, _ = run_cli(capsys, "run", "--data", tmp_path / "d16", "--workers", n,
                             "--out", out)
        assert code == 0
        report = json.load(open(out / "report.json"))
        assert report["final_error"] < 1e-3
        fields[n] = read_field(str(out / "object.bin"), report["dataset"]["object_shape"])
    a, b = fields[2], fields[1]
    assert np.linalg.norm(a - b) <= 1e-9 * np.linalg.norm(b)

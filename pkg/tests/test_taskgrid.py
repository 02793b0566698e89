import json
import os
import subprocess
import sys
import time

import pytest
from hypothesis import given
from hypothesis import strategies as st

import tg_stages
from bridgegrid import errors
from bridgegrid.taskgrid import (
    Dataset,
    StreamSource,
    WorkerPool,
    empty,
    format_stream,
    micro_batches,
    parallelize,
    parse_stream_lines,
    run_mpi_stage,
    spawn_workers,
    stream_run,
    union,
    write_stream_file,
)
from bridgegrid.taskgrid.stages import echo, fail_on, partition_sizes
from bridgegrid.taskgrid.worker import read_message, resolve_stage, stage_name, write_message

WATCHDOG = 30.0


# datasets ----------------------------------------------------------------------

@pytest.mark.parametrize("n,parts,sizes", [(6, 3, [2, 2, 2]), (5, 3, [2, 2, 1]), (0, 3, [0, 0, 0])])
def test_parallelize_examples(n, parts, sizes):
    assert parallelize([b"r%d" % i for i in range(n)], parts).sizes() == sizes


@given(st.lists(st.binary(max_size=8), max_size=50), st.integers(1, 9))
def test_parallelize_round_robin_keeps_order(records, parts):
    ds = parallelize(records, parts)
    assert ds.num_partitions == parts
    for p in range(parts):
        assert list(ds.partition(p)) == records[p::parts]


def test_parallelize_needs_a_partition():
    with pytest.raises(errors.InvalidRequest):
        parallelize([b"x"], 0)


def test_union_and_immutability():
    a, b = parallelize([b"a", b"b"], 2), parallelize(["c"], 1)
    u = union(a, b)
    assert u.sizes() == [1, 1, 1] and u.collect() == [b"a", b"b", b"c"]
    assert empty(2).sizes() == [0, 0] and len(empty()) == 0
    with pytest.raises(TypeError):
        u.partitions[0][0] = b"z"
    assert Dataset([["x"]]) == Dataset([[b"x"]])


# worker plumbing ---------------------------------------------------------------

def test_control_message_framing(tmp_path):
    path = tmp_path / "ctl"
    with open(path, "wb") as fh:
        write_message(fh, {"op": "stage", "x": [1, 2]})
        write_message(fh, {"op": "exit"})
    with open(path, "rb") as fh:
        assert read_message(fh) == {"op": "stage", "x": [1, 2]}
        assert read_message(fh) == {"op": "exit"}
        assert read_message(fh) is None


def test_stage_names_resolve():
    assert stage_name(tg_stages.whoami) == "tg_stages:whoami"
    assert resolve_stage("echo") is echo
    assert resolve_stage("tg_stages:sleeper") is tg_stages.sleeper
    with pytest.raises(errors.InvalidRequest):
        stage_name(lambda p, s: None)


def test_standalone_worker_runs_one_stage(rdv_server):
    env = dict(os.environ, PMIX_RANK="0", PMIX_SIZE="1", PMIX_NAMESPACE="standalone",
               **rdv_server.info.env())
    out = subprocess.run([sys.executable, "-m", "bridgegrid.taskgrid.worker", "--stage", "echo",
                          "--standalone"], env=env, capture_output=True, text=True, timeout=60)
    assert out.returncode == 0, out.stderr
    reply = json.loads(out.stdout)
    assert reply["ok"] and reply["result"]["identity"] == ["standalone", 0, 1]


# MPI stages ---------------------------------------------------------------------

def test_stage_sets_pmi_environment(pools):
    pool = pools(3)
    ds = parallelize([b"a", b"b", b"c", b"d"], 3)
    out = pool.run(ds, tg_stages.whoami, {"k": 1})
    assert [o["rank"] for o in out] == [0, 1, 2]
    assert {o["size"] for o in out} == {3}
    assert len({o["namespace"] for o in out}) == 1
    assert [o["records"] for o in out] == [["a", "d"], ["b"], ["c"]]
    assert len({o["pid"] for o in out}) == 3 and os.getpid() not in {o["pid"] for o in out}
    assert out[0]["args"] == {"k": 1}
    # the next stage gets a fresh namespace on the same workers
    again = pool.run(ds, tg_stages.whoami)
    assert again[0]["namespace"] != out[0]["namespace"]
    assert [o["pid"] for o in again] == [o["pid"] for o in out]


def test_unattached_stage(pools):
    assert pools(2).run(empty(2), tg_stages.unattached, attach=False) == [True, True]


def test_partition_sizes_over_collectives(pools):
    out = pools(3).run(parallelize([b"1", b"2", b"3", b"4", b"5"], 3), partition_sizes)
    assert out == [[2, 2, 1]] * 3


def test_partition_count_must_match_workers(pools):
    with pytest.raises(errors.InvalidRequest):
        pools(2).run(empty(3), tg_stages.whoami)


def test_thread_mode(rdv_server):
    with WorkerPool(3, server=rdv_server, mode="thread") as pool:
        out = pool.run(parallelize([b"1", b"2", b"3", b"4", b"5"], 3), partition_sizes)
        assert out == [[2, 2, 1]] * 3
        with pytest.raises(errors.WorkerFailed) as info:
            pool.run(empty(3), fail_on, {"worker": 2})
        assert info.value.worker_id == 2


# fault injection -----------------------------------------------------------------

@pytest.mark.parametrize("n", [2, 3])
@pytest.mark.parametrize("target", [0, -1])
def test_raise_reports_worker_failed(pools, n, target):
    target %= n
    t0 = time.monotonic()
    with pytest.raises(errors.WorkerFailed) as info:
        pools(n).run(empty(n), fail_on, {"worker": target})
    assert time.monotonic() - t0 < WATCHDOG
    err = info.value
    assert err.worker_id == target
    assert "injected failure" in str(err) and "RuntimeError" in err.traceback
    others = {f.worker_id: f.code for f in err.failures if f.worker_id != target}
    assert set(others.values()) <= {"PEER_TERMINATED"}
    # the pool is still usable for the next stage
    assert len(pools(n).run(empty(n), tg_stages.whoami)) == n


def test_kill_mid_fence_reports_peer_terminated(pools):
    t0 = time.monotonic()
    with pytest.raises(errors.WorkerFailed) as info:
        pools(3).run(empty(3), fail_on, {"worker": 1, "how": "kill"})
    assert time.monotonic() - t0 < WATCHDOG
    err = info.value
    assert err.worker_id == 1 and "EXITED" in str(err)
    assert {f.code for f in err.failures if f.worker_id != 1} <= {"PEER_TERMINATED"}


def test_hard_exit_is_reported(pools):
    with pytest.raises(errors.WorkerFailed) as info:
        pools(2).run(empty(2), tg_stages.exit_hard, {"worker": 0})
    assert info.value.worker_id == 0 and "7" in str(info.value)


def test_timeout_kills_hung_workers(rdv_server):
    with WorkerPool(2, server=rdv_server) as pool:
        t0 = time.monotonic()
        with pytest.raises(errors.WorkerFailed) as info:
            pool.run(empty(2), tg_stages.sleeper, {"seconds": 60}, timeout=0.5)
        assert time.monotonic() - t0 < 10
        assert "TIMEOUT" in str(info.value)
        time.sleep(0.2)
        assert not any(w.alive for w in pool.workers)
        with pytest.raises(errors.WorkerFailed):
            pool.run(empty(2), tg_stages.whoami)


def test_unpicklable_result(pools):
    with pytest.raises(errors.WorkerFailed) as info:
        pools(2).run(empty(2), tg_stages.unpicklable)
    assert "UNPICKLABLE_RESULT" in str(info.value)


def test_spawn_without_server_fails(tmp_path, monkeypatch):
    monkeypatch.setenv("BRIDGEGRID_CONTACT_DIR", str(tmp_path))
    with pytest.raises(errors.SpawnFailed):
        spawn_workers(1)


def test_no_launch_events_from_stages(rdv_server, pools):
    pools(2).run(empty(2), tg_stages.whoami)
    assert rdv_server.launch_events() == []


# streaming -------------------------------------------------------------------------

def _batches():
    return [{"a": [b"1", b"2"], "b": [b"3"]}, {}, {"a": [b"4"]}]


def test_stream_file_roundtrip(tmp_path):
    path = write_stream_file(str(tmp_path / "s.tsv"), _batches())
    text = open(path).read().splitlines()
    assert text[0] == "__init__" and text.count("__batch__") == 3
    events = list(parse_stream_lines(text))
    got = [b.topics for b in micro_batches(StreamSource(events))]
    assert got == _batches()


def test_events_before_init_are_dropped_and_repeated_init_ignored():
    events = [("record", "a", b"early"), ("batch",), ("init",), ("record", "a", b"x"),
              ("init",), ("record", "a", b"y")]
    got = list(micro_batches(StreamSource(events)))
    assert [(b.batch_index, b.topics) for b in got] == [(0, {"a": [b"x", b"y"]})]


def test_stream_without_init_processes_nothing():
    report = stream_run(StreamSource.from_batches(_batches(), init=False), lambda i, d: i)
    assert not report.init_seen and report.entries == []


def test_stream_run_orders_all_batches_including_empty():
    calls = []

    def handler(index, dataset):
        calls.append((index, dataset.sizes()))
        return len(dataset)

    report = stream_run(StreamSource.from_batches(_batches()), handler)
    assert calls == [(0, [2, 1]), (1, []), (2, [1])]
    assert report.batch_indices == [0, 1, 2]
    assert [e.result for e in report.entries] == [3, 0, 1]
    assert report.to_dict()["batches"][0]["topics"] == {"a": 2, "b": 1}


def test_handler_failure_names_the_batch():
    def handler(index, dataset):
        if index == 1:
            raise ValueError("bad batch")

    with pytest.raises(errors.HandlerFailed) as info:
        stream_run(StreamSource.from_batches(_batches()), handler)
    assert info.value.batch_index == 1


def test_stream_file_errors(tmp_path):
    with pytest.raises(errors.DataNotFound):
        StreamSource.from_file(str(tmp_path / "missing.tsv"))
    with pytest.raises(errors.InvalidRequest):
        list(parse_stream_lines(["__init__", "no-tab-here"]))
    with pytest.raises(errors.InvalidRequest):
        list(parse_stream_lines(["t\t!!!"]))
    with pytest.raises(errors.InvalidRequest):
        format_stream([{"__batch__": [b"x"]}])


def test_stream_interval_is_waited():
    src = StreamSource.from_batches([{}, {}, {}], interval=0.05)
    t0 = time.monotonic()
    stream_run(src, lambda i, d: None)
    assert time.monotonic() - t0 >= 0.1


def test_live_generator_blocks_until_init():
    def gen():
        yield ("record", "t", b"dropped")
        yield ("init",)
        yield ("record", "t", b"kept")
        yield ("batch",)

    report = stream_run(StreamSource(gen()), lambda i, d: d.collect())
    assert report.init_seen and report.entries[0].result == [b"kept"]

"""Socket-level integration: real server transport plus runner clients.

The server runs in a background thread (standalone mode, no launcher) and
runners run as plain threads calling the client API, so the full wire
protocol is exercised without process spawning overhead.
"""

import threading
import time

import numpy as np
import pytest

from ensda.config import StudyConfig
from ensda.checkpoint import read_snapshot
from ensda.errors import ConfigurationError
from ensda.metrics import MetricsWriter, read_events
from ensda.partition import block_decompose
from ensda.reference import run_reference_study
from ensda.runner import (
    EXIT_CONNECTION,
    EXIT_MODEL_FAILURE,
    EXIT_OK,
    ConnectionLost,
    da_expose,
    da_init,
    run_runner,
)
from ensda.server import ServerTransport


def study_config(tmp_path, base_port, **overrides):
    defaults = dict(
        model="lorenz96",
        n_dynamic=12,
        n_assimilated=8,
        members=4,
        cycles=2,
        nsteps=2,
        seed=31,
        obs_count=4,
        runners=2,
        server_shards=1,
        runner_parts=1,
        base_port=base_port,
        launcher_port=0,
        runner_timeout_s=10.0,
        connect_timeout_s=4.0,
        checkpoint_dir=str(tmp_path / "ckpt"),
        metrics_path=str(tmp_path / "metrics.jsonl"),
        ensemble_out=str(tmp_path / "final.bin"),
    )
    defaults.update(overrides)
    return StudyConfig(**defaults)


class ServerThread:
    def __init__(self, config):
        self.transport = ServerTransport(config, MetricsWriter(config.metrics_path, "server"))
        self.exit_code = None
        self.thread = threading.Thread(target=self._run, daemon=True)

    def _run(self):
        self.exit_code = self.transport.wait()

    def start(self):
        self.transport.start()
        self.thread.start()
        return self

    def join(self, timeout=30):
        self.thread.join(timeout)
        assert not self.thread.is_alive(), "server did not finish"
        return self.exit_code


def run_runner_thread(config, runner_id, results):
    def target():
        results[runner_id] = run_runner(config, runner_id)

    t = threading.Thread(target=target, daemon=True)
    t.start()
    return t


class TestEndToEndSockets:
    def test_study_matches_reference(self, tmp_path, port_block):
        config = study_config(tmp_path, port_block(4), server_shards=2, cycles=3)
        server = ServerThread(config).start()
        results = {}
        threads = [run_runner_thread(config, i, results) for i in range(2)]
        assert server.join() == 0
        for t in threads:
            t.join(10)
        assert results == {0: EXIT_OK, 1: EXIT_OK}
        snap = read_snapshot(config.ensemble_out, config.semantic_hash())
        expected = run_reference_study(config)
        for member in snap.members:
            assert np.array_equal(member.values, expected[member.member_id])

    def test_multipart_runner(self, tmp_path, port_block):
        config = study_config(
            tmp_path, port_block(4), runner_parts=2, server_shards=2, members=3, cycles=2
        )
        server = ServerThread(config).start()
        results = {}
        t = run_runner_thread(config, 0, results)
        assert server.join() == 0
        t.join(10)
        assert results[0] == EXIT_OK
        snap = read_snapshot(config.ensemble_out, config.semantic_hash())
        expected = run_reference_study(config)
        for member in snap.members:
            assert np.array_equal(member.values, expected[member.member_id])

    def test_metrics_events_written(self, tmp_path, port_block):
        config = study_config(tmp_path, port_block(4))
        server = ServerThread(config).start()
        results = {}
        threads = [run_runner_thread(config, i, results) for i in range(2)]
        assert server.join() == 0
        for t in threads:
            t.join(10)
        events = {e["event"] for e in read_events(config.metrics_path)}
        assert {"server_start", "runner_ready", "assign", "member_done", "phase", "study_done"} <= events

    def test_runner_exits_2_when_server_absent(self, tmp_path, port_block):
        config = study_config(tmp_path, port_block(4), connect_timeout_s=0.4)
        assert run_runner(config, 0) == EXIT_CONNECTION

    def test_runner_layout_mismatch_fatal(self, tmp_path, port_block):
        config = study_config(tmp_path, port_block(4))
        server = ServerThread(config).start()
        with pytest.raises(ConfigurationError):
            da_init((config.host, config.base_port), n_dynamic_local=5, runner_id=7,
                    connect_timeout_s=2.0)
        # healthy runners still finish the study
        results = {}
        threads = [run_runner_thread(config, i, results) for i in range(2)]
        assert server.join() == 0
        for t in threads:
            t.join(10)

    def test_nan_model_failure_exit_code_and_recovery(self, tmp_path, port_block):
        config = study_config(
            tmp_path, port_block(4), members=4, cycles=2, nan_member=2,
            member_failure_policy="replace", max_member_restarts=0,
            runner_timeout_s=5.0,
        )
        server = ServerThread(config).start()
        results = {}
        first = run_runner_thread(config, 0, results)
        first.join(20)
        # runner 0 eventually drew the poisoned member and died with code 3
        assert results[0] == EXIT_MODEL_FAILURE
        # a replacement runner finishes the study (member was replaced)
        second = run_runner_thread(config, 1, results)
        assert server.join() == 0
        second.join(10)
        assert results[1] == EXIT_OK
        snap = read_snapshot(config.ensemble_out, config.semantic_hash())
        assert len(snap.members) == 4
        for member in snap.members:
            assert np.all(np.isfinite(member.values))

    def test_runner_disconnect_member_rescheduled(self, tmp_path, port_block):
        config = study_config(tmp_path, port_block(4), members=3, cycles=2, runner_timeout_s=5.0)
        server = ServerThread(config).start()

        # a bare client that grabs one assignment and vanishes
        ranges = block_decompose(config.n_dynamic, 1)
        part = da_init((config.host, config.base_port), len(ranges[0]), runner_id=50,
                       connect_timeout_s=2.0)
        buf = np.zeros(config.n_dynamic)
        got = da_expose(part, buf)
        assert got is not None
        part.close()

        results = {}
        t = run_runner_thread(config, 0, results)
        assert server.join() == 0
        t.join(10)
        assert results[0] == EXIT_OK
        events = read_events(config.metrics_path)
        lost = [e for e in events if e["event"] == "runner_lost" and e["runner"] == 50]
        assert lost and lost[0]["reason"] == "disconnect"
        # every member of every cycle was propagated exactly once by an accepted copy
        done = [(e["cycle"], e["member"]) for e in events if e["event"] == "member_done"]
        assert len(done) == len(set(done)) == config.members * config.cycles

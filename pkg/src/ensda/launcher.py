"""Study orchestration: spawn, supervise, restart, and resize the fleet.

The launcher is the only component that talks to the process manager (here
plain child processes standing in for a batch scheduler). It observes the
server through its heartbeat channel and the runners only through process
exits and server notifications; every failure short of the launcher's own
is recovered automatically until the restart budget runs out.
"""

import logging
import signal
import socket
import subprocess
import sys
import threading
import time
from dataclasses import dataclass, field
from pathlib import Path
from queue import Empty, Queue

from . import protocol
from .config import StudyConfig, split_command
from .errors import ProtocolError
from .metrics import MetricsWriter

logger = logging.getLogger(__name__)

EXIT_DONE = 0
EXIT_CONFIG = 1
EXIT_BUDGET = 4


@dataclass
class ManagedProcess:
    role: str  # "server" | "runner"
    popen: subprocess.Popen
    slot: int = -1
    runner_id: int = -1


@dataclass
class _Timeline:
    """Scheduled fault injections and resizes, armed per cycle."""

    kills: list = field(default_factory=list)  # (cycle, count, delay_ms)
    kill_server_cycle: int = -1
    kill_server_delay_ms: int = 0
    resizes: dict = field(default_factory=dict)  # cycle -> target

    @classmethod
    def from_config(cls, config: StudyConfig) -> "_Timeline":
        return cls(
            kills=[(k.cycle, k.count, k.delay_ms) for k in config.kill_runners],
            kill_server_cycle=config.kill_server_cycle,
            kill_server_delay_ms=config.kill_server_delay_ms,
            resizes={r.cycle: r.target for r in config.resizes},
        )


class Launcher:
    def __init__(self, config: StudyConfig, config_path):
        self.config = config
        self.config_path = str(config_path)
        self.metrics = MetricsWriter(config.metrics_path, source="launcher")
        self.timeline = _Timeline.from_config(config)
        self.events: Queue = Queue()
        self.listener: socket.socket | None = None
        self.server_conn: socket.socket | None = None
        self.server: ManagedProcess | None = None
        self.runners: dict[int, ManagedProcess] = {}  # slot -> process
        self.target = config.runners
        self.next_runner_id = 0
        self.restarts = 0
        self.last_heartbeat = 0.0
        self.heartbeat_seen = False
        self.study_done = False
        self.draining_ids: set[int] = set()
        self.pending_kills: list[tuple[float, int]] = []  # (due_at, count)
        self.pending_server_kill: float | None = None
        self._control_mtime = 0.0
        self._last_control_poll = 0.0

    # ------------------------------------------------------------------ setup

    def _listen(self) -> None:
        sock = socket.socket(socket.AF_INET, socket.SOCK_STREAM)
        sock.setsockopt(socket.SOL_SOCKET, socket.SO_REUSEADDR, 1)
        sock.bind((self.config.host, self.config.launcher_port))
        sock.listen(4)
        self.listener = sock
        threading.Thread(target=self._accept_loop, daemon=True).start()

    def _accept_loop(self) -> None:
        while True:
            try:
                conn, _ = self.listener.accept()
            except OSError:
                return
            conn.setsockopt(socket.IPPROTO_TCP, socket.TCP_NODELAY, 1)
            self.server_conn = conn
            threading.Thread(target=self._server_reader, args=(conn,), daemon=True).start()

    def _server_reader(self, conn: socket.socket) -> None:
        decoder = protocol.FrameDecoder()
        while True:
            try:
                data = conn.recv(1 << 16)
            except OSError:
                data = b""
            if not data:
                self.events.put(("channel_lost", None))
                return
            try:
                msgs = decoder.feed(data)
            except ProtocolError as exc:
                logger.error("server channel: %s", exc)
                self.events.put(("channel_lost", None))
                return
            for msg in msgs:
                if isinstance(msg, protocol.Heartbeat):
                    self.events.put(("heartbeat", msg.timestamp_ms))
                elif isinstance(msg, protocol.RunnerGone):
                    self.events.put(("runner_gone", msg.runner_id))
                elif isinstance(msg, protocol.CycleDone):
                    self.events.put(("cycle_done", msg.cycle))
                elif isinstance(msg, protocol.StudyDone):
                    self.events.put(("study_done", None))

    # ------------------------------------------------------------- processes

    def _spawn_server(self, restore: bool) -> None:
        cmd = [
            sys.executable,
            "-m",
            "ensda.cli",
            "server",
            "--config",
            self.config_path,
        ]
        if restore:
            cmd.append("--restore")
        self.server = ManagedProcess(role="server", popen=subprocess.Popen(cmd))
        self.last_heartbeat = time.monotonic()
        self.heartbeat_seen = False
        self.metrics.emit("spawn", role="server", pid=self.server.popen.pid, restore=restore)

    def _runner_command(self, slot: int, runner_id: int) -> list[str]:
        template = self.config.runner_cmd_slots.get(slot) or self.config.runner_cmd
        if template:
            return split_command(template, config=self.config_path, runner_id=runner_id)
        return [
            sys.executable,
            "-m",
            "ensda.cli",
            "runner",
            "--config",
            self.config_path,
            "--runner-id",
            str(runner_id),
        ]

    def _spawn_runner(self, slot: int) -> None:
        runner_id = self.next_runner_id
        self.next_runner_id += 1
        cmd = self._runner_command(slot, runner_id)
        proc = ManagedProcess(
            role="runner", popen=subprocess.Popen(cmd), slot=slot, runner_id=runner_id
        )
        self.runners[slot] = proc
        self.metrics.emit("spawn", role="runner", runner=runner_id, slot=slot, pid=proc.popen.pid)

    def _kill_process(self, proc: ManagedProcess) -> None:
        if proc.popen.poll() is None:
            try:
                proc.popen.kill()
            except OSError:
                pass
        try:
            proc.popen.wait(timeout=5)
        except subprocess.TimeoutExpired:
            pass

    def _charge_restart(self, what: str) -> bool:
        """Count one recovery action against the budget; False means abort."""
        self.restarts += 1
        if self.restarts > self.config.max_restarts:
            logger.error(
                "maximum number of restarts (%d) reached while restarting %s; "
                "stopping the study - check for a persistent error",
                self.config.max_restarts,
                what,
            )
            self.metrics.emit("abort", reason="restart_budget", restarts=self.restarts)
            return False
        return True

    # ------------------------------------------------------------- main loop

    def run(self) -> int:
        try:
            return self._run()
        finally:
            self._teardown()

    def _run(self) -> int:
        ckpt = Path(self.config.checkpoint_dir) / "checkpoint.bin"
        if ckpt.exists():
            ckpt.unlink()
        metrics_path = Path(self.config.metrics_path)
        if metrics_path.exists():
            metrics_path.unlink()
        self.metrics.emit("study_start", study=self.config.study, runners=self.target)

        self._listen()
        self._spawn_server(restore=False)
        if not self._await_heartbeat():
            return EXIT_BUDGET
        self._arm_cycle(0)
        for slot in range(self.target):
            self._spawn_runner(slot)

        while True:
            self._drain_events()
            if self.study_done:
                return EXIT_DONE
            if not self._check_server():
                return EXIT_BUDGET
            if not self._check_runners():
                return EXIT_BUDGET
            self._fire_pending_kills()
            self._poll_control_file()
            time.sleep(0.05)

    def _await_heartbeat(self) -> bool:
        deadline = time.monotonic() + self.config.connect_timeout_s + self.config.server_timeout_s
        while time.monotonic() < deadline:
            self._drain_events()
            if self.heartbeat_seen:
                return True
            if self.server.popen.poll() is not None:
                break
            time.sleep(0.05)
        logger.error("server never became ready")
        self.metrics.emit("abort", reason="server_not_ready")
        return False

    def last_heartbeat_age(self) -> float:
        if self.server_conn is None:
            return 1e9
        return time.monotonic() - self.last_heartbeat

    def _drain_events(self) -> None:
        while True:
            try:
                event, payload = self.events.get_nowait()
            except Empty:
                return
            if event == "heartbeat":
                self.last_heartbeat = time.monotonic()
                self.heartbeat_seen = True
            elif event == "runner_gone":
                self._on_runner_gone(payload)
            elif event == "cycle_done":
                self._arm_cycle(payload + 1)
            elif event == "study_done":
                self.study_done = True
            elif event == "channel_lost":
                # reconnection (after a server restart) re-arms the channel;
                # staleness is judged by heartbeat age either way
                pass

    def _arm_cycle(self, cycle: int) -> None:
        """Schedule fault injections and resizes configured for this cycle."""
        now = time.monotonic()
        for kill_cycle, count, delay_ms in self.timeline.kills:
            if kill_cycle == cycle:
                self.pending_kills.append((now + delay_ms / 1000.0, count))
        if self.timeline.kill_server_cycle == cycle:
            self.pending_server_kill = now + self.timeline.kill_server_delay_ms / 1000.0
        if cycle in self.timeline.resizes:
            self._resize(self.timeline.resizes[cycle])

    def _fire_pending_kills(self) -> None:
        now = time.monotonic()
        due = [k for k in self.pending_kills if k[0] <= now]
        self.pending_kills = [k for k in self.pending_kills if k[0] > now]
        for _, count in due:
            victims = sorted(
                (p for p in self.runners.values() if p.popen.poll() is None),
                key=lambda p: p.runner_id,
            )[:count]
            for proc in victims:
                logger.info("injecting failure: killing runner %d", proc.runner_id)
                self.metrics.emit("kill_injected", runner=proc.runner_id, slot=proc.slot)
                try:
                    proc.popen.send_signal(signal.SIGKILL)
                except OSError:
                    pass
        if self.pending_server_kill is not None and self.pending_server_kill <= now:
            self.pending_server_kill = None
            if self.server and self.server.popen.poll() is None:
                logger.info("injecting failure: killing server")
                self.metrics.emit("kill_injected", role="server")
                try:
                    self.server.popen.send_signal(signal.SIGKILL)
                except OSError:
                    pass

    def _check_server(self) -> bool:
        code = self.server.popen.poll()
        dead = code is not None
        stale = self.last_heartbeat_age() > self.config.server_timeout_s
        if not dead and not stale:
            return True
        if dead and code == 0:
            # give an in-flight STUDY_DONE a moment to land before deciding
            time.sleep(0.1)
        self._drain_events()
        if self.study_done:
            return True
        reason = "exit" if dead else "heartbeat timeout"
        logger.warning("server lost (%s); restarting from last checkpoint", reason)
        self.metrics.emit("server_restart", reason=reason, restarts=self.restarts + 1)
        if not self._charge_restart("the server"):
            return False
        # kill the whole fleet, then bring it back from the checkpoint
        if self.server_conn is not None:
            try:
                self.server_conn.close()
            except OSError:
                pass
            self.server_conn = None
        self._kill_process(self.server)
        for proc in list(self.runners.values()):
            self._kill_process(proc)
        self.runners.clear()
        self.draining_ids.clear()
        self._spawn_server(restore=True)
        if not self._await_heartbeat():
            return False
        for slot in range(self.target):
            self._spawn_runner(slot)
        return True

    def _check_runners(self) -> bool:
        for slot, proc in list(self.runners.items()):
            code = proc.popen.poll()
            if code is None:
                continue
            del self.runners[slot]
            was_draining = proc.runner_id in self.draining_ids
            self.draining_ids.discard(proc.runner_id)
            self.metrics.emit(
                "exit", role="runner", runner=proc.runner_id, slot=slot, code=code
            )
            if code == 0 and not self.study_done:
                # a clean exit usually means STOP; let STUDY_DONE land first
                time.sleep(0.1)
                self._drain_events()
            if self.study_done or was_draining:
                continue
            if slot >= self.target:
                continue
            if not self._charge_restart(f"runner {proc.runner_id}"):
                return False
            logger.info("replacing runner %d (exit code %s)", proc.runner_id, code)
            self._spawn_runner(slot)
        return True

    def _on_runner_gone(self, runner_id: int) -> None:
        """Server detected a runner failure; make sure the process is gone."""
        if runner_id in self.draining_ids:
            self.draining_ids.discard(runner_id)
            return
        for proc in self.runners.values():
            if proc.runner_id == runner_id and proc.popen.poll() is None:
                logger.info("killing runner %d reported gone by the server", runner_id)
                self._kill_process(proc)
                return  # its exit is reaped and replaced by _check_runners

    def _resize(self, target: int) -> None:
        target = max(0, target)
        if target == self.target:
            return
        logger.info("resizing runner fleet: %d -> %d", self.target, target)
        self.metrics.emit("resize", previous=self.target, target=target)
        old = self.target
        self.target = target
        if target > old:
            for slot in range(old, target):
                if slot not in self.runners:
                    self._spawn_runner(slot)
        else:
            for slot in range(target, old):
                proc = self.runners.get(slot)
                if proc is not None and proc.popen.poll() is None:
                    # graceful drain: the server sends STOP when it next idles
                    self.draining_ids.add(proc.runner_id)
                    self._send_to_server(protocol.RunnerGone(proc.runner_id))

    def _send_to_server(self, msg) -> None:
        if self.server_conn is None:
            return
        try:
            self.server_conn.sendall(protocol.encode(msg))
        except OSError:
            pass

    def _poll_control_file(self) -> None:
        if not self.config.control_file:
            return
        now = time.monotonic()
        if now - self._last_control_poll < 1.0:
            return
        self._last_control_poll = now
        path = Path(self.config.control_file)
        if not path.exists():
            return
        mtime = path.stat().st_mtime
        if mtime == self._control_mtime:
            return
        self._control_mtime = mtime
        try:
            target = int(path.read_text().strip())
        except ValueError:
            logger.warning("control file %s does not contain an integer", path)
            return
        self._resize(target)

    # --------------------------------------------------------------- teardown

    def _teardown(self) -> None:
        deadline = time.monotonic() + 3.0
        while time.monotonic() < deadline:
            waiting = [p for p in self.runners.values() if p.popen.poll() is None]
            server_up = self.server is not None and self.server.popen.poll() is None
            if not waiting and not server_up:
                break
            time.sleep(0.05)
        for proc in list(self.runners.values()):
            self._kill_process(proc)
        if self.server is not None:
            self._kill_process(self.server)
        if self.listener is not None:
            try:
                self.listener.close()
            except OSError:
                pass
        self.metrics.emit("study_end", restarts=self.restarts)


def run_study(config: StudyConfig, config_path) -> int:
    """Run a complete study; returns the launcher exit code."""
    return Launcher(config, config_path).run()

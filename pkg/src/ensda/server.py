"""Sharded TCP server process.

Shard s listens on base_port + s; shard 0 doubles as the registry where
every connection starts with RUNNER_HELLO / HELLO_ACK. All decisions run
through the single core state machine; per-connection reader and writer
threads only move bytes.
"""

import logging
import queue
import socket
import threading
import time

from . import protocol
from .config import StudyConfig
from .errors import CheckpointError, ProtocolError
from .metrics import MetricsWriter, now_ms
from .server_core import SERVER_SENDER_ID, ServerCore, Transport

logger = logging.getLogger(__name__)


class _Conn:
    def __init__(self, conn_id, sock: socket.socket, shard: int):
        self.conn_id = conn_id
        self.sock = sock
        self.shard = shard
        self.outbox: queue.Queue = queue.Queue()
        self.closed = False


class ServerTransport(Transport):
    """Socket plumbing around a ServerCore."""

    def __init__(self, config: StudyConfig, metrics: MetricsWriter, restore: bool = False):
        self.config = config
        self.metrics = metrics
        self.lock = threading.RLock()
        self.exit_code = 0
        self.done_event = threading.Event()
        self.conns: dict[int, _Conn] = {}
        self._next_conn_id = 1
        self._listeners: list[socket.socket] = []
        self._threads: list[threading.Thread] = []
        self._launcher_sock: socket.socket | None = None
        self._launcher_outbox: queue.Queue = queue.Queue()
        self.core = ServerCore(config, self, metrics, restore=restore)

    # ------------------------------------------------------------- transport

    def send(self, conn_id, msg) -> None:
        conn = self.conns.get(conn_id)
        if conn is not None:
            conn.outbox.put(protocol.encode(msg))

    def close(self, conn_id) -> None:
        conn = self.conns.get(conn_id)
        if conn is not None:
            conn.outbox.put(None)

    def send_launcher(self, msg) -> None:
        if self.config.launcher_port > 0:
            self._launcher_outbox.put(protocol.encode(msg))

    def study_finished(self, exit_code: int) -> None:
        self.exit_code = exit_code
        self.done_event.set()

    # ------------------------------------------------------------- lifecycle

    def start(self) -> None:
        for shard in range(self.config.server_shards):
            sock = socket.socket(socket.AF_INET, socket.SOCK_STREAM)
            sock.setsockopt(socket.SOL_SOCKET, socket.SO_REUSEADDR, 1)
            sock.bind((self.config.host, self.config.base_port + shard))
            sock.listen(64)
            self._listeners.append(sock)
            t = threading.Thread(target=self._accept_loop, args=(sock, shard), daemon=True)
            t.start()
            self._threads.append(t)
        if self.config.launcher_port > 0:
            self._connect_launcher()
        t = threading.Thread(target=self._ticker, daemon=True)
        t.start()
        self._threads.append(t)

    def wait(self) -> int:
        self.done_event.wait()
        # give writer threads a moment to flush STOP / STUDY_DONE frames
        deadline = time.monotonic() + 2.0
        while time.monotonic() < deadline:
            if all(c.outbox.empty() for c in list(self.conns.values())) and self._launcher_outbox.empty():
                break
            time.sleep(0.02)
        time.sleep(0.05)
        self.shutdown()
        return self.exit_code

    def shutdown(self) -> None:
        for sock in self._listeners:
            try:
                sock.close()
            except OSError:
                pass
        for conn in list(self.conns.values()):
            self._teardown_conn(conn)
        if self._launcher_sock is not None:
            try:
                self._launcher_sock.close()
            except OSError:
                pass

    # ------------------------------------------------------------- internals

    def _accept_loop(self, listener: socket.socket, shard: int) -> None:
        while not self.done_event.is_set():
            try:
                sock, _ = listener.accept()
            except OSError:
                return
            sock.setsockopt(socket.IPPROTO_TCP, socket.TCP_NODELAY, 1)
            with self.lock:
                conn = _Conn(self._next_conn_id, sock, shard)
                self._next_conn_id += 1
                self.conns[conn.conn_id] = conn
            threading.Thread(target=self._reader, args=(conn,), daemon=True).start()
            threading.Thread(target=self._writer, args=(conn,), daemon=True).start()

    def _reader(self, conn: _Conn) -> None:
        decoder = protocol.FrameDecoder()
        while True:
            try:
                data = conn.sock.recv(1 << 16)
            except OSError:
                data = b""
            if not data:
                break
            try:
                msgs = decoder.feed(data)
            except ProtocolError as exc:
                logger.warning("conn %d: %s", conn.conn_id, exc)
                break
            for msg in msgs:
                try:
                    with self.lock:
                        self.core.handle_message(conn.conn_id, msg, conn.shard)
                except ProtocolError as exc:
                    logger.warning("conn %d: %s", conn.conn_id, exc)
                    self._drop_conn(conn)
                    return
        self._drop_conn(conn)

    def _writer(self, conn: _Conn) -> None:
        while True:
            data = conn.outbox.get()
            if data is None:
                break
            try:
                conn.sock.sendall(data)
            except OSError:
                break
        self._teardown_conn(conn)

    def _drop_conn(self, conn: _Conn) -> None:
        self._teardown_conn(conn)
        with self.lock:
            self.core.on_connection_lost(conn.conn_id)

    def _teardown_conn(self, conn: _Conn) -> None:
        with self.lock:
            if conn.closed:
                return
            conn.closed = True
            self.conns.pop(conn.conn_id, None)
        conn.outbox.put(None)
        try:
            conn.sock.shutdown(socket.SHUT_RDWR)
        except OSError:
            pass
        try:
            conn.sock.close()
        except OSError:
            pass

    def _connect_launcher(self) -> None:
        deadline = time.monotonic() + self.config.connect_timeout_s
        sock = None
        while time.monotonic() < deadline:
            try:
                sock = socket.create_connection(
                    (self.config.host, self.config.launcher_port), timeout=2.0
                )
                break
            except OSError:
                time.sleep(0.1)
        if sock is None:
            raise ProtocolError(
                f"cannot reach launcher on port {self.config.launcher_port}"
            )
        sock.settimeout(None)  # connect timeout must not become a recv timeout
        sock.setsockopt(socket.IPPROTO_TCP, socket.TCP_NODELAY, 1)
        self._launcher_sock = sock
        threading.Thread(target=self._launcher_writer, daemon=True).start()
        threading.Thread(target=self._launcher_reader, daemon=True).start()

    def _launcher_writer(self) -> None:
        while True:
            data = self._launcher_outbox.get()
            if data is None:
                return
            try:
                self._launcher_sock.sendall(data)
            except OSError:
                return

    def _launcher_reader(self) -> None:
        decoder = protocol.FrameDecoder()
        while True:
            try:
                data = self._launcher_sock.recv(1 << 16)
            except OSError:
                data = b""
            if not data:
                break
            try:
                msgs = decoder.feed(data)
            except ProtocolError as exc:
                logger.warning("launcher channel: %s", exc)
                break
            with self.lock:
                for msg in msgs:
                    self.core.handle_launcher_message(msg)
        # losing the launcher means nobody will ever clean us up: stop
        if not self.done_event.is_set():
            logger.error("launcher channel lost, shutting down")
            self.exit_code = 2
            self.done_event.set()

    def _ticker(self) -> None:
        hb_period = max(0.05, min(0.5, self.config.server_timeout_s / 5.0))
        scan_period = max(0.05, min(0.5, self.config.runner_timeout_s / 5.0))
        last_hb = 0.0
        last_scan = 0.0
        while not self.done_event.is_set():
            now = time.monotonic()
            if now - last_hb >= hb_period:
                last_hb = now
                self.send_launcher(protocol.Heartbeat(SERVER_SENDER_ID, now_ms()))
            if now - last_scan >= scan_period:
                last_scan = now
                with self.lock:
                    self.core.scan_timeouts()
            time.sleep(0.02)


def run_server(config: StudyConfig, restore: bool = False) -> int:
    """Run the server until the study completes; returns the exit code."""
    metrics = MetricsWriter(config.metrics_path, source="server")
    try:
        transport = ServerTransport(config, metrics, restore=restore)
    except CheckpointError as exc:
        logger.error("%s", exc)
        metrics.emit("server_fatal", error=str(exc))
        return 1
    transport.start()
    return transport.wait()

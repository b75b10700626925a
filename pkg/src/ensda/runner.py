"""Runner-side client: the two-call API plus the model driver loop.

A runner part opens one connection per server shard it exchanges data
with; ``da_init`` performs the hello handshake and ``da_expose`` pushes the
local dynamic state and blocks until an analysis state (for whichever
member the server chose) or a stop signal comes back. The model code never
learns which member it is propagating.
"""

import logging
import queue
import socket
import threading
import time
from dataclasses import dataclass

import numpy as np

from . import protocol
from .config import StudyConfig
from .errors import ConfigurationError, NumericalError, ProtocolError
from .metrics import now_ms
from .models import make_model
from .partition import block_decompose

logger = logging.getLogger(__name__)

EXIT_OK = 0
EXIT_CONFIG = 1
EXIT_CONNECTION = 2
EXIT_MODEL_FAILURE = 3


class ConnectionLost(Exception):
    pass


@dataclass
class ExposeResult:
    member_id: int
    cycle: int
    nsteps: int


class _ShardLink:
    """One socket to one shard, with a send lock and a reader thread."""

    def __init__(self, shard: int, sock: socket.socket, inbox: queue.Queue):
        self.shard = shard
        self.sock = sock
        self.inbox = inbox
        self.send_lock = threading.Lock()
        self.thread: threading.Thread | None = None

    def send(self, msg) -> None:
        data = protocol.encode(msg)
        try:
            with self.send_lock:
                self.sock.sendall(data)
        except OSError as exc:
            raise ConnectionLost(f"shard {self.shard}: {exc}") from exc

    def recv_one(self):
        """Synchronous single-message read (used during the handshake)."""
        decoder = protocol.FrameDecoder()
        while True:
            data = self.sock.recv(1 << 16)
            if not data:
                raise ConnectionLost(f"shard {self.shard} closed during handshake")
            msgs = decoder.feed(data)
            if msgs:
                if len(msgs) > 1 or decoder.pending_bytes:
                    raise ProtocolError("unexpected extra data during handshake")
                return msgs[0]

    def start_reader(self) -> None:
        self.thread = threading.Thread(target=self._read_loop, daemon=True)
        self.thread.start()

    def _read_loop(self) -> None:
        decoder = protocol.FrameDecoder()
        while True:
            try:
                data = self.sock.recv(1 << 16)
            except OSError:
                data = b""
            if not data:
                self.inbox.put(("lost", self.shard, None))
                return
            try:
                msgs = decoder.feed(data)
            except ProtocolError as exc:
                logger.error("shard %d: %s", self.shard, exc)
                self.inbox.put(("lost", self.shard, None))
                return
            for msg in msgs:
                self.inbox.put(("msg", self.shard, msg))

    def close(self) -> None:
        try:
            self.sock.shutdown(socket.SHUT_RDWR)
        except OSError:
            pass
        try:
            self.sock.close()
        except OSError:
            pass


def _connect_with_backoff(host: str, port: int, timeout_s: float) -> socket.socket:
    deadline = time.monotonic() + timeout_s
    delay = 0.05
    while True:
        try:
            sock = socket.create_connection((host, port), timeout=2.0)
            sock.settimeout(None)  # connect timeout must not become a recv timeout
            sock.setsockopt(socket.IPPROTO_TCP, socket.TCP_NODELAY, 1)
            return sock
        except OSError as exc:
            if time.monotonic() + delay > deadline:
                raise ConnectionLost(f"cannot reach server at {host}:{port}: {exc}") from exc
            time.sleep(delay)
            delay = min(delay * 2, 1.0)


class RunnerPart:
    """State and connections of one runner part (one 'rank')."""

    def __init__(self, runner_id: int, part_index: int, parts: int):
        self.runner_id = runner_id
        self.part_index = part_index
        self.parts = parts
        self.links: dict[int, _ShardLink] = {}
        self.inbox: queue.Queue = queue.Queue()
        self.transfers = []  # (shard, Range) with data to move
        self.part_range = None
        self.n_dynamic = 0
        self.n_assimilated = 0
        self.member_id = protocol.NO_MEMBER
        self.cycle = protocol.NO_MEMBER

    def close(self) -> None:
        for link in self.links.values():
            link.close()


def da_init(
    endpoint: tuple[str, int],
    n_dynamic_local: int,
    part_index: int = 0,
    parts: int = 1,
    runner_id: int = 0,
    connect_timeout_s: float = 10.0,
) -> RunnerPart:
    """Register one runner part with the server and open all shard links.

    Retries the initial connection with backoff until ``connect_timeout_s``.
    Raises ConnectionLost if the server stays unreachable and
    ConfigurationError if the announced local size disagrees with the
    server's state layout.
    """
    host, base_port = endpoint
    part = RunnerPart(runner_id, part_index, parts)
    hello = protocol.RunnerHello(
        runner_id=runner_id,
        part_index=part_index,
        parts=parts,
        n_dynamic_local=n_dynamic_local,
    )
    registry = _ShardLink(0, _connect_with_backoff(host, base_port, connect_timeout_s), part.inbox)
    registry.send(hello)
    try:
        ack = registry.recv_one()
    except ConnectionLost as exc:
        # reachable server that drops us right after the hello: rejection,
        # typically a layout or part-count mismatch
        raise ConfigurationError(f"server rejected registration: {exc}") from exc
    if not isinstance(ack, protocol.HelloAck):
        raise ProtocolError(f"expected HELLO_ACK, got {type(ack).__name__}")
    part.n_dynamic = ack.n_dynamic
    part.n_assimilated = ack.n_assimilated
    part_ranges = block_decompose(ack.n_dynamic, parts)
    part.part_range = part_ranges[part_index]
    if len(part.part_range) != n_dynamic_local:
        raise ConfigurationError(
            f"local state length {n_dynamic_local} does not match server layout "
            f"(part {part_index}/{parts} of {ack.n_dynamic} is {len(part.part_range)})"
        )
    shard_ranges = block_decompose(ack.n_dynamic, ack.shards)
    part.transfers = [
        (s, part.part_range.intersect(r))
        for s, r in enumerate(shard_ranges)
        if len(part.part_range.intersect(r))
    ]
    part.links[0] = registry
    for shard, _rng in part.transfers:
        if shard == 0:
            continue
        ep_host, ep_port = ack.endpoints[shard]
        link = _ShardLink(
            shard, _connect_with_backoff(ep_host, ep_port, connect_timeout_s), part.inbox
        )
        link.send(hello)
        ack2 = link.recv_one()
        if not isinstance(ack2, protocol.HelloAck):
            raise ProtocolError(f"expected HELLO_ACK on shard {shard}")
        part.links[shard] = link
    for link in part.links.values():
        link.start_reader()
    return part


def da_expose(part: RunnerPart, local_values: np.ndarray) -> ExposeResult | None:
    """Push the local state, block, and overwrite it with the next analysis.

    Returns the propagation order (member, cycle, nsteps) or None on stop.
    The very first call per part transmits the model's throwaway initial
    state, which the server only uses as a ready signal.
    """
    if local_values.shape[0] != len(part.part_range):
        raise ConfigurationError(
            f"buffer length {local_values.shape[0]} != local state length {len(part.part_range)}"
        )
    base = part.part_range.start
    for shard, rng in part.transfers:
        part.links[shard].send(
            protocol.StatePush(
                member_id=part.member_id,
                cycle=part.cycle,
                part_index=part.part_index,
                range_offset=rng.start,
                payload=local_values[rng.start - base : rng.stop - base],
            )
        )
    pending = {shard for shard, _ in part.transfers}
    order = None
    while pending:
        kind, shard, msg = part.inbox.get()
        if kind == "lost":
            raise ConnectionLost(f"server connection lost (shard {shard})")
        if isinstance(msg, protocol.Stop):
            return None
        if not isinstance(msg, protocol.Assign):
            raise ProtocolError(f"unexpected {type(msg).__name__} while waiting for analysis state")
        if shard not in pending:
            raise ProtocolError(f"duplicate analysis range from shard {shard}")
        if order is None:
            order = (msg.member_id, msg.cycle, msg.nsteps)
        elif order != (msg.member_id, msg.cycle, msg.nsteps):
            raise ProtocolError(
                f"inconsistent assignment across shards: {order} vs "
                f"{(msg.member_id, msg.cycle, msg.nsteps)}"
            )
        rng = dict(part.transfers)[shard]
        if msg.range_offset != rng.start or len(msg.payload) != len(rng):
            raise ProtocolError(f"unexpected analysis range from shard {shard}")
        local_values[rng.start - base : rng.stop - base] = msg.payload
        pending.discard(shard)
    part.member_id, part.cycle, nsteps = order
    return ExposeResult(member_id=order[0], cycle=order[1], nsteps=nsteps)


class _HeartbeatTicker(threading.Thread):
    """Periodic liveness beacon on the registry link; never touches state."""

    def __init__(self, link: _ShardLink, runner_id: int, period_s: float):
        super().__init__(daemon=True)
        self.link = link
        self.runner_id = runner_id
        self.period_s = period_s
        self.stop_event = threading.Event()

    def run(self) -> None:
        while not self.stop_event.wait(self.period_s):
            try:
                self.link.send(protocol.Heartbeat(self.runner_id, now_ms()))
            except ConnectionLost:
                return


def run_runner(config: StudyConfig, runner_id: int) -> int:
    """Full runner process: init, heartbeats, driver loop, exit code."""
    model = make_model(config.model_spec())
    full = model.initial_state()
    parts_count = config.runner_parts
    ranges = block_decompose(config.n_dynamic, parts_count)
    endpoint = (config.host, config.base_port)

    try:
        parts = [
            da_init(
                endpoint,
                len(ranges[i]),
                part_index=i,
                parts=parts_count,
                runner_id=runner_id,
                connect_timeout_s=config.connect_timeout_s,
            )
            for i in range(parts_count)
        ]
    except ConnectionLost as exc:
        logger.error("runner %d: %s", runner_id, exc)
        return EXIT_CONNECTION
    except (ConfigurationError, ProtocolError) as exc:
        logger.error("runner %d: %s", runner_id, exc)
        return EXIT_CONFIG

    ticker = _HeartbeatTicker(parts[0].links[0], runner_id, config.heartbeat_period)
    ticker.start()
    try:
        if parts_count == 1:
            return _drive_single(model, parts[0], full)
        return _drive_multipart(model, parts, ranges, full)
    finally:
        ticker.stop_event.set()
        for part in parts:
            part.close()


def _drive_single(model, part: RunnerPart, full: np.ndarray) -> int:
    while True:
        try:
            result = da_expose(part, full)
        except ConnectionLost as exc:
            logger.error("%s", exc)
            return EXIT_CONNECTION
        except ProtocolError as exc:
            logger.error("%s", exc)
            return EXIT_CONNECTION
        if result is None:
            return EXIT_OK
        try:
            full[:] = model.propagate(full, result.nsteps)
        except NumericalError as exc:
            logger.error("model failure on member %d: %s", result.member_id, exc)
            return EXIT_MODEL_FAILURE


def _drive_multipart(model, parts: list[RunnerPart], ranges, full: np.ndarray) -> int:
    """P part threads around one shared state vector, synced at each expose."""
    barrier = threading.Barrier(len(parts))
    results: list = [None] * len(parts)
    codes: list = [EXIT_OK] * len(parts)
    stop = threading.Event()

    def worker(i: int) -> None:
        part = parts[i]
        view = full[ranges[i].start : ranges[i].stop]
        while not stop.is_set():
            try:
                results[i] = da_expose(part, view)
            except (ConnectionLost, ProtocolError) as exc:
                logger.error("part %d: %s", i, exc)
                codes[i] = EXIT_CONNECTION
                stop.set()
                barrier.abort()
                return
            try:
                barrier.wait()
            except threading.BrokenBarrierError:
                return
            if stop.is_set() or any(r is None for r in results):
                stop.set()
                return
            if i == 0:
                first = results[0]
                if any(
                    r is None or (r.member_id, r.cycle) != (first.member_id, first.cycle)
                    for r in results
                ):
                    logger.error("parts received different members: %s", results)
                    codes[0] = EXIT_CONNECTION
                    stop.set()
                else:
                    try:
                        full[:] = model.propagate(full, first.nsteps)
                    except NumericalError as exc:
                        logger.error("model failure: %s", exc)
                        codes[0] = EXIT_MODEL_FAILURE
                        stop.set()
            try:
                barrier.wait()
            except threading.BrokenBarrierError:
                return

    threads = [threading.Thread(target=worker, args=(i,), daemon=True) for i in range(len(parts))]
    for t in threads:
        t.start()
    for t in threads:
        t.join()
    return max(codes)

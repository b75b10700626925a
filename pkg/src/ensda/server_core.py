"""Server state machine: member assembly, scheduling, update, fault recovery.

The core is a single logical decision maker: the surrounding transport
serializes every event (hello, state part, heartbeat, connection loss,
timer tick) into it. It never touches sockets itself; it calls back into
a transport for sends and closes, which keeps it directly testable.
"""

import logging
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import protocol
from .checkpoint import EnsembleSnapshot, read_snapshot, write_snapshot
from .config import StudyConfig
from .enkf import enkf_update
from .errors import ProtocolError
from .metrics import MetricsWriter
from .models import init_ensemble, make_model
from .partition import DynamicState, make_layout, make_redistribution_map
from .rng import STREAM_REPLACE, member_rng
from .scheduling import ListScheduler

logger = logging.getLogger(__name__)

UNASSIGNED = "unassigned"
ASSIGNED = "assigned"
RECEIVING = "receiving"
DONE = "done"

SERVER_SENDER_ID = 0


@dataclass
class MemberRecord:
    member_id: int
    state: np.ndarray  # analysis dynamic state (input to this cycle's propagation)
    background: np.ndarray  # assembled propagated state for the current cycle
    status: str = UNASSIGNED
    runner: int | None = None
    received: set = field(default_factory=set)  # (part, shard) pairs
    restart_count: int = 0
    assigned_at_ms: int = 0


@dataclass
class RunnerInfo:
    runner_id: int
    conns: dict = field(default_factory=dict)  # (part, shard) -> conn id
    reg_received: set = field(default_factory=set)
    registered: bool = False
    deadline: float = 0.0
    current_member: int | None = None
    draining: bool = False


class Transport:
    """What the core needs from its surroundings."""

    def send(self, conn_id, msg) -> None:
        raise NotImplementedError

    def close(self, conn_id) -> None:
        raise NotImplementedError

    def send_launcher(self, msg) -> None:
        raise NotImplementedError

    def study_finished(self, exit_code: int) -> None:
        raise NotImplementedError


class ServerCore:
    def __init__(
        self,
        config: StudyConfig,
        transport: Transport,
        metrics: MetricsWriter,
        restore: bool = False,
        now_fn=time.monotonic,
    ):
        self.config = config
        self.transport = transport
        self.metrics = metrics
        self.now = now_fn
        self.layout = make_layout(config.n_dynamic, config.n_assimilated)
        self.rmap = make_redistribution_map(
            self.layout, config.runner_parts, config.server_shards
        )
        if min(len(r) for r in self.rmap.part_ranges) == 0:
            raise ProtocolError("runner_parts exceeds the state length")
        if min(len(r) for r in self.rmap.shard_ranges) == 0:
            raise ProtocolError("server_shards exceeds the state length")
        # every (part, shard) pair with data to move; a member is complete
        # when exactly these pairs have been received
        self.expected_pairs = frozenset(
            (p, s)
            for p in range(config.runner_parts)
            for s, _ in self.rmap.part_transfers(p)
        )

        from .observations import make_observation_source  # local: avoids cycle

        model = make_model(config.model_spec())
        base = model.initial_state()
        if config.spinup_steps:
            base = model.propagate_pure(base, config.spinup_steps)
        self.obs_source = make_observation_source(config, base)

        self.members: dict[int, MemberRecord] = {}
        self.cycle = 0
        if restore:
            snapshot = read_snapshot(self.checkpoint_path(), config.semantic_hash())
            self.cycle = snapshot.cycle
            self.obs_source.fast_forward(self.cycle)
            for member in snapshot.members:
                self.members[member.member_id] = MemberRecord(
                    member_id=member.member_id,
                    state=member.values,
                    background=np.empty_like(member.values),
                    restart_count=snapshot.restart_counts.get(member.member_id, 0),
                )
            logger.info("restored %d members at cycle %d", len(self.members), self.cycle)
        else:
            for member in init_ensemble(base, config.members, config.init_noise, config.seed):
                values = member.values
                if member.member_id == config.nan_member:
                    values = values.copy()
                    values[0] = np.nan
                self.members[member.member_id] = MemberRecord(
                    member_id=member.member_id,
                    state=values,
                    background=np.empty_like(values),
                )

        self.runners: dict[int, RunnerInfo] = {}
        self.conn_registry: dict = {}  # conn id -> (runner_id, part, shard)
        self.scheduler = ListScheduler()
        self.cycle_busy_ms: dict[int, float] = {}
        self.phase_start: float = self.now()
        self.done = False
        self.metrics.emit("server_start", cycle=self.cycle, restored=restore, members=len(self.members))
        self.scheduler.enqueue(sorted(self.members))

    # ------------------------------------------------------------------ events

    def handle_message(self, conn_id, msg, shard: int) -> None:
        if isinstance(msg, protocol.RunnerHello):
            self._on_hello(conn_id, msg, shard)
        elif isinstance(msg, protocol.StatePush):
            self._on_state_push(conn_id, msg)
        elif isinstance(msg, protocol.Heartbeat):
            self._on_heartbeat(msg.sender_id)
        else:
            raise ProtocolError(f"unexpected message on shard {shard}: {type(msg).__name__}")

    def handle_launcher_message(self, msg) -> None:
        if isinstance(msg, protocol.RunnerGone):
            self._on_drain_request(msg.runner_id)
        else:
            logger.warning("ignoring launcher message %s", type(msg).__name__)

    def _on_hello(self, conn_id, msg: protocol.RunnerHello, shard: int) -> None:
        if msg.parts != self.config.runner_parts:
            raise ProtocolError(
                f"runner {msg.runner_id} announced {msg.parts} parts, study uses {self.config.runner_parts}"
            )
        if msg.part_index >= msg.parts:
            raise ProtocolError(f"part index {msg.part_index} out of range")
        expected_len = len(self.rmap.part_ranges[msg.part_index])
        if msg.n_dynamic_local != expected_len:
            raise ProtocolError(
                f"runner {msg.runner_id} part {msg.part_index} announced {msg.n_dynamic_local} values, expected {expected_len}"
            )
        runner = self.runners.setdefault(msg.runner_id, RunnerInfo(runner_id=msg.runner_id))
        key = (msg.part_index, shard)
        if key in runner.conns:
            raise ProtocolError(
                f"duplicate connection for runner {msg.runner_id} part {msg.part_index} shard {shard}"
            )
        runner.conns[key] = conn_id
        runner.deadline = self.now() + self.config.runner_timeout_s
        self.conn_registry[conn_id] = (msg.runner_id, msg.part_index, shard)
        endpoints = tuple(
            (self.config.host, self.config.base_port + s)
            for s in range(self.config.server_shards)
        )
        self.transport.send(
            conn_id,
            protocol.HelloAck(
                shards=self.config.server_shards,
                n_dynamic=self.layout.n_dynamic,
                n_assimilated=self.layout.n_assimilated,
                endpoints=endpoints,
            ),
        )

    def _on_state_push(self, conn_id, msg: protocol.StatePush) -> None:
        origin = self.conn_registry.get(conn_id)
        if origin is None:
            # unknown or already-deregistered sender (e.g. a runner that was
            # failed while its last frames were in flight): discard
            self.metrics.emit("stale_part_discarded", member=msg.member_id, cycle=self.cycle)
            return
        runner_id, part, shard = origin
        if msg.part_index != part:
            raise ProtocolError(
                f"part index {msg.part_index} does not match connection part {part}"
            )
        expected = self.rmap.transfer(part, shard)
        if msg.range_offset != expected.start or len(msg.payload) != len(expected):
            raise ProtocolError(
                f"unexpected range [{msg.range_offset}, {msg.range_offset + len(msg.payload)}) "
                f"for part {part} shard {shard}, expected [{expected.start}, {expected.stop})"
            )
        runner = self.runners.get(runner_id)
        if runner is None:
            return  # runner already failed; late part, discard
        runner.deadline = self.now() + self.config.runner_timeout_s

        if msg.member_id == protocol.NO_MEMBER:
            # registration expose: content is a throwaway initial state,
            # receipt of all ranges doubles as the runner-ready signal
            runner.reg_received.add((part, shard))
            if not runner.registered and runner.reg_received == self.expected_pairs:
                runner.registered = True
                self.metrics.emit("runner_ready", runner=runner_id, cycle=self.cycle)
                self._runner_ready(runner_id)
            return

        member = self.members.get(msg.member_id)
        if (
            member is None
            or member.runner != runner_id
            or member.status not in (ASSIGNED, RECEIVING)
            or msg.cycle != self.cycle
        ):
            self.metrics.emit(
                "stale_part_discarded", member=msg.member_id, runner=runner_id, cycle=self.cycle
            )
            return
        key = (part, shard)
        if key in member.received:
            raise ProtocolError(
                f"duplicate part {key} for member {msg.member_id} from runner {runner_id}"
            )
        member.status = RECEIVING
        member.background[expected.start : expected.stop] = msg.payload
        member.received.add(key)
        if member.received == self.expected_pairs:
            self._member_done(member, runner)

    def _member_done(self, member: MemberRecord, runner: RunnerInfo) -> None:
        member.status = DONE
        member.received = set()
        member.runner = None
        runner.current_member = None
        wall_ms = (self.now() - member.assigned_at_ms / 1000.0) * 1000.0
        self.cycle_busy_ms[runner.runner_id] = self.cycle_busy_ms.get(runner.runner_id, 0.0) + wall_ms
        self.metrics.emit(
            "member_done",
            cycle=self.cycle,
            member=member.member_id,
            runner=runner.runner_id,
            wall_ms=round(wall_ms, 3),
        )
        self._runner_ready(runner.runner_id)
        self._maybe_finish_cycle()

    def _runner_ready(self, runner_id: int) -> None:
        runner = self.runners.get(runner_id)
        if runner is None:
            return
        if runner.draining:
            self._retire_runner(runner)
            return
        member_id = self.scheduler.runner_ready(runner_id)
        if member_id is not None:
            self._send_assignment(runner, member_id)

    def _retire_runner(self, runner: RunnerInfo) -> None:
        self.metrics.emit("runner_drained", runner=runner.runner_id, cycle=self.cycle)
        for conn_id in runner.conns.values():
            self.transport.send(conn_id, protocol.Stop())
        self._forget_runner(runner.runner_id)

    def _send_assignment(self, runner: RunnerInfo, member_id: int) -> None:
        member = self.members[member_id]
        member.status = ASSIGNED
        member.runner = runner.runner_id
        member.received = set()
        member.assigned_at_ms = int(self.now() * 1000)
        runner.current_member = member_id
        runner.deadline = self.now() + self.config.runner_timeout_s
        self.metrics.emit(
            "assign", cycle=self.cycle, member=member_id, runner=runner.runner_id
        )
        for part in range(self.config.runner_parts):
            for shard, rng in self.rmap.part_transfers(part):
                conn_id = runner.conns.get((part, shard))
                if conn_id is None:
                    # connections incomplete; the timeout scan will recover
                    logger.warning(
                        "runner %d missing connection part=%d shard=%d",
                        runner.runner_id, part, shard,
                    )
                    continue
                self.transport.send(
                    conn_id,
                    protocol.Assign(
                        member_id=member_id,
                        cycle=self.cycle,
                        nsteps=self.config.nsteps,
                        range_offset=rng.start,
                        payload=member.state[rng.start : rng.stop],
                    ),
                )

    def _on_heartbeat(self, runner_id: int) -> None:
        runner = self.runners.get(runner_id)
        if runner is not None:
            runner.deadline = self.now() + self.config.runner_timeout_s

    def _on_drain_request(self, runner_id: int) -> None:
        runner = self.runners.get(runner_id)
        if runner is None:
            return
        runner.draining = True
        # retire immediately if idle, else at next ready
        if runner.current_member is None and runner.registered:
            self.scheduler.remove_runner(runner_id)
            self._retire_runner(runner)

    # ------------------------------------------------------- failure handling

    def on_connection_lost(self, conn_id) -> None:
        origin = self.conn_registry.pop(conn_id, None)
        if origin is None:
            return
        runner_id, _, _ = origin
        if runner_id in self.runners and not self.done:
            self.fail_runner(runner_id, "disconnect")

    def scan_timeouts(self) -> None:
        if self.done:
            return
        now = self.now()
        expired = [
            r.runner_id
            for r in self.runners.values()
            if r.current_member is not None and now > r.deadline
        ]
        for runner_id in expired:
            self.fail_runner(runner_id, "timeout")

    def fail_runner(self, runner_id: int, reason: str) -> None:
        runner = self.runners.get(runner_id)
        if runner is None:
            return
        self.metrics.emit("runner_lost", runner=runner_id, reason=reason, cycle=self.cycle)
        member_id = runner.current_member
        self._forget_runner(runner_id)
        self.transport.send_launcher(protocol.RunnerGone(runner_id))
        if member_id is None:
            return
        member = self.members.get(member_id)
        if member is None or member.runner != runner_id:
            return
        # discard anything already received from the failing runner
        member.received = set()
        member.runner = None
        member.status = UNASSIGNED
        member.restart_count += 1
        if member.restart_count > self.config.max_member_restarts:
            self._apply_member_failure_policy(member)
        else:
            for rid, mid in self.scheduler.requeue_front(member_id):
                self._send_assignment(self.runners[rid], mid)

    def _forget_runner(self, runner_id: int) -> None:
        runner = self.runners.pop(runner_id, None)
        if runner is None:
            return
        self.scheduler.remove_runner(runner_id)
        for conn_id in runner.conns.values():
            self.conn_registry.pop(conn_id, None)
            self.transport.close(conn_id)

    def _apply_member_failure_policy(self, member: MemberRecord) -> None:
        if self.config.member_failure_policy == "drop":
            self.members.pop(member.member_id, None)
            self.scheduler.remove_member(member.member_id)
            logger.warning(
                "member %d exceeded %d restarts, dropped from the ensemble (%d members left)",
                member.member_id, self.config.max_member_restarts, len(self.members),
            )
            self.metrics.emit(
                "member_dropped", member=member.member_id, cycle=self.cycle, left=len(self.members)
            )
            if len(self.members) < 2:
                logger.error("fewer than 2 members left, aborting study")
                self._finish(exit_code=1)
                return
            self._maybe_finish_cycle()
        else:
            donors = [
                m.state
                for m in self.members.values()
                if m.member_id != member.member_id and np.all(np.isfinite(m.state))
            ]
            if not donors:
                logger.error("no finite donor states left to replace member %d", member.member_id)
                self._finish(exit_code=1)
                return
            base = np.mean(donors, axis=0)
            rng = member_rng(self.config.seed, self.cycle, member.member_id, STREAM_REPLACE)
            member.state = base + rng.uniform(
                -self.config.init_noise, self.config.init_noise, base.shape[0]
            )
            member.restart_count = 0
            member.status = UNASSIGNED
            logger.warning(
                "member %d exceeded %d restarts, replaced with a perturbed ensemble mean",
                member.member_id, self.config.max_member_restarts,
            )
            self.metrics.emit("member_replaced", member=member.member_id, cycle=self.cycle)
            for rid, mid in self.scheduler.requeue_front(member.member_id):
                self._send_assignment(self.runners[rid], mid)

    # ------------------------------------------------------------ cycle logic

    def _maybe_finish_cycle(self) -> None:
        if self.done or not self.members:
            return
        if any(m.status != DONE for m in self.members.values()):
            return
        self._run_update_phase()

    def _run_update_phase(self) -> None:
        now = self.now()
        prop_wall_ms = (now - self.phase_start) * 1000.0
        self.metrics.emit(
            "phase",
            cycle=self.cycle,
            phase="propagate",
            wall_ms=round(prop_wall_ms, 3),
            members=len(self.members),
            busy_ms={str(k): round(v, 3) for k, v in sorted(self.cycle_busy_ms.items())},
        )
        ids = sorted(self.members)
        n_assim = self.layout.n_assimilated
        background = np.column_stack([self.members[i].background[:n_assim] for i in ids])
        obs = self.obs_source.observe(self.cycle)
        t0 = self.now()
        analysis = enkf_update(
            background,
            obs,
            cycle=self.cycle,
            seed=self.config.seed,
            member_ids=ids,
            perturb=self.config.perturb_obs,
        )
        self.metrics.emit(
            "phase",
            cycle=self.cycle,
            phase="update",
            wall_ms=round((self.now() - t0) * 1000.0, 3),
            members=len(ids),
            observations=len(obs),
        )
        for col, member_id in enumerate(ids):
            member = self.members[member_id]
            state = member.background.copy()
            state[:n_assim] = analysis[:, col]
            member.state = state
            member.status = UNASSIGNED
            member.runner = None
            member.received = set()

        finished_cycle = self.cycle
        self.cycle += 1
        self.cycle_busy_ms = {}
        if self.cycle >= self.config.cycles:
            self.write_snapshot_to(self.config.ensemble_out, final=True)
            self.metrics.emit("cycle_done", cycle=finished_cycle)
            self.transport.send_launcher(protocol.CycleDone(finished_cycle))
            self._finish(exit_code=0)
            return
        self.write_snapshot_to(self.checkpoint_path())
        self.metrics.emit("cycle_done", cycle=finished_cycle)
        self.transport.send_launcher(protocol.CycleDone(finished_cycle))
        self.phase_start = self.now()
        for rid, mid in self.scheduler.enqueue(sorted(self.members)):
            self._send_assignment(self.runners[rid], mid)

    def _finish(self, exit_code: int) -> None:
        self.done = True
        self.metrics.emit("study_done", cycles=self.cycle, members=len(self.members))
        # inform the launcher before the runners so it never mistakes their
        # clean STOP exits for crashes
        self.transport.send_launcher(protocol.StudyDone())
        for runner in list(self.runners.values()):
            for conn_id in runner.conns.values():
                self.transport.send(conn_id, protocol.Stop())
        self.transport.study_finished(exit_code)

    # ------------------------------------------------------------- checkpoint

    def checkpoint_path(self) -> Path:
        return Path(self.config.checkpoint_dir) / "checkpoint.bin"

    def write_snapshot_to(self, path, final: bool = False) -> None:
        # the final artifact zeroes restart counts: the ensemble an elastic,
        # fault-injected run produces hashes identically to a quiet run's
        counts = (
            {}
            if final
            else {m.member_id: m.restart_count for m in self.members.values()}
        )
        snapshot = EnsembleSnapshot(
            cycle=self.cycle,
            seed=self.config.seed,
            config_hash=self.config.semantic_hash(),
            n_dynamic=self.layout.n_dynamic,
            n_assimilated=self.layout.n_assimilated,
            members=[
                DynamicState(member_id=m.member_id, values=m.state)
                for m in self.members.values()
            ],
            restart_counts=counts,
        )
        write_snapshot(snapshot, path)

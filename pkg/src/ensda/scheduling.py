"""Greedy list scheduling: first come first served member distribution.

The same queue object drives both the live server and the offline
simulator, so simulated and measured assignment sequences coincide when
the ready events arrive in the same order. The makespan of this greedy
policy is at most (2 - 1/m) times the optimal for m runners.
"""

import heapq
from collections import deque
from dataclasses import dataclass


class ListScheduler:
    """FIFO member queue plus FIFO idle-runner bookkeeping."""

    def __init__(self, member_ids=()):
        self.queue = deque(member_ids)
        self.idle = deque()
        self.assigned = {}  # runner_id -> member_id

    def runner_ready(self, runner_id):
        """Mark a runner idle; return the member it should propagate, if any."""
        self.assigned.pop(runner_id, None)
        if self.queue:
            member = self.queue.popleft()
            self.assigned[runner_id] = member
            return member
        if runner_id not in self.idle:
            self.idle.append(runner_id)
        return None

    def enqueue(self, member_ids):
        """Append members (cycle start order) and hand them to idle runners.

        Returns the (runner_id, member_id) assignments made, in order.
        """
        self.queue.extend(member_ids)
        return self._drain()

    def requeue_front(self, member_id):
        """Put a failed member at the queue head and reassign if possible."""
        self.queue.appendleft(member_id)
        return self._drain()

    def remove_runner(self, runner_id):
        self.assigned.pop(runner_id, None)
        try:
            self.idle.remove(runner_id)
        except ValueError:
            pass

    def remove_member(self, member_id):
        try:
            self.queue.remove(member_id)
        except ValueError:
            pass

    def _drain(self):
        made = []
        while self.queue and self.idle:
            runner = self.idle.popleft()
            member = self.queue.popleft()
            self.assigned[runner] = member
            made.append((runner, member))
        return made


@dataclass
class ScheduledTask:
    member: int
    runner: int
    start: float
    end: float


@dataclass
class ScheduleResult:
    makespan: float
    tasks: list[ScheduledTask]
    runners: int

    @property
    def busy_time(self) -> float:
        return sum(t.end - t.start for t in self.tasks)

    @property
    def idle_fraction(self) -> float:
        if self.makespan <= 0:
            return 0.0
        return 1.0 - self.busy_time / (self.runners * self.makespan)

    def per_runner(self) -> dict[int, list[ScheduledTask]]:
        out = {r: [] for r in range(self.runners)}
        for t in self.tasks:
            out[t.runner].append(t)
        return out


def simulate_schedule(durations, runners: int) -> ScheduleResult:
    """Pure list-scheduling simulation of one propagation phase.

    Members are queued in the given order; all runners are idle at t=0 and
    become ready again when their current member finishes (ties broken by
    runner id). Returns the makespan and per-runner timeline.
    """
    durations = [float(d) for d in durations]
    if any(d < 0 for d in durations):
        raise ValueError("durations must be non-negative")
    if runners < 1:
        raise ValueError("need at least one runner")
    sched = ListScheduler(range(len(durations)))
    tasks = []
    # (ready_time, runner_id) orders the ready events; initial order is by id.
    ready = [(0.0, r) for r in range(runners)]
    heapq.heapify(ready)
    makespan = 0.0
    while ready:
        now, runner = heapq.heappop(ready)
        member = sched.runner_ready(runner)
        if member is None:
            continue
        end = now + durations[member]
        tasks.append(ScheduledTask(member=member, runner=runner, start=now, end=end))
        makespan = max(makespan, end)
        heapq.heappush(ready, (end, runner))
    return ScheduleResult(makespan=makespan, tasks=tasks, runners=runners)


def optimal_makespan(durations, runners: int) -> float:
    """Exact minimal makespan by exhaustive enumeration (small instances).

    Enumerates every partition of the task set over the runners via subset
    masks; intended for property tests only.
    """
    durations = [float(d) for d in durations]
    n = len(durations)
    if runners < 1:
        raise ValueError("need at least one runner")
    if n == 0:
        return 0.0
    if runners == 1 or n == 1:
        return sum(durations) if runners == 1 else max(durations)
    subset_sum = [0.0] * (1 << n)
    for mask in range(1, 1 << n):
        low = mask & -mask
        subset_sum[mask] = subset_sum[mask ^ low] + durations[low.bit_length() - 1]

    best = {}

    def solve(mask: int, machines: int) -> float:
        if machines == 1:
            return subset_sum[mask]
        key = (mask, machines)
        if key in best:
            return best[key]
        result = subset_sum[mask]  # everything on one machine is always feasible
        # iterate non-empty proper submasks for the first machine
        sub = (mask - 1) & mask
        while sub:
            cand = max(subset_sum[mask ^ sub], solve(sub, machines - 1))
            if cand < result:
                result = cand
            sub = (sub - 1) & mask
        best[key] = result
        return result

    return solve((1 << n) - 1, runners)

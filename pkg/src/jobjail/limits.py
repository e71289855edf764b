"""Memory limit backends, the polling watchdog, and CPU affinity.

Four memory backends exist:

* ``group-controller``: a memory cgroup holding the whole jail; the kernel
  charges every page and OOM-kills inside the group at the limit.
* ``data-segment``: ``RLIMIT_DATA`` set in the job before exec.  Heap and
  private writable mappings fail with ENOMEM past the limit.  The limit is
  per process, so a multi-process job can exceed it in aggregate.
* ``polling``: a watchdog sums RSS over every jail member each interval and
  terminates the jail once the sum is above the limit.  Anything allocated
  between two polls gets through.
* ``resident-set-legacy``: ``RLIMIT_RSS``.  Linux ignores it; the backend
  exists to show that, and flags itself ineffective as soon as it is applied.
"""
from __future__ import annotations

import enum
import os
import queue
import resource
import threading
import time
from dataclasses import dataclass, field
from typing import Iterable

from jobjail.cgroup import CgroupNode, find_memory_root
from jobjail.envctl import ThreadLimitSpec
from jobjail.errors import InvalidCpuSet
from jobjail.proctable import ProcessTable


class MemBackend(str, enum.Enum):
    GROUP_CONTROLLER = "group-controller"
    DATA_SEGMENT = "data-segment"
    POLLING = "polling"
    RESIDENT_SET_LEGACY = "resident-set-legacy"


class Action(str, enum.Enum):
    NONE = "none"
    BLOCKED_AT_SOURCE = "blocked-at-source"
    KILLED_JAIL = "killed-jail"
    FLAGGED_INEFFECTIVE = "flagged-ineffective"


_ALLOWED_ACTIONS = {
    Action.KILLED_JAIL: {MemBackend.POLLING, MemBackend.GROUP_CONTROLLER},
    Action.BLOCKED_AT_SOURCE: {MemBackend.DATA_SEGMENT},
}

DEFAULT_POLL_INTERVAL = 1.0


@dataclass(frozen=True)
class LimitPolicy:
    mem_limit_bytes: int | None = None
    mem_backend: MemBackend = MemBackend.GROUP_CONTROLLER
    poll_interval: float = DEFAULT_POLL_INTERVAL
    cpuset: frozenset[int] | None = None
    thread_env: ThreadLimitSpec = field(default_factory=ThreadLimitSpec)

    def __post_init__(self):
        if self.mem_limit_bytes is not None and self.mem_limit_bytes <= 0:
            raise ValueError("mem_limit_bytes must be > 0")
        if self.poll_interval <= 0:
            raise ValueError("poll_interval must be > 0")
        if self.cpuset is not None and not self.cpuset:
            raise ValueError("cpuset must not be empty")


@dataclass(frozen=True)
class EnforcementEvent:
    at: float  # wall clock, seconds since the epoch
    backend: MemBackend
    observed_bytes: int
    limit_bytes: int
    action: Action
    affected_pids: tuple[int, ...] = ()
    note: str = ""

    def __post_init__(self):
        allowed = _ALLOWED_ACTIONS.get(self.action)
        if allowed is not None and self.backend not in allowed:
            raise ValueError(f"action {self.action.value} is not possible with {self.backend.value}")

    def to_dict(self) -> dict:
        return {
            "at": round(self.at, 3),
            "backend": self.backend.value,
            "observed_bytes": self.observed_bytes,
            "limit_bytes": self.limit_bytes,
            "action": self.action.value,
            "affected_pids": list(self.affected_pids),
            "note": self.note,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "EnforcementEvent":
        return cls(d["at"], MemBackend(d["backend"]), d["observed_bytes"], d["limit_bytes"],
                   Action(d["action"]), tuple(d.get("affected_pids", ())), d.get("note", ""))


@dataclass(frozen=True)
class PollDecision:
    exceeded: bool
    observed: int
    pids: tuple[int, ...] = ()


def poll_enforce(table: ProcessTable, limit_bytes: int) -> PollDecision:
    """Compare the RSS summed over every live record against the limit.

    The table is a membership snapshot, so the sum covers the whole process
    hierarchy whatever its depth.  Zombies hold no memory and are skipped.
    """
    observed = 0
    pids = []
    for rec in table:
        if rec.alive:
            observed += rec.rss_bytes
            pids.append(rec.pid)
    if observed > limit_bytes:
        return PollDecision(True, observed, tuple(sorted(pids)))
    return PollDecision(False, observed)


def host_cpus() -> frozenset[int]:
    try:
        return frozenset(os.sched_getaffinity(0))
    except AttributeError:
        return frozenset(range(os.cpu_count() or 1))


def validate_cpuset(cpuset: Iterable[int], available: Iterable[int] | None = None) -> frozenset[int]:
    cpus = frozenset(cpuset)
    available = host_cpus() if available is None else frozenset(available)
    if not cpus:
        raise InvalidCpuSet("empty cpuset")
    bad = sorted(cpus - available)
    if bad:
        raise InvalidCpuSet(f"cpu id(s) {bad} not available on this host (have {sorted(available)})")
    return cpus


def apply_cpu_affinity(jail, cpuset: Iterable[int]) -> None:
    """Pin the jail to ``cpuset``; applied at spawn so descendants inherit it."""
    jail.launch.cpuset = validate_cpuset(cpuset)


class EnforcementHandle:
    """Live state of one memory backend for one jail."""

    def __init__(self, jail, policy: LimitPolicy, node: CgroupNode | None = None):
        self.jail = jail
        self.policy = policy
        self.backend = policy.mem_backend
        self.limit = policy.mem_limit_bytes
        self.node = node
        self.events: list[EnforcementEvent] = []
        self.max_observed = 0
        self._stop = threading.Event()
        self._thread: threading.Thread | None = None
        self._lock = threading.Lock()
        self.triggered = False

    def _emit(self, event: EnforcementEvent) -> EnforcementEvent:
        with self._lock:
            self.events.append(event)
        return event

    # polling watchdog -------------------------------------------------
    def start_watchdog(self, inspector, outbox: "queue.Queue | None" = None) -> None:
        """Start the polling task; exceedances are posted to ``outbox``."""
        if self.backend is not MemBackend.POLLING or self.limit is None:
            return
        self._thread = threading.Thread(target=self._watch, args=(inspector, outbox),
                                        name="jobjail-watchdog", daemon=True)
        self._thread.start()

    def _watch(self, inspector, outbox) -> None:
        while not self._stop.wait(self.policy.poll_interval):
            table = self.jail.members(inspector)
            decision = self.check(table)
            if decision is not None:
                if outbox is not None:
                    outbox.put(("enforce", decision))
                return

    def check(self, table: ProcessTable) -> EnforcementEvent | None:
        """One watchdog tick on a membership snapshot."""
        decision = poll_enforce(table, self.limit)
        self.max_observed = max(self.max_observed, decision.observed)
        if decision.exceeded and not self.triggered:
            self.triggered = True
            return self._emit(EnforcementEvent(time.time(), self.backend, decision.observed,
                                               self.limit, Action.KILLED_JAIL, decision.pids,
                                               "RSS sum over all jail members above limit"))
        return None

    def stop(self) -> None:
        self._stop.set()
        if self._thread is not None and self._thread is not threading.current_thread():
            self._thread.join(timeout=5)

    # end of job -------------------------------------------------------
    def finalize(self, job_status: int | None, job_pid: int | None = None,
                 peak_rss: int = 0) -> list[EnforcementEvent]:
        """Emit the closing event for this backend once the job has ended."""
        self.stop()
        if self.limit is None:
            return list(self.events)
        now = time.time()
        affected = (job_pid,) if job_pid else ()
        if self.backend is MemBackend.DATA_SEGMENT:
            if job_status not in (0, None):
                self._emit(EnforcementEvent(now, self.backend, peak_rss, self.limit,
                                            Action.BLOCKED_AT_SOURCE, affected,
                                            f"job ended with status {job_status} under RLIMIT_DATA"))
            else:
                self._emit(EnforcementEvent(now, self.backend, peak_rss, self.limit, Action.NONE))
        elif self.backend is MemBackend.GROUP_CONTROLLER and self.node is not None:
            peak = self.node.peak() or peak_rss
            if self.node.oom_kills():
                self._emit(EnforcementEvent(now, self.backend, peak, self.limit, Action.KILLED_JAIL,
                                            affected, "kernel OOM kill inside the memory cgroup"))
            else:
                self._emit(EnforcementEvent(now, self.backend, peak, self.limit, Action.NONE,
                                            note="charged peak from the memory cgroup"))
        elif self.backend is MemBackend.POLLING and not self.triggered:
            self._emit(EnforcementEvent(now, self.backend, max(self.max_observed, peak_rss),
                                        self.limit, Action.NONE))
        return list(self.events)

    def charged_peak(self) -> int | None:
        return self.node.peak() if self.node is not None else None

    def cleanup(self) -> bool:
        self.stop()
        if self.node is None:
            return True
        self.node.kill_all()
        return self.node.remove()


def apply_memory_limit(jail, policy: LimitPolicy) -> EnforcementHandle:
    """Install ``policy``'s memory backend on a jail that has not spawned yet.

    Raises BackendUnsupported when the group controller is unavailable.
    """
    limit = policy.mem_limit_bytes
    if limit is None:
        return EnforcementHandle(jail, policy)
    backend = policy.mem_backend
    if backend is MemBackend.GROUP_CONTROLLER:
        node = CgroupNode.create(find_memory_root(), jail.jail_id, limit)
        jail.launch.cgroup_procs = node.procs_file
        return EnforcementHandle(jail, policy, node)
    handle = EnforcementHandle(jail, policy)
    if backend is MemBackend.DATA_SEGMENT:
        jail.launch.rlimits.append((resource.RLIMIT_DATA, limit))
    elif backend is MemBackend.RESIDENT_SET_LEGACY:
        jail.launch.rlimits.append((resource.RLIMIT_RSS, limit))
        handle._emit(EnforcementEvent(time.time(), backend, 0, limit, Action.FLAGGED_INEFFECTIVE,
                                      note="RLIMIT_RSS is not enforced by Linux since 2.4"))
    return handle

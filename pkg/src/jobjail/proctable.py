"""Process-table snapshots and the inspectors that produce them.

Two inspectors ship: :class:`ProcfsInspector` reads the live ``/proc``
filesystem, :class:`SimulatedInspector` plays back a scripted scenario so
telemetry and membership logic can be tested without real processes.
"""
from __future__ import annotations

import enum
import os
import time
from dataclasses import dataclass, field
from typing import Iterable, Mapping, Protocol

from jobjail.errors import PartialSnapshotError


class ProcState(str, enum.Enum):
    RUNNING = "running"
    SLEEPING = "sleeping"
    ZOMBIE = "zombie"
    STOPPED = "stopped"

    @classmethod
    def from_code(cls, code: str) -> "ProcState":
        code = code.strip()
        if code in _STATE_CODES:
            return _STATE_CODES[code]
        return cls(code.lower())


_STATE_CODES = {
    "R": ProcState.RUNNING,
    "S": ProcState.SLEEPING,
    "D": ProcState.SLEEPING,
    "I": ProcState.SLEEPING,
    "W": ProcState.SLEEPING,
    "P": ProcState.SLEEPING,
    "Z": ProcState.ZOMBIE,
    "X": ProcState.ZOMBIE,
    "x": ProcState.ZOMBIE,
    "T": ProcState.STOPPED,
    "t": ProcState.STOPPED,
}


@dataclass(frozen=True)
class ProcessRecord:
    pid: int
    ppid: int
    pgid: int
    owner_uid: int
    state: ProcState
    thread_count: int
    cpu_id: int
    cpu_time: float  # seconds, user + system
    rss_bytes: int
    start_time: float  # seconds since boot
    comm: str
    sid: int = 0
    pidns: int | None = None

    def __post_init__(self):
        if self.thread_count < 1 and self.state is not ProcState.ZOMBIE:
            raise ValueError(f"pid {self.pid}: thread_count < 1 for a live process")

    @property
    def alive(self) -> bool:
        return self.state is not ProcState.ZOMBIE

    @property
    def key(self) -> tuple[int, float]:
        """Identity that survives pid reuse."""
        return (self.pid, self.start_time)


@dataclass(frozen=True)
class ProcessTable:
    taken_at: float
    records: Mapping[int, ProcessRecord] = field(default_factory=dict)
    degraded: bool = False

    @classmethod
    def of(cls, records: Iterable[ProcessRecord], taken_at: float | None = None,
           degraded: bool = False) -> "ProcessTable":
        by_pid: dict[int, ProcessRecord] = {}
        for rec in records:
            if rec.pid in by_pid:
                raise ValueError(f"duplicate pid {rec.pid} in process table")
            by_pid[rec.pid] = rec
        return cls(time.monotonic() if taken_at is None else taken_at, by_pid, degraded)

    def __len__(self) -> int:
        return len(self.records)

    def __iter__(self):
        return iter(self.records.values())

    def __contains__(self, pid) -> bool:
        return pid in self.records

    def get(self, pid: int) -> ProcessRecord | None:
        return self.records.get(pid)

    @property
    def pids(self) -> frozenset[int]:
        return frozenset(self.records)

    def subset(self, pids: Iterable[int]) -> "ProcessTable":
        return ProcessTable(self.taken_at, {p: self.records[p] for p in pids if p in self.records},
                            self.degraded)

    def live(self) -> "ProcessTable":
        return self.subset(p for p, r in self.records.items() if r.alive)

    def children_of(self, pid: int) -> list[ProcessRecord]:
        return [r for r in self.records.values() if r.ppid == pid]

    def is_closed(self) -> bool:
        """True when every ppid is 0, 1 or a pid of this table."""
        return all(r.ppid in (0, 1) or r.ppid in self.records for r in self.records.values())


class ProcessInspector(Protocol):
    def read_table(self) -> ProcessTable: ...

    def host_cpu_count(self) -> int: ...


_CLK_TCK = os.sysconf("SC_CLK_TCK") if hasattr(os, "sysconf") else 100
_PAGE = os.sysconf("SC_PAGE_SIZE") if hasattr(os, "sysconf") else 4096


def parse_stat(pid: int, text: str, uid: int = 0, pidns: int | None = None) -> ProcessRecord:
    """Build a record from the contents of ``/proc/<pid>/stat``."""
    lpar = text.index("(")
    rpar = text.rindex(")")
    comm = text[lpar + 1 : rpar]
    f = text[rpar + 2 :].split()
    state = ProcState.from_code(f[0])
    threads = int(f[17])
    if state is not ProcState.ZOMBIE:
        threads = max(threads, 1)
    return ProcessRecord(
        pid=pid,
        ppid=int(f[1]),
        pgid=int(f[2]),
        sid=int(f[3]),
        owner_uid=uid,
        state=state,
        thread_count=threads,
        cpu_time=(int(f[11]) + int(f[12])) / _CLK_TCK,
        start_time=int(f[19]) / _CLK_TCK,
        rss_bytes=max(int(f[21]), 0) * _PAGE,
        cpu_id=int(f[36]),
        comm=comm,
        pidns=pidns,
    )


class ProcfsInspector:
    """Reads the live process table from ``/proc``."""

    def __init__(self, proc_root: str = "/proc", strict: bool = False):
        self.proc_root = proc_root
        self.strict = strict

    def host_cpu_count(self) -> int:
        return os.cpu_count() or 1

    def read_record(self, pid: int) -> ProcessRecord | None:
        base = f"{self.proc_root}/{pid}"
        try:
            with open(f"{base}/stat") as fh:
                text = fh.read()
            uid = os.stat(base).st_uid
        except (FileNotFoundError, ProcessLookupError):
            return None
        try:
            ns = os.readlink(f"{base}/ns/pid")
            pidns = int(ns[ns.index("[") + 1 : -1])
        except OSError:
            pidns = None
        return parse_stat(pid, text, uid, pidns)

    def read_table(self) -> ProcessTable:
        taken_at = time.monotonic()
        records = []
        failures = []
        for name in os.listdir(self.proc_root):
            if not name.isdigit():
                continue
            try:
                rec = self.read_record(int(name))
            except (OSError, ValueError, IndexError) as exc:
                failures.append((int(name), exc))
                continue
            if rec is not None:
                records.append(rec)
        table = ProcessTable.of(records, taken_at, degraded=bool(failures))
        if failures and self.strict:
            raise PartialSnapshotError(f"{len(failures)} process entries unreadable", table)
        return table


@dataclass(frozen=True)
class ScenarioRow:
    tick: int
    pid: int
    ppid: int
    pgid: int
    state: ProcState
    threads: int
    cpu_id: int
    cpu_time_ms: int
    rss: int


def parse_scenario(text: str) -> list[ScenarioRow]:
    """Parse ``tick;pid,ppid,pgid,state,threads,cpu_id,cpu_time_ms,rss`` lines."""
    rows = []
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        try:
            tick, rest = line.split(";", 1)
            pid, ppid, pgid, state, threads, cpu_id, cpu_ms, rss = (s.strip() for s in rest.split(","))
            rows.append(ScenarioRow(int(tick), int(pid), int(ppid), int(pgid),
                                    ProcState.from_code(state), int(threads), int(cpu_id),
                                    int(cpu_ms), int(rss)))
        except ValueError as exc:
            raise ValueError(f"scenario line {lineno}: {raw!r}: {exc}") from None
    return rows


class SimulatedInspector:
    """Plays back a scenario one tick per :meth:`read_table` call.

    After the last tick the final snapshot keeps being returned, with
    ``exhausted`` set.
    """

    def __init__(self, rows: Iterable[ScenarioRow], tick_seconds: float = 0.5,
                 cpu_count: int | None = None):
        self.tick_seconds = tick_seconds
        ticks: dict[int, list[ScenarioRow]] = {}
        for row in rows:
            ticks.setdefault(row.tick, []).append(row)
        self._ticks = sorted(ticks.items())
        max_cpu = max((r.cpu_id for _, rs in self._ticks for r in rs), default=0)
        self._cpus = cpu_count if cpu_count is not None else max_cpu + 1
        self._first_seen: dict[int, int] = {}
        for tick, rs in self._ticks:
            for r in rs:
                self._first_seen.setdefault(r.pid, tick)
        self._pos = 0
        self.exhausted = not self._ticks

    @classmethod
    def from_file(cls, path, **kw) -> "SimulatedInspector":
        with open(path) as fh:
            return cls(parse_scenario(fh.read()), **kw)

    @classmethod
    def from_text(cls, text: str, **kw) -> "SimulatedInspector":
        return cls(parse_scenario(text), **kw)

    def host_cpu_count(self) -> int:
        return self._cpus

    def read_table(self) -> ProcessTable:
        if not self._ticks:
            return ProcessTable.of([], 0.0)
        idx = min(self._pos, len(self._ticks) - 1)
        self._pos += 1
        if self._pos >= len(self._ticks):
            self.exhausted = True
        tick, rows = self._ticks[idx]
        records = [
            ProcessRecord(
                pid=r.pid, ppid=r.ppid, pgid=r.pgid, owner_uid=0, state=r.state,
                thread_count=r.threads, cpu_id=r.cpu_id, cpu_time=r.cpu_time_ms / 1000.0,
                rss_bytes=r.rss, start_time=self._first_seen[r.pid] * self.tick_seconds,
                comm="sim", sid=r.pgid,
            )
            for r in rows
        ]
        return ProcessTable.of(records, tick * self.tick_seconds)

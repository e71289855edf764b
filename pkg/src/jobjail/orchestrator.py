"""Run lifecycle: jail + limits + environment + telemetry for one job.

The control loop in :func:`run` owns all mutable run state.  The sampler,
the memory watchdog and the job waiter are threads that only post messages
(immutable process tables, enforcement events, the exit status) to one
queue.
"""
from __future__ import annotations

import logging
import os
import queue
import signal
import threading
import time
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Mapping, Sequence

from jobjail import cgroup
from jobjail.envctl import job_environment, merge_overlay, thread_env
from jobjail.errors import BackendUnsupported, PartialSnapshotError, ReportWriteError
from jobjail.jail import (IsolationBackend, Jail, MembershipTracker, TerminationReport,
                          create_jail, default_backend)
from jobjail.limits import (EnforcementEvent, LimitPolicy, MemBackend, apply_cpu_affinity,
                            apply_memory_limit, validate_cpuset)
from jobjail.proctable import ProcessInspector, ProcessRecord, ProcessTable, ProcfsInspector
from jobjail.telemetry import DEFAULT_SAMPLE_INTERVAL, MockAccelerator, Report, Sample, Sampler, export, summarize
from jobjail.units import format_cpuset

log = logging.getLogger(__name__)

DEFAULT_GRACE = 30.0

# exit codes
EXIT_OK = 0
EXIT_USAGE = 64
EXIT_UNSUPPORTED = 69
EXIT_CONTAINMENT = 70
EXIT_REPORT_WRITE = 74
EXIT_SIGNAL_BASE = 128


@dataclass(frozen=True)
class TelemetryConfig:
    enabled: bool = True
    interval: float = DEFAULT_SAMPLE_INTERVAL
    output: Path | None = None
    format: str = "json"
    plot: bool = True
    accel_mock: Path | None = None

    def __post_init__(self):
        if self.enabled and self.interval <= 0:
            raise ValueError("sample interval must be > 0")
        if self.format not in ("json", "csv"):
            raise ValueError(f"unknown report format {self.format!r}")


@dataclass(frozen=True)
class JobSpec:
    command: tuple[str, ...]
    workdir: str | None = None
    env_overlay: Mapping[str, str] = field(default_factory=dict)
    backend: IsolationBackend | None = None  # None: strongest the host allows
    limits: LimitPolicy = field(default_factory=LimitPolicy)
    grace: float = DEFAULT_GRACE
    telemetry: TelemetryConfig = field(default_factory=TelemetryConfig)
    report_path: Path | None = None
    walltime: float | None = None
    escape_action: str = "kill"
    mem_fallback: bool = False  # group controller unavailable: use polling instead

    def __post_init__(self):
        if not self.command:
            raise ValueError("command must have at least one element")
        if self.grace < 0:
            raise ValueError("grace must be >= 0")
        if self.walltime is not None and self.walltime <= 0:
            raise ValueError("walltime must be > 0")
        if self.escape_action not in ("kill", "report"):
            raise ValueError(f"unknown escape action {self.escape_action!r}")


@dataclass
class RunOutcome:
    job_exit: int | None  # exit code, or -N when killed by signal N
    termination: TerminationReport
    enforcement_events: list[EnforcementEvent]
    report: Report
    exit_code: int
    contained: bool
    jail_id: str
    backend: IsolationBackend
    job_pid: int
    series: list[Sample] = field(default_factory=list)
    escapees: list[ProcessRecord] = field(default_factory=list)
    files: list[Path] = field(default_factory=list)
    stop_reason: str = "exit"
    notes: list[str] = field(default_factory=list)


def exit_code(job_status: int | None, contained: bool) -> int:
    """Map (job status, containment result) to the supervisor's exit code.

    Containment failure wins over anything the job did.  Otherwise the job's
    own code is passed through, and death by signal N becomes 128 + N.  A
    job whose status never became known counts as killed by SIGKILL.
    """
    if not contained:
        return EXIT_CONTAINMENT
    if job_status is None:
        return EXIT_SIGNAL_BASE + signal.SIGKILL
    if job_status < 0:
        return EXIT_SIGNAL_BASE + (-job_status)
    return job_status


def _sampler_loop(inspector: ProcessInspector, interval: float, outbox: queue.Queue,
                  stop: threading.Event) -> None:
    while True:
        outbox.put(("table", _read(inspector)))
        if stop.wait(interval):
            return


def _read(inspector: ProcessInspector) -> ProcessTable:
    try:
        return inspector.read_table()
    except PartialSnapshotError as exc:
        table = exc.table if exc.table is not None else ProcessTable.of([], time.monotonic())
        return ProcessTable(table.taken_at, table.records, True)


def _waiter(jail: Jail, outbox: queue.Queue) -> None:
    outbox.put(("exit", jail.wait_job()))


def _kill_escapees(escapees: Sequence[ProcessRecord]) -> None:
    for rec in escapees:
        try:
            os.kill(rec.pid, signal.SIGKILL)
        except (ProcessLookupError, PermissionError):
            pass


def _still_alive(records: Sequence[ProcessRecord], table: ProcessTable) -> list[ProcessRecord]:
    out = []
    for rec in records:
        now = table.get(rec.pid)
        if now is not None and now.start_time == rec.start_time and now.alive:
            out.append(now)
    return out


def _meta(spec: JobSpec, jail: Jail, policy: LimitPolicy) -> dict:
    return {
        "jail_id": jail.jail_id,
        "backend": jail.backend.value,
        "cpuset": format_cpuset(policy.cpuset) if policy.cpuset else None,
        "limits": {
            "mem_limit_bytes": policy.mem_limit_bytes,
            "mem_backend": policy.mem_backend.value,
            "poll_interval": policy.poll_interval,
        },
        "command": list(spec.command),
    }


def _install_memory_limit(jail: Jail, spec: JobSpec, notes: list[str]):
    policy = spec.limits
    try:
        return apply_memory_limit(jail, policy), policy
    except BackendUnsupported as exc:
        if not (spec.mem_fallback and policy.mem_backend is MemBackend.GROUP_CONTROLLER):
            raise
        policy = replace(policy, mem_backend=MemBackend.POLLING)
        notes.append(f"memory cgroup unavailable ({exc}); fell back to polling")
        log.warning("%s", notes[-1])
        return apply_memory_limit(jail, policy), policy


def run(spec: JobSpec, inspector: ProcessInspector | None = None,
        stop_event: threading.Event | None = None) -> RunOutcome:
    """Launch ``spec`` in a fresh jail, supervise it, tear everything down.

    Raises BackendUnsupported before anything is spawned, SpawnError when
    the command cannot start, and ReportWriteError after the jail is fully
    cleaned up when the report could not be written.
    """
    inspector = inspector or ProcfsInspector()
    stop_event = stop_event or threading.Event()
    notes: list[str] = []

    jail = create_jail(spec.backend or default_backend())
    if spec.limits.cpuset is not None:
        apply_cpu_affinity(jail, validate_cpuset(spec.limits.cpuset))
    enforcement, policy = _install_memory_limit(jail, spec, notes)

    overlay = merge_overlay(thread_env(policy.thread_env), spec.env_overlay)
    env = job_environment(os.environ, overlay)
    try:
        job_pid = jail.spawn(list(spec.command), env, spec.workdir)
    except BaseException:
        jail.close()
        enforcement.cleanup()
        raise
    started = time.monotonic()
    handle = jail.handle

    accel = MockAccelerator.from_file(spec.telemetry.accel_mock) if spec.telemetry.accel_mock else None
    sampler = Sampler(inspector, handle, accel=accel)
    tracker = MembershipTracker(handle)
    inbox: queue.Queue = queue.Queue()
    stop_sampling = threading.Event()
    interval = spec.telemetry.interval if spec.telemetry.enabled else max(policy.poll_interval, 0.5)
    threads = [
        threading.Thread(target=_sampler_loop, args=(inspector, interval, inbox, stop_sampling),
                         name="jobjail-sampler", daemon=True),
        threading.Thread(target=_waiter, args=(jail, inbox), name="jobjail-waiter", daemon=True),
    ]
    for t in threads:
        t.start()
    enforcement.start_watchdog(ProcfsInspector(), inbox)

    escapees: dict[tuple[int, float], ProcessRecord] = {}
    stop_reason = "exit"
    ended_at = None

    def take(table: ProcessTable) -> None:
        members, escaped = tracker.observe(table)
        if spec.telemetry.enabled:
            sampler.observe(members)
        fresh = [r for r in escaped if r.key not in escapees]
        for rec in fresh:
            escapees[rec.key] = rec
            log.warning("escapee pid %d (%s) left jail %s", rec.pid, rec.comm, jail.jail_id)
        if fresh and spec.escape_action == "kill":
            _kill_escapees(fresh)

    try:
        while True:
            if spec.walltime is not None and time.monotonic() - started > spec.walltime:
                stop_reason = "walltime"
                break
            if stop_event.is_set():
                stop_reason = "signal"
                break
            try:
                kind, payload = inbox.get(timeout=0.05)
            except queue.Empty:
                continue
            if kind == "table":
                take(payload)
            elif kind == "enforce":
                log.warning("memory limit exceeded: %d > %d bytes", payload.observed_bytes,
                            payload.limit_bytes)
                stop_reason = "memory"
                break
            elif kind == "exit":
                ended_at = time.monotonic()
                break
        stop_sampling.set()
        threads[0].join(timeout=5)
        # drain what the sampler already posted, then one last look
        while True:
            try:
                kind, payload = inbox.get_nowait()
            except queue.Empty:
                break
            if kind == "table":
                take(payload)
        take(_read(inspector))
    finally:
        stop_sampling.set()
        enforcement.stop()
        termination = jail.terminate(spec.grace, inspector, extra=list(escapees.values()))

    job_status = jail.wait_job(timeout=10)
    if ended_at is None:
        ended_at = time.monotonic()
    series = list(sampler.series)
    peak_rss = max((s.rss_total_bytes for s in series), default=0)
    events = enforcement.finalize(job_status, handle.job_pid, peak_rss)
    if not enforcement.cleanup():
        notes.append("memory cgroup node could not be removed")

    leftover = _still_alive(list(escapees.values()), _read(inspector))
    contained = not termination.survivors and not leftover
    if spec.escape_action == "report" and leftover:
        notes.append(f"{len(leftover)} escapee(s) left running (escape action: report)")
    code = exit_code(job_status, contained)

    if not series:
        series = [Sample(0, 0, -1, 0.0, 0, 0, 0)]
    report = summarize(series, events, runtime=max(ended_at - started, 0.001),
                       escapee_count=len(escapees), job_exit=job_status,
                       termination=termination.to_dict())
    outcome = RunOutcome(job_status, termination, events, report, code, contained, jail.jail_id,
                         jail.backend, job_pid, series, list(escapees.values()), [], stop_reason, notes)

    target = spec.report_path or spec.telemetry.output
    if target is not None:
        meta = _meta(spec, jail, policy)
        meta.update(exit_code=code, stop_reason=stop_reason, notes=notes)
        outcome.files = export(series, report, spec.telemetry.format, target, meta)
        if spec.telemetry.plot:
            from jobjail.plotting import render_series

            png = Path(target).with_suffix(".png")
            try:
                outcome.files.append(render_series(series, png, title=" ".join(spec.command)[:80],
                                                   mem_limit=policy.mem_limit_bytes))
            except OSError as exc:
                raise ReportWriteError(f"cannot write plot {png}: {exc}") from exc
    return outcome


def residual_processes(jail_id: str | None = None, proc_root: str = "/proc") -> list[int]:
    """Live processes carrying a jail marker (of ``jail_id``, or any jail)."""
    from jobjail.jail import JAIL_ID_ENV

    prefix = f"{JAIL_ID_ENV}=".encode()
    out = []
    for name in os.listdir(proc_root):
        if not name.isdigit() or int(name) == os.getpid():
            continue
        try:
            with open(f"{proc_root}/{name}/environ", "rb") as fh:
                env = fh.read().split(b"\0")
            with open(f"{proc_root}/{name}/stat") as fh:
                state = fh.read().rpartition(")")[2].split()[0]
        except OSError:
            continue
        if state == "Z":
            continue
        marks = [v[len(prefix):].decode(errors="replace") for v in env if v.startswith(prefix)]
        if marks and (jail_id is None or jail_id in marks):
            out.append(int(name))
    return sorted(out)


def leftover_cgroups() -> list[Path]:
    try:
        return cgroup.leftover_nodes()
    except BackendUnsupported:
        return []

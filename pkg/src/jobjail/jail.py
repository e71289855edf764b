"""Containment domains for a job and everything it starts.

Membership is decided by backend identity, never by walking ppid chains
upward from a process: a process-group jail owns every process carrying its
pgid, a PID-namespace jail owns every process in its namespace, and a
subreaper jail owns the subtree below its helper (orphans there are
re-parented to the helper, so that subtree cannot lose members to pid 1).
"""
from __future__ import annotations

import enum
import functools
import os
import signal
import subprocess
import sys
import threading
import time
import uuid
from dataclasses import dataclass, field
from typing import Iterable, Mapping

from jobjail import _sys
from jobjail.errors import BackendUnsupported, SpawnError
from jobjail.proctable import ProcessInspector, ProcessRecord, ProcessTable, ProcfsInspector, ProcState

JAIL_ID_ENV = "JOBJAIL_JAIL_ID"
SETTLE_SECONDS = 0.5
# variables the helper's interpreter may add at startup (C locale coercion)
_INTERPRETER_ADDED_ENV = ("LC_CTYPE",)
_HELPER = os.path.join(os.path.dirname(os.path.abspath(__file__)), "_helper.py")


class IsolationBackend(str, enum.Enum):
    PROCESS_GROUP = "process-group"
    SUBREAPER = "subreaper"
    PID_NAMESPACE = "pid-namespace"


class Classification(str, enum.Enum):
    NORMAL = "normal"
    ZOMBIE = "zombie"
    ORPHAN = "orphan"
    DAEMON_LIKE = "daemon-like"


@dataclass(frozen=True)
class JailHandle:
    jail_id: str
    root_pid: int
    backend: IsolationBackend
    pgid: int
    ns_token: int | None
    created_at: float
    job_pid: int
    infra_pids: tuple[int, ...] = ()

    def __post_init__(self):
        if self.root_pid <= 1:
            raise ValueError("root_pid must be > 1")
        if self.backend is IsolationBackend.PROCESS_GROUP and self.pgid != self.root_pid:
            raise ValueError("process-group jail must be led by its root")


@dataclass(frozen=True)
class TerminationStep:
    pid: int
    signal: str  # "TERM" or "KILL"
    delivered: bool


@dataclass(frozen=True)
class TerminationReport:
    steps: tuple[TerminationStep, ...]
    escalated: bool
    survivors: tuple[int, ...]
    elapsed: float

    def to_dict(self) -> dict:
        return {
            "steps": [[s.pid, s.signal, s.delivered] for s in self.steps],
            "escalated": self.escalated,
            "survivors": list(self.survivors),
            "elapsed": round(self.elapsed, 3),
        }


@dataclass
class LaunchConfig:
    """Pre-exec settings installed by the limits module before spawn."""
    cpuset: frozenset[int] | None = None
    rlimits: list[tuple[int, int]] = field(default_factory=list)
    cgroup_procs: str | None = None


# ---------------------------------------------------------------------------
# host support

@functools.lru_cache(maxsize=None)
def pidns_supported() -> bool:
    """Try to create a PID namespace in a throwaway process."""
    if not sys.platform.startswith("linux"):
        return False
    code = (
        "import os,sys\n"
        f"sys.path.insert(0, {os.path.dirname(os.path.dirname(os.path.abspath(__file__)))!r})\n"
        "from jobjail import _sys\n"
        "_sys.unshare_pid_namespace()\n"
        "pid = os.fork()\n"
        "if pid == 0:\n"
        "    os._exit(0 if os.getpid() == 1 else 1)\n"
        "_, st = os.waitpid(pid, 0)\n"
        "sys.exit(os.waitstatus_to_exitcode(st))\n"
    )
    try:
        proc = subprocess.run([sys.executable, "-S", "-E", "-c", code], capture_output=True, timeout=20)
    except (OSError, subprocess.TimeoutExpired):
        return False
    return proc.returncode == 0


def subreaper_supported() -> bool:
    return sys.platform.startswith("linux")


def backend_supported(backend: IsolationBackend) -> bool:
    backend = IsolationBackend(backend)
    if backend is IsolationBackend.PID_NAMESPACE:
        return pidns_supported()
    if backend is IsolationBackend.SUBREAPER:
        return subreaper_supported()
    return hasattr(os, "killpg")


def default_backend() -> IsolationBackend:
    """Strongest containment the host allows."""
    for backend in (IsolationBackend.PID_NAMESPACE, IsolationBackend.SUBREAPER):
        if backend_supported(backend):
            return backend
    return IsolationBackend.PROCESS_GROUP


# ---------------------------------------------------------------------------
# membership, classification, escape detection (pure functions on tables)

def _descendants(table: ProcessTable, root: int) -> set[int]:
    children: dict[int, list[int]] = {}
    for rec in table:
        children.setdefault(rec.ppid, []).append(rec.pid)
    seen = {root} if root in table else set()
    stack = [root]
    while stack:
        for child in children.get(stack.pop(), ()):
            if child not in seen:
                seen.add(child)
                stack.append(child)
    return seen


def select_members(table: ProcessTable, handle: JailHandle) -> ProcessTable:
    """Records of ``table`` that belong to the jail by backend identity."""
    if handle.backend is IsolationBackend.PID_NAMESPACE:
        pids = [r.pid for r in table if handle.ns_token is not None and r.pidns == handle.ns_token]
    elif handle.backend is IsolationBackend.SUBREAPER:
        pids = _descendants(table, handle.root_pid)
    else:
        pids = [r.pid for r in table if r.pgid == handle.pgid]
    return table.subset(pids)


def classify(record: ProcessRecord, table: ProcessTable,
             history: Mapping[int, int] | None = None, reapers: Iterable[int] = (1,)) -> Classification:
    """Zombie / orphan / daemon-like / normal.

    ``history`` maps pid to the ppid it was first tracked with.  A live
    process now parented by pid 1 (or another reaper in ``reapers``) is an
    orphan when it was tracked under a different parent before, and
    daemon-like when it was never tracked: the two cannot be told apart
    from the table alone.
    """
    if record.pid not in table:
        raise ValueError(f"pid {record.pid} is not in the table")
    if record.state is ProcState.ZOMBIE:
        return Classification.ZOMBIE
    reapers = set(reapers)
    if record.ppid in reapers:
        earlier = (history or {}).get(record.pid)
        if earlier is not None and earlier != record.ppid:
            return Classification.ORPHAN
        if earlier is None and record.ppid == 1:
            return Classification.DAEMON_LIKE
    return Classification.NORMAL


def detect_escapees(table: ProcessTable, handle: JailHandle,
                    tracked: Iterable[tuple[int, float]]) -> list[ProcessRecord]:
    """Live processes of the tracked lineage that are no longer jail members.

    ``tracked`` holds ``(pid, start_time)`` keys from earlier membership
    snapshots.  Descendants of a tracked process or of an escapee count as
    lineage too, so a fork made after leaving the group is reported.
    """
    tracked = set(tracked)
    if not tracked:
        return []
    members = select_members(table, handle).pids
    lineage = {rec.pid for rec in table if rec.key in tracked}
    changed = True
    while changed:
        changed = False
        for rec in table:
            if rec.pid not in lineage and rec.ppid in lineage:
                lineage.add(rec.pid)
                changed = True
    return sorted((table.records[p] for p in lineage - members if table.records[p].alive),
                  key=lambda r: r.pid)


class MembershipTracker:
    """Historical membership of one jail, fed with successive snapshots."""

    def __init__(self, handle: JailHandle):
        self.handle = handle
        self.tracked: set[tuple[int, float]] = set()
        self.first_ppid: dict[int, int] = {}
        self.escaped: dict[tuple[int, float], ProcessRecord] = {}

    def observe(self, host_table: ProcessTable) -> tuple[ProcessTable, list[ProcessRecord]]:
        members = select_members(host_table, self.handle)
        for rec in members:
            self.tracked.add(rec.key)
            self.first_ppid.setdefault(rec.pid, rec.ppid)
        escapees = detect_escapees(host_table, self.handle, self.tracked)
        for rec in escapees:
            self.tracked.add(rec.key)
            self.first_ppid.setdefault(rec.pid, rec.ppid)
            self.escaped.setdefault(rec.key, rec)
        return members, escapees


# ---------------------------------------------------------------------------
# the jail itself

def _setpgid_self():
    os.setpgid(0, 0)


class Jail:
    """A containment domain: create, spawn one job, inspect, terminate."""

    def __init__(self, backend: IsolationBackend, jail_id: str | None = None):
        self.backend = IsolationBackend(backend)
        self.jail_id = jail_id or uuid.uuid4().hex[:12]
        self.created_at = time.time()
        self.launch = LaunchConfig()
        self.handle: JailHandle | None = None
        self._proc: subprocess.Popen | None = None
        self._status_r: int | None = None
        self._reader: threading.Thread | None = None
        self._job_pid_local: int | None = None
        self._job_pid_host: int | None = None
        self._reaper_pid_host: int | None = None
        self._reaper_ns: int | None = None
        self._job_status: int | None = None
        self._job_done = threading.Event()
        self._first_line = threading.Event()
        self._spawn_error: str | None = None
        self._term_lock = threading.Lock()
        self.terminated = False

    # -- spawning ---------------------------------------------------------
    def _preexec_supervisor_side(self, rlimits: bool):
        launch = self.launch
        unshare = self.backend is IsolationBackend.PID_NAMESPACE

        def preexec():
            os.setpgid(0, 0)
            if launch.cgroup_procs:
                with open(launch.cgroup_procs, "w") as fh:
                    fh.write(str(os.getpid()))
            if launch.cpuset:
                os.sched_setaffinity(0, launch.cpuset)
            if unshare:
                _sys.unshare_pid_namespace()
            if rlimits:
                import resource
                for res, value in launch.rlimits:
                    resource.setrlimit(res, (value, value))
        return preexec

    def spawn(self, command: list[str], env: Mapping[str, str] | None = None,
              workdir: str | None = None, mark_env: bool = True, timeout: float = 30.0) -> int:
        """Start ``command`` inside the jail and return its (host) pid."""
        if self.handle is not None or self._proc is not None:
            raise SpawnError("jail already has a job")
        if not command:
            raise SpawnError("empty command")
        job_env = dict(os.environ if env is None else env)
        if mark_env:
            job_env[JAIL_ID_ENV] = self.jail_id
        if self.backend is IsolationBackend.PROCESS_GROUP:
            return self._spawn_direct(command, job_env, workdir)
        return self._spawn_helper(command, job_env, workdir, timeout)

    def _spawn_direct(self, command, env, workdir) -> int:
        try:
            self._proc = subprocess.Popen(command, env=env, cwd=workdir, close_fds=True,
                                          preexec_fn=self._preexec_supervisor_side(rlimits=True))
        except (OSError, subprocess.SubprocessError) as exc:
            raise SpawnError(f"cannot execute {command[0]!r}: {exc}") from exc
        pid = self._proc.pid
        self.handle = JailHandle(self.jail_id, pid, self.backend, pid, None, self.created_at, pid)
        waiter = threading.Thread(target=self._wait_direct, name="jobjail-wait", daemon=True)
        waiter.start()
        return pid

    def _wait_direct(self):
        self._job_status = self._proc.wait()
        self._job_done.set()

    def _spawn_helper(self, command, env, workdir, timeout) -> int:
        mode = "pidns" if self.backend is IsolationBackend.PID_NAMESPACE else "subreaper"
        r, w = os.pipe()
        rl = ",".join(f"{res}:{value}" for res, value in self.launch.rlimits)
        drop = ",".join(name for name in _INTERPRETER_ADDED_ENV if name not in env) or "-"
        argv = [sys.executable, "-S", "-E", _HELPER, mode, str(w), rl or "-", drop, "--", *command]
        try:
            self._proc = subprocess.Popen(argv, env=env, cwd=workdir, pass_fds=(w,),
                                          preexec_fn=self._preexec_supervisor_side(rlimits=False))
        except (OSError, subprocess.SubprocessError) as exc:
            os.close(r)
            os.close(w)
            if self.backend is IsolationBackend.PID_NAMESPACE and isinstance(exc, subprocess.SubprocessError):
                raise BackendUnsupported(f"cannot create PID namespace: {exc}") from exc
            raise SpawnError(f"cannot start jail helper: {exc}") from exc
        os.close(w)
        self._status_r = r
        self._reader = threading.Thread(target=self._read_status, name="jobjail-status", daemon=True)
        self._reader.start()
        if not self._first_line.wait(timeout):
            raise SpawnError("jail helper did not report within timeout")
        helper_pid = self._proc.pid
        if self._spawn_error is not None:
            self._proc.wait()
            self._job_done.set()
            raise SpawnError(f"cannot execute {command[0]!r}: {self._spawn_error}")
        if self.backend is IsolationBackend.SUBREAPER:
            root, job, infra, ns = helper_pid, self._job_pid_host, (helper_pid,), None
        else:
            root = self._reaper_pid_host or self._wait_child_of(helper_pid, timeout)
            job = self._job_pid_host
            infra = (helper_pid, root)
            ns = self._reaper_ns or _sys.pid_namespace_of(root)
        self.handle = JailHandle(self.jail_id, root, self.backend, helper_pid, ns,
                                 self.created_at, job, infra)
        return job

    @staticmethod
    def _wait_child_of(pid: int, timeout: float) -> int:
        deadline = time.monotonic() + timeout
        path = f"/proc/{pid}/task/{pid}/children"
        while time.monotonic() < deadline:
            try:
                with open(path) as fh:
                    kids = fh.read().split()
            except OSError:
                kids = []
            if kids:
                return int(kids[0])
            time.sleep(0.005)
        raise SpawnError(f"no child of pid {pid} appeared")

    def _read_status(self):
        buf = b""
        while True:
            try:
                chunk = os.read(self._status_r, 4096)
            except OSError:
                chunk = b""
            if not chunk:
                break
            buf += chunk
            while b"\n" in buf:
                line, buf = buf.split(b"\n", 1)
                kind, _, rest = line.decode(errors="replace").partition(" ")
                if kind == "pid":
                    local, host_job, host_reaper, ns = (rest.split() + [None] * 3)[:4]
                    self._job_pid_local = int(local)
                    self._job_pid_host = int(host_job or local)
                    self._reaper_pid_host = int(host_reaper) if host_reaper else None
                    self._reaper_ns = int(ns) if ns and ns != "0" else None
                    self._first_line.set()
                elif kind == "error":
                    self._spawn_error = rest.partition(" ")[2] or rest
                    self._first_line.set()
                elif kind == "exit":
                    self._job_status = int(rest)
                    self._job_done.set()
        os.close(self._status_r)
        self._first_line.set()
        # helper gone without reporting an exit: take its own status
        if not self._job_done.is_set():
            code = self._proc.wait()
            self._job_status = code
            self._job_done.set()

    # -- job status ----------------------------------------------------------
    def wait_job(self, timeout: float | None = None) -> int | None:
        """Exit status of the job (negative = signal), or None on timeout."""
        if not self._job_done.wait(timeout):
            return None
        return self._job_status

    @property
    def job_status(self) -> int | None:
        return self._job_status if self._job_done.is_set() else None

    # -- inspection ----------------------------------------------------------
    def members(self, inspector: ProcessInspector | None = None) -> ProcessTable:
        if self.handle is None:
            return ProcessTable.of([])
        table = (inspector or ProcfsInspector()).read_table()
        return select_members(table, self.handle)

    def member_of(self, pid: int, inspector: ProcessInspector | None = None) -> bool:
        return pid in self.members(inspector)

    # -- termination ---------------------------------------------------------
    def _reap(self):
        if self._proc is not None:
            self._proc.poll()

    def _alive(self, keys: set[tuple[int, float]], inspector) -> set[tuple[int, float]]:
        table = inspector.read_table()
        out = set()
        for pid, start in keys:
            rec = table.get(pid)
            if rec is not None and rec.start_time == start and rec.alive:
                out.add((pid, start))
        return out

    def _signal(self, rec: ProcessRecord, sig: int) -> bool:
        try:
            os.kill(rec.pid, sig)
            return True
        except ProcessLookupError:
            return False
        except PermissionError:
            return False

    def terminate(self, grace: float, inspector: ProcessInspector | None = None,
                  extra: Iterable[ProcessRecord] = (), settle: float = SETTLE_SECONDS) -> TerminationReport:
        """TERM every live member, KILL whatever is left after ``grace``.

        ``extra`` adds processes outside the jail (escapees) to the target
        set.  Zombies are never signaled.
        """
        inspector = inspector or ProcfsInspector()
        with self._term_lock:
            start = time.monotonic()
            steps: list[TerminationStep] = []
            targeted: dict[tuple[int, float], ProcessRecord] = {}
            extra = list(extra)
            if self.handle is None:
                self._reap()
                return TerminationReport((), False, (), time.monotonic() - start)

            def live_targets():
                recs = [r for r in self.members(inspector) if r.alive]
                current = inspector.read_table()
                for r in extra:
                    now = current.get(r.pid)
                    if now is not None and now.start_time == r.start_time and now.alive:
                        recs.append(now)
                # job first, so its exit status reflects the signal rather than
                # a clean exit after its children were taken down
                recs.sort(key=lambda r: (r.pid != self.handle.job_pid, r.start_time, r.pid))
                return recs

            def send(recs, sig, name):
                if self.backend is IsolationBackend.PROCESS_GROUP and recs:
                    try:
                        os.killpg(self.handle.pgid, sig)
                    except (ProcessLookupError, PermissionError):
                        pass
                for rec in recs:
                    delivered = self._signal(rec, sig)
                    steps.append(TerminationStep(rec.pid, name, delivered))
                    targeted.setdefault(rec.key, rec)

            send(live_targets(), signal.SIGTERM, "TERM")
            deadline = start + grace
            while True:
                self._reap()
                pending = live_targets()
                fresh = [r for r in pending if r.key not in targeted]
                if fresh:
                    send(fresh, signal.SIGTERM, "TERM")
                if not pending or time.monotonic() >= deadline:
                    break
                time.sleep(0.02)

            escalated = False
            remaining = live_targets()
            if remaining:
                escalated = True
                if self.backend is IsolationBackend.PID_NAMESPACE:
                    # killing the namespace's pid 1 takes the whole namespace down
                    root = next((r for r in remaining if r.pid == self.handle.root_pid), None)
                    ordered = ([root] if root else []) + [r for r in remaining if r is not root]
                else:
                    ordered = remaining
                send(ordered, signal.SIGKILL, "KILL")

            settle_deadline = time.monotonic() + settle
            alive = set(targeted)
            while True:
                self._reap()
                alive = self._alive(set(targeted), inspector)
                late = [r for r in live_targets() if r.key not in targeted]
                if late:
                    send(late, signal.SIGKILL, "KILL")
                    escalated = True
                    continue
                if not alive or time.monotonic() >= settle_deadline:
                    break
                time.sleep(0.02)
            survivors = tuple(sorted(pid for pid, _ in alive))
            self.terminated = True
            self._finish_helper()
            return TerminationReport(tuple(steps), escalated, survivors, time.monotonic() - start)

    def _finish_helper(self, timeout: float = 5.0):
        if self._proc is None:
            return
        try:
            self._proc.wait(timeout)
        except subprocess.TimeoutExpired:
            try:
                self._proc.kill()
            except ProcessLookupError:
                pass
            self._proc.wait()
        if self._reader is not None and self._reader is not threading.current_thread():
            self._reader.join(timeout)
        if not self._job_done.is_set() and self.backend is IsolationBackend.PROCESS_GROUP:
            self._job_status = self._proc.returncode
            self._job_done.set()

    def close(self, grace: float = 0.0) -> TerminationReport | None:
        """Terminate anything left (if not done yet) and release resources."""
        if self.handle is not None and not self.terminated:
            return self.terminate(grace)
        self._finish_helper()
        return None

    def __enter__(self):
        return self

    def __exit__(self, *exc):
        self.close()


def create_jail(backend: IsolationBackend | str | None = None, jail_id: str | None = None) -> Jail:
    """New, empty jail; raises BackendUnsupported if the host cannot do it."""
    backend = default_backend() if backend is None else IsolationBackend(getattr(backend, "backend", backend))
    if not backend_supported(backend):
        raise BackendUnsupported(f"isolation backend {backend.value} is not supported on this host")
    return Jail(backend, jail_id)

import os
import signal
import subprocess
import time

import pytest

from jobjail import probes
from jobjail.errors import BackendUnsupported, SpawnError
from jobjail.jail import (JAIL_ID_ENV, Classification, IsolationBackend, JailHandle,
                          MembershipTracker, backend_supported, classify, create_jail,
                          detect_escapees, select_members)
from jobjail.proctable import ProcessRecord, ProcessTable, ProcfsInspector, ProcState

import oracles

ALL = list(IsolationBackend)
STRONG = [IsolationBackend.PID_NAMESPACE, IsolationBackend.SUBREAPER]


def rec(pid, ppid, pgid=None, state=ProcState.SLEEPING, start=0.0, threads=1):
    return ProcessRecord(pid=pid, ppid=ppid, pgid=pgid if pgid is not None else ppid, owner_uid=0,
                         state=state, thread_count=0 if state is ProcState.ZOMBIE else threads,
                         cpu_id=0, cpu_time=0.0, rss_bytes=0, start_time=start, comm="t")


def pg_handle(root=100):
    return JailHandle("j", root, IsolationBackend.PROCESS_GROUP, root, None, 0.0, root)


# -- pure functions --------------------------------------------------------

def test_handle_invariants():
    with pytest.raises(ValueError):
        JailHandle("j", 1, IsolationBackend.SUBREAPER, 1, None, 0.0, 1)
    with pytest.raises(ValueError):
        JailHandle("j", 100, IsolationBackend.PROCESS_GROUP, 99, None, 0.0, 100)


def test_classify():
    table = ProcessTable.of([rec(100, 1, 100), rec(101, 100, 100),
                             rec(102, 100, 100, ProcState.ZOMBIE), rec(103, 1, 100), rec(104, 1, 104)])
    history = {101: 100, 103: 100}
    assert classify(table.get(102), table, history) is Classification.ZOMBIE
    assert classify(table.get(101), table, history) is Classification.NORMAL
    assert classify(table.get(103), table, history) is Classification.ORPHAN
    assert classify(table.get(104), table, history) is Classification.DAEMON_LIKE
    with pytest.raises(ValueError):
        classify(rec(999, 1), table)


def test_classify_with_subreaper():
    table = ProcessTable.of([rec(50, 1, 50), rec(60, 50, 60)])
    assert classify(table.get(60), table, {60: 55}, reapers=(1, 50)) is Classification.ORPHAN


def test_process_group_membership_ignores_ppid():
    # parent killed: the sleepers keep the pgid but are parented by init
    table = ProcessTable.of([rec(101, 1, 100), rec(102, 1, 100), rec(300, 1, 300)])
    assert select_members(table, pg_handle()).pids == {101, 102}


def test_subreaper_membership_is_subtree():
    h = JailHandle("j", 50, IsolationBackend.SUBREAPER, 50, None, 0.0, 51, (50,))
    table = ProcessTable.of([rec(50, 1, 50), rec(51, 50, 51), rec(52, 51, 99), rec(53, 1, 53)])
    assert select_members(table, h).pids == {50, 51, 52}


def test_detect_escapees_follows_descendants():
    h = pg_handle()
    # 101 called setsid (new pgid) and forked 110
    table = ProcessTable.of([rec(100, 1, 100), rec(101, 100, 101), rec(110, 101, 101), rec(200, 1, 200)])
    tracked = {(100, 0.0), (101, 0.0)}
    assert [r.pid for r in detect_escapees(table, h, tracked)] == [101, 110]
    assert detect_escapees(table, h, set()) == []


def test_detect_escapees_ignores_reused_pids():
    table = ProcessTable.of([rec(100, 1, 100), rec(101, 1, 101, start=9.0)])
    assert detect_escapees(table, pg_handle(), {(100, 0.0), (101, 0.0)}) == []


def test_tracker_accumulates_history():
    tracker = MembershipTracker(pg_handle())
    members, esc = tracker.observe(ProcessTable.of([rec(100, 1, 100), rec(101, 100, 100)]))
    assert members.pids == {100, 101} and esc == []
    members, esc = tracker.observe(ProcessTable.of([rec(100, 1, 100), rec(101, 1, 101)]))
    assert members.pids == {100}
    assert [r.pid for r in esc] == [101]
    assert tracker.first_ppid[101] == 100


# -- host backends ---------------------------------------------------------

@pytest.mark.linux
def test_pidns_support_matches_direct_attempt():
    # oracle: try the namespace ourselves with util-linux unshare
    probe = subprocess.run(["unshare", "-p", "-f", "true"], capture_output=True)
    assert backend_supported(IsolationBackend.PID_NAMESPACE) == (probe.returncode == 0)


def test_create_jail_ids_are_distinct():
    a, b = create_jail(IsolationBackend.PROCESS_GROUP), create_jail(IsolationBackend.PROCESS_GROUP)
    assert a.jail_id != b.jail_id


def test_unsupported_backend(monkeypatch):
    import jobjail.jail as jail_mod
    monkeypatch.setattr(jail_mod, "pidns_supported", lambda: False)
    with pytest.raises(BackendUnsupported):
        create_jail(IsolationBackend.PID_NAMESPACE)


@pytest.mark.linux
@pytest.mark.parametrize("backend", ALL)
def test_spawn_member_and_terminate(backend, probe_bin, probe_env):
    with create_jail(backend) as jail:
        pid = jail.spawn(probes.probe_threads(2, duration=0), probe_env)
        assert pid > 1
        time.sleep(0.3)
        assert jail.member_of(pid)
        if backend is IsolationBackend.PROCESS_GROUP:
            assert jail.handle.pgid == jail.handle.root_pid == pid
        report = jail.terminate(2.0)
        assert report.survivors == ()
        assert not report.escalated
        assert {s.signal for s in report.steps} == {"TERM"}
    assert jail.wait_job(5) == -signal.SIGTERM
    assert oracles.live_probe_pids([pid]) == []


@pytest.mark.linux
@pytest.mark.parametrize("backend", ALL)
def test_spawn_missing_binary(backend):
    jail = create_jail(backend)
    with pytest.raises(SpawnError, match="No such file"):
        jail.spawn(["/nonexistent/jjprobe"])
    report = jail.close()
    assert report is None or report.survivors == ()


@pytest.mark.linux
@pytest.mark.parametrize("backend", ALL)
def test_env_readback(backend, probe_bin, tmp_path):
    out = tmp_path / "env"
    overlay = {"OMP_NUM_THREADS": "1", "JJ_TEST": "yes"}
    base = {"PATH": "/usr/bin:/bin", "HOME": "/root"}
    with create_jail(backend) as jail:
        jail.spawn(probes.probe_envdump(str(out)), {**base, **overlay})
        assert jail.wait_job(10) == 0
    seen = dict(item.split("=", 1) for item in out.read_bytes().decode().split("\0") if item)
    assert seen == {**base, **overlay, JAIL_ID_ENV: jail.jail_id}


@pytest.mark.linux
@pytest.mark.parametrize("backend", ALL)
def test_stubborn_needs_escalation(backend, probe_bin, probe_env):
    with create_jail(backend) as jail:
        pid = jail.spawn(probes.probe_stubborn(), probe_env)
        time.sleep(0.3)
        t0 = time.monotonic()
        report = jail.terminate(2.0)
        assert report.escalated
        assert report.survivors == ()
        assert time.monotonic() - t0 >= 2.0
        assert any(s.signal == "KILL" for s in report.steps)
    assert oracles.live_probe_pids([pid]) == []


@pytest.mark.linux
def test_orphans_keep_group_after_parent_dies(probe_bin, probe_env, sidechannel):
    with create_jail(IsolationBackend.PROCESS_GROUP) as jail:
        pid = jail.spawn(probes.probe_orphaner(100, 150), probe_env)
        deadline = time.monotonic() + 5
        while len(probes.read_sidechannel(sidechannel)) < 3 and time.monotonic() < deadline:
            time.sleep(0.02)
        assert len(jail.members()) == 3
        # independent oracle: ps filtered by process group
        assert {r.pid for r in oracles.ps_scan().values() if r.pgid == pid} == jail.members().pids
        os.kill(pid, signal.SIGKILL)
        jail.wait_job(5)
        time.sleep(0.1)
        left = jail.members().live()
        assert len(left) == 2
        assert {r.ppid for r in left} == {1}
        report = jail.terminate(1.0)
        assert report.survivors == ()
    sleepers = [r.pid for r in probes.read_sidechannel(sidechannel) if r.role == "sleeper"]
    assert oracles.live_probe_pids(sleepers) == []


@pytest.mark.linux
@pytest.mark.parametrize("backend", STRONG)
def test_orphans_stay_inside_strong_jails(backend, probe_bin, probe_env, sidechannel):
    with create_jail(backend) as jail:
        pid = jail.spawn(probes.probe_orphaner(100, 150), probe_env)
        deadline = time.monotonic() + 5
        while len(probes.read_sidechannel(sidechannel)) < 3 and time.monotonic() < deadline:
            time.sleep(0.02)
        os.kill(pid, signal.SIGKILL)
        jail.wait_job(5)
        time.sleep(0.1)
        live = [r for r in jail.members().live() if r.pid not in jail.handle.infra_pids]
        assert len(live) == 2
        report = jail.terminate(1.0)
        assert report.survivors == ()
    assert oracles.marked_processes(JAIL_ID_ENV, jail.jail_id) == []


@pytest.mark.linux
def test_sidechannel_matches_membership(probe_bin, probe_env, sidechannel):
    for backend in ALL:
        sidechannel.write_text("")
        with create_jail(backend) as jail:
            jail.spawn(probes.probe_deeptree(5, 0), probe_env)
            deadline = time.monotonic() + 5
            while len(probes.read_sidechannel(sidechannel)) < 5 and time.monotonic() < deadline:
                time.sleep(0.02)
            time.sleep(0.1)
            members = {r.pid for r in jail.members().live()} - set(jail.handle.infra_pids)
            reported = {r.pid for r in probes.read_sidechannel(sidechannel)}
            if backend is IsolationBackend.PID_NAMESPACE:
                reported = {oracles.nspid_to_host(members).get(p, -p) for p in reported}
            assert reported == members, backend
            assert jail.terminate(1.0).survivors == ()


@pytest.mark.linux
def test_escapee_detected_and_killable(probe_bin, probe_env, sidechannel):
    inspector = ProcfsInspector()
    with create_jail(IsolationBackend.PROCESS_GROUP) as jail:
        jail.spawn(probes.probe_escaper(delay=0.5), probe_env)
        tracker = MembershipTracker(jail.handle)
        escaped = []
        deadline = time.monotonic() + 5
        while not escaped and time.monotonic() < deadline:
            _, escaped = tracker.observe(inspector.read_table())
            time.sleep(0.05)
        time.sleep(0.2)
        _, escaped = tracker.observe(inspector.read_table())
        roles = {r.pid: r.role for r in probes.read_sidechannel(sidechannel)}
        assert {roles.get(r.pid) for r in escaped} == {"escaper-child", "escapee"}
        report = jail.terminate(1.0, extra=escaped)
        assert report.survivors == ()
    assert oracles.live_probe_pids(roles) == []


@pytest.mark.linux
def test_sampling_does_not_change_termination(probe_bin, probe_env):
    """Hammering the process table while terminating changes nothing."""
    import threading

    from jobjail.telemetry import Sampler

    outcomes = []
    for hammer in (False, True):
        with create_jail(IsolationBackend.SUBREAPER) as jail:
            jail.spawn(probes.probe_orphaner(100, 150), probe_env)
            time.sleep(0.3)
            stop = threading.Event()
            sampler = Sampler(ProcfsInspector(), jail.handle)

            def loop():
                while not stop.is_set():
                    sampler.sample()
                    time.sleep(0.05)

            t = threading.Thread(target=loop)
            if hammer:
                t.start()
            report = jail.terminate(1.0)
            stop.set()
            if hammer:
                t.join()
            outcomes.append((report.escalated, report.survivors, len({s.pid for s in report.steps})))
    assert outcomes[0] == outcomes[1]

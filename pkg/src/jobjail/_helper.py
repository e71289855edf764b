"""Jail-side helper process, run as a standalone script (stdlib only).

    python -S -E _helper.py MODE STATUS_FD RLIMITS DROP_ENV -- CMD [ARGS...]

MODE ``subreaper``: mark ourselves child-subreaper, start CMD, reap every
descendant that gets re-parented to us, exit once no children are left.

MODE ``pidns``: the supervisor already unshared a PID namespace for our
children.  We fork; the child is pid 1 of the namespace and runs the same
reaping loop, and we simply wait for it.  When that pid 1 exits the kernel
kills whatever is left in the namespace.

Status lines on STATUS_FD: ``pid N HOST_N HOST_SELF NS`` once CMD is
running (N is CMD's pid as seen by the helper, HOST_N the same process as
the supervisor sees it, HOST_SELF the reaping process itself, NS the inode
of its PID namespace), ``exit CODE`` when CMD ends (negative CODE = killed by
that signal), ``error ERRNO TEXT`` when CMD could not be executed.

RLIMITS is ``RES:VALUE,RES:VALUE`` applied to CMD only, just before exec.
DROP_ENV is a comma list of variables to remove from CMD's environment
(``-`` for none): the interpreter adds LC_CTYPE on its own under the C
locale, and the job must see exactly the environment it was given.
"""
import ctypes
import ctypes.util
import os
import signal
import subprocess
import sys

PR_SET_CHILD_SUBREAPER = 36


def _status(fd, line):
    try:
        os.write(fd, (line + "\n").encode())
    except OSError:
        pass


def _parse_rlimits(text):
    out = []
    for part in text.split(","):
        if part in ("", "-"):
            continue
        res, value = part.split(":")
        out.append((int(res), int(value)))
    return out


def _serve(status_fd, rlimits, cmd, env):
    import resource

    def preexec():
        # nothing may allocate after the data limit goes on
        for res, value in rlimits:
            resource.setrlimit(res, (value, value))

    try:
        job = subprocess.Popen(cmd, env=env, preexec_fn=preexec if rlimits else None, close_fds=True)
    except OSError as exc:
        _status(status_fd, f"error {exc.errno or 0} {exc.strerror or exc}")
        return 127
    job_pid = job.pid
    # the reaping loop below owns every wait from here on
    job.returncode = 0
    host_self, host_job = _host_pids(job_pid)
    try:
        ns = os.readlink("/proc/self/ns/pid").partition("[")[2].rstrip("]")
    except OSError:
        ns = "0"
    _status(status_fd, f"pid {job_pid} {host_job} {host_self} {ns}")
    job_code = 0
    while True:
        try:
            pid, status = os.waitpid(-1, 0)
        except ChildProcessError:
            break
        if pid == job_pid:
            job_code = os.waitstatus_to_exitcode(status)
            _status(status_fd, f"exit {job_code}")
    return job_code if job_code >= 0 else 128 - job_code


def _host_pids(job_pid):
    """(our pid, job pid) as the supervisor sees them.

    /proc is the supervisor's mount, so it answers in host pids even from
    inside a new PID namespace.  The job cannot have been reaped yet, so it
    is still on our children list even if it already exited.
    """
    try:
        me = int(os.readlink("/proc/self"))
        with open(f"/proc/{me}/task/{me}/children") as fh:
            kids = fh.read().split()
        return me, int(kids[0]) if len(kids) == 1 else job_pid
    except (OSError, ValueError):
        return os.getpid(), job_pid


def _forward_to_namespace(signum, frame):
    try:
        os.kill(-1, signum)
    except OSError:
        pass


def main(argv):
    mode, status_fd, rlimits = argv[1], int(argv[2]), _parse_rlimits(argv[3])
    cmd = argv[argv.index("--") + 1:]
    env = dict(os.environ)
    for name in argv[4].split(","):
        if name != "-":
            env.pop(name, None)
    # handlers (not SIG_IGN) so the job still starts with default dispositions
    for sig in (signal.SIGTERM, signal.SIGINT, signal.SIGHUP):
        signal.signal(sig, lambda s, f: None)

    if mode == "subreaper":
        libc = ctypes.CDLL(ctypes.util.find_library("c") or "libc.so.6", use_errno=True)
        if libc.prctl(PR_SET_CHILD_SUBREAPER, 1, 0, 0, 0) != 0:
            _status(status_fd, f"error {ctypes.get_errno()} prctl(PR_SET_CHILD_SUBREAPER) failed")
            return 127
        return _serve(status_fd, rlimits, cmd, env)

    if mode == "pidns":
        child = os.fork()
        if child == 0:
            for sig in (signal.SIGTERM, signal.SIGINT, signal.SIGHUP):
                signal.signal(sig, _forward_to_namespace)
            os._exit(_serve(status_fd, rlimits, cmd, env))
        os.close(status_fd)
        while True:
            try:
                _, status = os.waitpid(child, 0)
                break
            except ChildProcessError:
                return 0
        code = os.waitstatus_to_exitcode(status)
        return code if code >= 0 else 128 - code

    _status(status_fd, f"error 22 unknown helper mode {mode}")
    return 2


if __name__ == "__main__":
    sys.exit(main(sys.argv))

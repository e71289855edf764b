"""Compiled fixture programs reproducing adversarial job behaviour.

The fixtures live in one C source (``jjprobe.c``) that is compiled on first
use into a per-user cache directory.  Each ``probe_*`` function here returns
the argument vector for one probe; launch it directly or inside a jail.

Every probe process appends a ``pid=.. ppid=.. role=..`` line to the file
named by ``JOBJAIL_PROBE_SIDECHANNEL`` before it does anything else.
"""
from __future__ import annotations

import hashlib
import os
import shutil
import subprocess
import tempfile
from dataclasses import dataclass, field
from importlib import resources
from pathlib import Path

SIDECHANNEL_ENV = "JOBJAIL_PROBE_SIDECHANNEL"
EXIT_ALLOC_FAILED = 3

_built: str | None = None


class ProbeBuildError(RuntimeError):
    pass


def _cache_dir() -> Path:
    base = os.environ.get("XDG_CACHE_HOME") or os.path.join(os.path.expanduser("~"), ".cache")
    return Path(base) / "jobjail"


def probe_binary() -> str:
    """Path of the compiled probe executable, building it if needed.

    ``JOBJAIL_PROBE_BIN`` overrides the location (no build is attempted).
    """
    global _built
    override = os.environ.get("JOBJAIL_PROBE_BIN")
    if override:
        return override
    if _built and os.path.exists(_built):
        return _built
    source = resources.files(__package__).joinpath("jjprobe.c").read_bytes()
    digest = hashlib.sha256(source).hexdigest()[:12]
    target = _cache_dir() / f"jjprobe-{digest}"
    if not target.exists():
        cc = os.environ.get("CC") or shutil.which("cc") or shutil.which("gcc") or shutil.which("clang")
        if not cc:
            raise ProbeBuildError("no C compiler found; set CC or JOBJAIL_PROBE_BIN")
        target.parent.mkdir(parents=True, exist_ok=True)
        with tempfile.TemporaryDirectory() as tmp:
            src = Path(tmp) / "jjprobe.c"
            src.write_bytes(source)
            out = Path(tmp) / "jjprobe"
            proc = subprocess.run([cc, "-O2", "-pthread", "-o", str(out), str(src)],
                                  capture_output=True, text=True)
            if proc.returncode != 0:
                raise ProbeBuildError(proc.stderr.strip())
            # atomic publish so concurrent builders never exec a partial file
            tmp_target = target.with_suffix(f".{os.getpid()}")
            shutil.copy2(out, tmp_target)
            os.replace(tmp_target, target)
    _built = str(target)
    return _built


def _kv(**params) -> list[str]:
    out = []
    for key, value in params.items():
        if value is None:
            continue
        if isinstance(value, bool):
            value = int(value)
        out.append(f"{key}={value}")
    return out


def probe_orphaner(sleep_a: float = 100, sleep_b: float = 150) -> list[str]:
    """Parent that spawns two sleepers and waits for them."""
    return [probe_binary(), "orphaner", *_kv(a=sleep_a, b=sleep_b)]


def probe_memhog(total_bytes: int, rate_bytes_per_s: float = 0, touch: bool = True,
                 hold: float | None = None, chunk: int | None = None) -> list[str]:
    """Allocate ``total_bytes`` in chunks; exit 3 when an allocation fails.

    ``hold`` keeps the memory for that many seconds after success (0 means
    until signaled); by default the probe exits straight away.
    """
    return [probe_binary(), "memhog",
            *_kv(total=int(total_bytes), rate=rate_bytes_per_s, touch=touch, hold=hold, chunk=chunk)]


def probe_threads(n: int, busy: bool = False, duration: float = 0) -> list[str]:
    """Hold ``n`` extra threads (spinning if ``busy``) for ``duration`` seconds."""
    return [probe_binary(), "threads", *_kv(n=n, busy=busy, duration=duration)]


def probe_deeptree(depth: int, rss_each_bytes: int, shared: bool = False,
                   hold: float = 0) -> list[str]:
    """Chain of ``depth`` processes, each keeping ``rss_each_bytes`` resident.

    With ``shared`` every level touches one shared anonymous region, so each
    process still reports ``rss_each_bytes`` of RSS while the host only pays
    for it once.
    """
    return [probe_binary(), "deeptree", *_kv(depth=depth, rss=int(rss_each_bytes),
                                             shared=shared, hold=hold)]


def probe_stubborn(duration: float = 0) -> list[str]:
    """Ignores SIGTERM."""
    return [probe_binary(), "stubborn", *_kv(duration=duration)]


def probe_escaper(delay: float = 1, sleep: float = 0) -> list[str]:
    """Child leaves the process group via setsid after ``delay`` and forks."""
    return [probe_binary(), "escaper", *_kv(delay=delay, sleep=sleep)]


def probe_spin(duration: float = 10) -> list[str]:
    """Single-threaded busy loop."""
    return [probe_binary(), "spin", *_kv(duration=duration)]


def probe_envdump(out: str) -> list[str]:
    """Write the probe's environment, NUL separated, to ``out``."""
    return [probe_binary(), "envdump", *_kv(out=out)]


@dataclass(frozen=True)
class SideRecord:
    pid: int
    ppid: int
    role: str
    extra: dict = field(default_factory=dict)


def read_sidechannel(path) -> list[SideRecord]:
    """Parse the pid records a probe wrote to its side channel."""
    records = []
    try:
        text = Path(path).read_text()
    except FileNotFoundError:
        return records
    for line in text.splitlines():
        fields = dict(part.split("=", 1) for part in line.split() if "=" in part)
        if "pid" not in fields:
            continue
        pid = int(fields.pop("pid"))
        ppid = int(fields.pop("ppid", 0))
        role = fields.pop("role", "")
        records.append(SideRecord(pid, ppid, role, fields))
    return records


@dataclass(frozen=True)
class ProbeManifest:
    name: str
    argv: tuple
    expected: str
    sidechannel: str

    def env(self) -> dict[str, str]:
        return {SIDECHANNEL_ENV: self.sidechannel}

    def reported_pids(self) -> set[int]:
        return {r.pid for r in read_sidechannel(self.sidechannel)}


def manifest(name: str, argv: list[str], expected: str, sidechannel: str | None = None) -> ProbeManifest:
    if sidechannel is None:
        fd, sidechannel = tempfile.mkstemp(prefix=f"jjprobe-{name}-", suffix=".pids")
        os.close(fd)
    return ProbeManifest(name, tuple(argv), expected, sidechannel)

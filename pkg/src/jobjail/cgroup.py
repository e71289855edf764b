"""Memory control-group nodes (unified v2 hierarchy, with v1 fallback).

The node for a jail is ``<root>/jobjail-<jail_id>``.  ``<root>`` comes from
``JOBJAIL_CGROUP_ROOT`` when set, otherwise from the supervisor's own cgroup
in whichever mounted hierarchy carries the memory controller.
"""
from __future__ import annotations

import errno
import os
import signal
import time
from dataclasses import dataclass
from pathlib import Path

from jobjail.errors import BackendUnsupported

ROOT_ENV = "JOBJAIL_CGROUP_ROOT"
NODE_PREFIX = "jobjail-"


@dataclass(frozen=True)
class CgroupRoot:
    path: Path
    version: int


def _read(path: Path) -> str:
    return path.read_text()


def _write(path: Path, value: str) -> None:
    with open(path, "w") as fh:
        fh.write(value)


def _version_of(path: Path) -> int | None:
    if (path / "cgroup.controllers").exists():
        return 2
    if (path / "memory.limit_in_bytes").exists():
        return 1
    return None


def _mounts() -> list[tuple[str, str, set[str]]]:
    """(mount point, fstype, super options) for every cgroup mount."""
    out = []
    try:
        lines = _read(Path("/proc/self/mountinfo")).splitlines()
    except OSError:
        return out
    for line in lines:
        left, _, right = line.partition(" - ")
        fields = left.split()
        rfields = right.split()
        if len(fields) < 5 or len(rfields) < 3:
            continue
        fstype = rfields[0]
        if fstype in ("cgroup", "cgroup2"):
            out.append((fields[4], fstype, set(rfields[2].split(","))))
    return out


def _own_paths() -> dict[str, str]:
    """Controller (or "" for v2) → cgroup path of this process."""
    paths = {}
    try:
        for line in _read(Path("/proc/self/cgroup")).splitlines():
            _, controllers, path = line.split(":", 2)
            for c in (controllers.split(",") if controllers else [""]):
                paths[c] = path
    except OSError:
        pass
    return paths


def _v2_usable(base: Path) -> bool:
    try:
        if "memory" not in _read(base / "cgroup.controllers").split():
            return False
        if "memory" not in _read(base / "cgroup.subtree_control").split():
            _write(base / "cgroup.subtree_control", "+memory")
        return os.access(base, os.W_OK)
    except OSError:
        return False


def find_memory_root() -> CgroupRoot:
    """Locate a writable hierarchy where per-jail memory nodes can be made."""
    override = os.environ.get(ROOT_ENV)
    if override:
        path = Path(override)
        version = _version_of(path)
        if version is None or not os.access(path, os.W_OK):
            raise BackendUnsupported(f"{ROOT_ENV}={override} is not a writable memory cgroup directory")
        if version == 2 and not _v2_usable(path):
            raise BackendUnsupported(f"memory controller not available below {override}")
        return CgroupRoot(path, version)

    own = _own_paths()
    mounts = _mounts()
    for mnt, fstype, _ in mounts:
        if fstype != "cgroup2":
            continue
        base = Path(mnt) / own.get("", "/").lstrip("/")
        for candidate in (base, base.parent):
            if _v2_usable(candidate):
                return CgroupRoot(candidate, 2)
    for mnt, fstype, opts in mounts:
        if fstype == "cgroup" and "memory" in opts:
            base = Path(mnt) / own.get("memory", "/").lstrip("/")
            if base.is_dir() and os.access(base, os.W_OK):
                return CgroupRoot(base, 1)
    raise BackendUnsupported("no writable cgroup hierarchy with the memory controller")


class CgroupNode:
    """One memory-limited control group holding a whole jail."""

    def __init__(self, root: CgroupRoot, name: str):
        self.root = root
        self.version = root.version
        self.path = root.path / name

    @classmethod
    def create(cls, root: CgroupRoot, jail_id: str, limit_bytes: int) -> "CgroupNode":
        node = cls(root, NODE_PREFIX + jail_id)
        try:
            node.path.mkdir()
        except FileExistsError:
            pass
        except OSError as exc:
            raise BackendUnsupported(f"cannot create {node.path}: {exc}") from exc
        try:
            node.set_limit(limit_bytes)
        except OSError as exc:
            node.remove()
            raise BackendUnsupported(f"cannot set memory limit on {node.path}: {exc}") from exc
        return node

    @property
    def procs_file(self) -> str:
        return str(self.path / "cgroup.procs")

    def set_limit(self, limit_bytes: int) -> None:
        if self.version == 2:
            _write(self.path / "memory.max", str(limit_bytes))
            if (self.path / "memory.swap.max").exists():
                _write(self.path / "memory.swap.max", "0")
        else:
            _write(self.path / "memory.limit_in_bytes", str(limit_bytes))
            memsw = self.path / "memory.memsw.limit_in_bytes"
            if memsw.exists():
                try:
                    _write(memsw, str(limit_bytes))
                except OSError:
                    pass

    def attach(self, pid: int) -> None:
        _write(self.path / "cgroup.procs", str(pid))

    def pids(self) -> list[int]:
        try:
            return [int(x) for x in _read(self.path / "cgroup.procs").split()]
        except OSError:
            return []

    def usage(self) -> int:
        name = "memory.current" if self.version == 2 else "memory.usage_in_bytes"
        return int(_read(self.path / name))

    def peak(self) -> int | None:
        name = "memory.peak" if self.version == 2 else "memory.max_usage_in_bytes"
        try:
            return int(_read(self.path / name))
        except (OSError, ValueError):
            return None

    def oom_kills(self) -> int:
        name = "memory.events" if self.version == 2 else "memory.oom_control"
        try:
            for line in _read(self.path / name).splitlines():
                key, _, value = line.partition(" ")
                if key == "oom_kill":
                    return int(value)
        except OSError:
            pass
        if self.version == 1:
            try:
                return int(_read(self.path / "memory.failcnt")) and 1
            except (OSError, ValueError):
                pass
        return 0

    def kill_all(self) -> None:
        if self.version == 2 and (self.path / "cgroup.kill").exists():
            try:
                _write(self.path / "cgroup.kill", "1")
                return
            except OSError:
                pass
        for pid in self.pids():
            try:
                os.kill(pid, signal.SIGKILL)
            except ProcessLookupError:
                pass

    def remove(self, timeout: float = 5.0) -> bool:
        """rmdir the node, retrying while exiting processes drain out."""
        deadline = time.monotonic() + timeout
        while True:
            try:
                self.path.rmdir()
                return True
            except FileNotFoundError:
                return True
            except OSError as exc:
                if exc.errno not in (errno.EBUSY, errno.ENOTEMPTY) or time.monotonic() > deadline:
                    return False
                time.sleep(0.05)


def leftover_nodes(root: CgroupRoot | None = None) -> list[Path]:
    """Jail nodes still present below ``root`` (for cleanup checks)."""
    if root is None:
        try:
            root = find_memory_root()
        except BackendUnsupported:
            return []
    return sorted(p for p in root.path.glob(NODE_PREFIX + "*") if p.is_dir())

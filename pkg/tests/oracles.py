"""Independent reference implementations used as test oracles.

Nothing here imports the code under test except plain data types, so a bug
in the library cannot hide in its own oracle.
"""
from __future__ import annotations

import os
import subprocess
from dataclasses import dataclass


# ---------------------------------------------------------------------------
# process scans (ps / raw /proc, not ProcfsInspector)

@dataclass(frozen=True)
class PsRow:
    pid: int
    ppid: int
    pgid: int
    stat: str
    comm: str


def ps_scan() -> dict[int, PsRow]:
    out = subprocess.run(["ps", "-eo", "pid=,ppid=,pgid=,stat=,comm="], capture_output=True,
                         text=True, check=True).stdout
    rows = {}
    for line in out.splitlines():
        parts = line.split(None, 4)
        if len(parts) < 5:
            continue
        row = PsRow(int(parts[0]), int(parts[1]), int(parts[2]), parts[3], parts[4].strip())
        rows[row.pid] = row
    return rows


def live_probe_pids(pids) -> list[int]:
    """Which of ``pids`` are still alive (not zombies) according to ps."""
    rows = ps_scan()
    return sorted(p for p in pids if p in rows and not rows[p].stat.startswith("Z"))


def live_with_comm_prefix(prefix: str = "jjp-") -> list[PsRow]:
    return [r for r in ps_scan().values() if r.comm.startswith(prefix) and not r.stat.startswith("Z")]


def marked_processes(marker: str, value: str | None = None) -> list[int]:
    """Live pids whose environment carries ``marker`` (optionally =value)."""
    want = f"{marker}=".encode()
    found = []
    for name in os.listdir("/proc"):
        if not name.isdigit():
            continue
        try:
            with open(f"/proc/{name}/environ", "rb") as fh:
                env = fh.read().split(b"\0")
            with open(f"/proc/{name}/status") as fh:
                state = next(line for line in fh if line.startswith("State:")).split()[1]
        except (OSError, StopIteration):
            continue
        if state == "Z":
            continue
        for item in env:
            if item.startswith(want) and (value is None or item[len(want):].decode() == value):
                found.append(int(name))
                break
    return sorted(found)


def nspid_to_host(host_pids) -> dict[int, int]:
    """Map innermost-namespace pid -> host pid using /proc/<pid>/status NSpid."""
    out = {}
    for pid in host_pids:
        try:
            with open(f"/proc/{pid}/status") as fh:
                line = next(line for line in fh if line.startswith("NSpid:"))
        except (OSError, StopIteration):
            continue
        out[int(line.split()[-1])] = pid
    return out


def rss_of(pid: int) -> int:
    with open(f"/proc/{pid}/status") as fh:
        for line in fh:
            if line.startswith("VmRSS:"):
                return int(line.split()[1]) * 1024
    return 0


# ---------------------------------------------------------------------------
# hierarchy sums

def recursive_rss(children: dict[int, list[int]], rss: dict[int, int], root: int) -> int:
    """Plain recursive tree sum (the poll_enforce oracle)."""
    return rss.get(root, 0) + sum(recursive_rss(children, rss, c) for c in children.get(root, ()))


# ---------------------------------------------------------------------------
# memory model reference

def reference_simulate(ops, arena_bytes=262144, threshold=512, gens=(700, 10, 10)):
    """One event at a time over a flat object table; each collection scans
    every object.

    ``ops`` is a list of ("alloc", size, tracked) / ("free", index).
    Returns a dict with the same quantities the library reports.
    """
    objects = {}  # index -> dict(size, arena, gen, dead)
    arenas = []   # each: [used_bytes, member count], or None once released
    heap = 0
    counters = [0] * len(gens)
    rounds = [0] * len(gens)
    schedule = []
    peak = heap_peak = arena_peak = 0

    def measure():
        nonlocal peak, heap_peak, arena_peak
        n = sum(1 for a in arenas if a is not None)
        peak = max(peak, n * arena_bytes + heap)
        heap_peak = max(heap_peak, heap)
        arena_peak = max(arena_peak, n)

    def drop(i):
        nonlocal heap
        o = objects.pop(i)
        if o["arena"] is None:
            heap -= o["size"]
            return
        a = arenas[o["arena"]]
        a[0] -= o["size"]
        a[1] -= 1
        if a[1] == 0:
            arenas[o["arena"]] = None

    def collect(g, event_no):
        last = len(gens) - 1
        for i in sorted(objects):
            o = objects[i]
            if o["gen"] != g:
                continue
            if o["dead"]:
                drop(i)
            elif g < last:
                o["gen"] = g + 1
                counters[g + 1] += 1
        counters[g] = 0
        rounds[g] += 1
        schedule.append((event_no, g))

    for i, op in enumerate(ops):
        event_no = i + 1
        if op[0] == "alloc":
            _, size, tracked = op
            where = None
            if size <= threshold:
                for a, slot in enumerate(arenas):
                    if slot is not None and arena_bytes - slot[0] >= size:
                        where = a
                        break
                if where is None:
                    arenas.append([0, 0])
                    where = len(arenas) - 1
                arenas[where][0] += size
                arenas[where][1] += 1
            else:
                heap += size
            objects[i] = {"size": size, "arena": where, "gen": 0 if tracked else None,
                          "dead": False, "tracked": tracked}
            if tracked:
                counters[0] += 1
                measure()
                for g in reversed(range(len(gens))):
                    if counters[g] > gens[g]:
                        collect(g, event_no)
                        break
        else:
            o = objects[op[1]]
            if o["tracked"]:
                o["dead"] = True
                counters[o["gen"]] -= 1
            else:
                drop(op[1])
        measure()

    surviving = [sum(1 for o in objects.values() if o["tracked"] and o["gen"] == g)
                 for g in range(len(gens))]
    return {
        "peak_bytes": peak,
        "direct_heap_bytes": heap_peak,
        "arena_count_peak": arena_peak,
        "gc_rounds": tuple(rounds),
        "surviving_objects": tuple(surviving),
        "schedule": schedule,
        "final_live_bytes": sum(o["size"] for o in objects.values() if not o["dead"]),
    }


def hand_counter_trace(n_tracked_allocs: int, g0: int = 700) -> list[int]:
    """Event numbers where generation 0 fires for pure tracked allocations.

    Counter climbs by one per alloc; the round fires on the first event
    where it is strictly above ``g0`` and resets it to zero.
    """
    fired, counter = [], 0
    for event in range(1, n_tracked_allocs + 1):
        counter += 1
        if counter > g0:
            fired.append(event)
            counter = 0
    return fired


def random_tree(rng, max_depth: int = 100, max_extra: int = 60, root_pid: int = 1000):
    """Random process tree as plain dicts: (children, rss, rows).

    A chain of random depth guarantees deep trees; extra nodes hang off
    random existing nodes.  ``rows`` are (pid, ppid, rss, zombie) tuples.
    """
    depth = rng.randint(1, max_depth)
    rows = []
    pid = root_pid
    parent = 1
    for _ in range(depth):
        rows.append([pid, parent])
        parent = pid
        pid += 1
    for _ in range(rng.randint(0, max_extra)):
        rows.append([pid, rng.choice(rows)[0]])
        pid += 1
    out, children, rss = [], {}, {}
    for p, pp in rows:
        zombie = p != root_pid and rng.random() < 0.05
        size = 0 if zombie else rng.randint(0, 2**31)
        out.append((p, pp, size, zombie))
        rss[p] = size
        children.setdefault(pp, []).append(p)
    return children, rss, out

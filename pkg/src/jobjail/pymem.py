"""Interpreter memory model: object sizes, small-object arenas, generational GC.

The model estimates how much memory an interpreted workload reserves for a
given stream of allocations and frees:

* objects up to ``small_threshold_bytes`` (512) go into fixed-size arenas
  (256 KiB), placed first-fit over the open arenas; a new arena is reserved
  when none has room and an arena is given back only once it is empty;
* larger objects go straight to the heap;
* GC-tracked objects live in generations.  Each generation keeps a counter
  of allocations into it minus deallocations from it since its last round.
  On a tracked allocation, the oldest generation whose counter *exceeds*
  its threshold is collected: objects already freed in the trace are
  released, the rest move one generation up (the oldest keeps them), and
  the counter is reset.  Objects entering a generation by promotion count
  as allocations into it.

A tracked object freed in the trace stands for an unreachable cycle: its
memory is only released when its generation is collected.  Untracked frees
release immediately.

This GC counter model is deliberately not CPython's own (there, an older
generation counts collections of the younger one).
"""
from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Iterator, Mapping

from jobjail.errors import TraceError, UnknownDescriptor

DEFAULT_SIZES = {"integer:small": 28, "integer:large": 32}
DEFAULT_ARENA_BYTES = 256 * 1024
DEFAULT_SMALL_THRESHOLD = 512
DEFAULT_GC_THRESHOLDS = (700, 10, 10)


# ---------------------------------------------------------------------------
# object sizes

class SizeTable(Mapping):
    """Value class descriptor → object size in bytes."""

    def __init__(self, entries: Mapping[str, int] | None = None, include_defaults: bool = True):
        self._sizes: dict[str, int] = dict(DEFAULT_SIZES) if include_defaults else {}
        for key, value in (entries or {}).items():
            self[key] = value

    def __setitem__(self, key: str, value: int) -> None:
        value = int(value)
        if value <= 0:
            raise ValueError(f"size of {key!r} must be > 0")
        self._sizes[key.strip()] = value

    def __getitem__(self, key: str) -> int:
        return self._sizes[key]

    def __iter__(self) -> Iterator[str]:
        return iter(self._sizes)

    def __len__(self) -> int:
        return len(self._sizes)

    @classmethod
    def parse(cls, text: str, include_defaults: bool = True) -> "SizeTable":
        table = cls(include_defaults=include_defaults)
        for lineno, raw in enumerate(text.splitlines(), 1):
            line = raw.split("#", 1)[0].strip()
            if not line:
                continue
            key, sep, value = line.partition("=")
            if not sep:
                raise ValueError(f"size table line {lineno}: expected class=bytes, got {raw!r}")
            table[key] = int(value)
        return table

    @classmethod
    def load(cls, path, include_defaults: bool = True) -> "SizeTable":
        return cls.parse(Path(path).read_text(), include_defaults)


def object_size(value_class: str, table: Mapping[str, int] | None = None) -> int:
    """Size of one object of ``value_class``, looked up (never computed)."""
    table = SizeTable() if table is None else table
    try:
        return table[value_class]
    except KeyError:
        raise UnknownDescriptor(f"unknown value class {value_class!r}") from None


# ---------------------------------------------------------------------------
# traces

@dataclass(frozen=True)
class TraceEvent:
    op: str  # "alloc" or "free"
    size_bytes: int
    gc_tracked: bool = False
    ref: int | None = None  # for frees: index of the alloc event


@dataclass(frozen=True)
class AllocTrace:
    events: tuple[TraceEvent, ...]

    def __post_init__(self):
        live: set[int] = set()
        for i, ev in enumerate(self.events):
            if ev.op == "alloc":
                if ev.size_bytes <= 0:
                    raise TraceError(f"event {i}: alloc size must be > 0")
                live.add(i)
            elif ev.op == "free":
                if ev.ref not in live:
                    raise TraceError(f"event {i}: free of {ev.ref}, which is not a live allocation")
                live.discard(ev.ref)
            else:
                raise TraceError(f"event {i}: unknown op {ev.op!r}")

    def __len__(self) -> int:
        return len(self.events)

    @classmethod
    def build(cls, ops: Iterable[tuple]) -> "AllocTrace":
        """From ``("alloc", size, tracked)`` / ``("free", index)`` tuples."""
        events: list[TraceEvent] = []
        for op in ops:
            if op[0] == "alloc":
                events.append(TraceEvent("alloc", int(op[1]), bool(op[2]) if len(op) > 2 else False))
            elif op[0] == "free":
                ref = int(op[1])
                if not 0 <= ref < len(events) or events[ref].op != "alloc":
                    raise TraceError(f"event {len(events)}: free of {ref}, which is not an alloc")
                target = events[ref]
                events.append(TraceEvent("free", target.size_bytes, target.gc_tracked, ref))
            else:
                raise TraceError(f"event {len(events)}: unknown op {op[0]!r}")
        return cls(tuple(events))

    @classmethod
    def parse(cls, text: str, sizes: Mapping[str, int] | None = None) -> "AllocTrace":
        """Parse ``alloc,<bytes|class>,<0|1>`` and ``free,<event-index>`` lines.

        Event indices count event lines only, starting at 0; blank lines and
        ``#`` comments are skipped.  A non-numeric size is looked up in
        ``sizes``.
        """
        ops = []
        for lineno, raw in enumerate(text.splitlines(), 1):
            line = raw.split("#", 1)[0].strip()
            if not line:
                continue
            parts = [p.strip() for p in line.split(",")]
            try:
                if parts[0] == "alloc" and len(parts) in (2, 3):
                    size = int(parts[1]) if parts[1].isdigit() else object_size(parts[1], sizes)
                    tracked = parts[2] if len(parts) == 3 else "0"
                    if tracked not in ("0", "1"):
                        raise ValueError("tracked flag must be 0 or 1")
                    ops.append(("alloc", size, tracked == "1"))
                elif parts[0] == "free" and len(parts) == 2:
                    ops.append(("free", int(parts[1])))
                else:
                    raise ValueError("expected alloc,<bytes>,<0|1> or free,<index>")
            except (ValueError, UnknownDescriptor) as exc:
                raise TraceError(f"trace line {lineno}: {raw!r}: {exc}") from None
        return cls.build(ops)

    @classmethod
    def load(cls, path, sizes: Mapping[str, int] | None = None) -> "AllocTrace":
        return cls.parse(Path(path).read_text(), sizes)

    def to_text(self) -> str:
        lines = []
        for ev in self.events:
            if ev.op == "alloc":
                lines.append(f"alloc,{ev.size_bytes},{int(ev.gc_tracked)}")
            else:
                lines.append(f"free,{ev.ref}")
        return "\n".join(lines) + ("\n" if lines else "")


# ---------------------------------------------------------------------------
# configuration

@dataclass(frozen=True)
class ArenaConfig:
    arena_bytes: int = DEFAULT_ARENA_BYTES
    small_threshold_bytes: int = DEFAULT_SMALL_THRESHOLD

    def __post_init__(self):
        if not self.arena_bytes > self.small_threshold_bytes > 0:
            raise ValueError("need arena_bytes > small_threshold_bytes > 0")


@dataclass(frozen=True)
class GcConfig:
    thresholds: tuple[int, ...] = DEFAULT_GC_THRESHOLDS

    def __post_init__(self):
        if not self.thresholds or any(t <= 0 for t in self.thresholds):
            raise ValueError("GC thresholds must be > 0")

    @classmethod
    def parse(cls, text: str) -> "GcConfig":
        return cls(tuple(int(x) for x in text.split(",")))


# ---------------------------------------------------------------------------
# generational GC

@dataclass(frozen=True)
class GcRound:
    event_number: int  # 1-based position of the triggering event
    generation: int
    collected: int
    promoted: int


@dataclass(frozen=True)
class GcResult:
    rounds: tuple[int, ...]  # per generation
    schedule: tuple[GcRound, ...]
    surviving: tuple[int, ...]  # objects still held per generation at the end

    @property
    def total_rounds(self) -> int:
        return sum(self.rounds)


class GenerationalGc:
    """Counter/threshold state machine shared by simulate() and gc_rounds()."""

    def __init__(self, config: GcConfig):
        self.thresholds = config.thresholds
        n = len(self.thresholds)
        self.counters = [0] * n
        self.generations: list[set[int]] = [set() for _ in range(n)]
        self.where: dict[int, int] = {}
        self.unreachable: set[int] = set()
        self.rounds = [0] * n
        self.schedule: list[GcRound] = []

    def on_alloc(self, obj: int, event_number: int) -> list[int]:
        """Track a new object; returns objects released by a triggered round."""
        self.generations[0].add(obj)
        self.where[obj] = 0
        self.counters[0] += 1
        for gen in range(len(self.thresholds) - 1, -1, -1):
            if self.counters[gen] > self.thresholds[gen]:
                return self.collect(gen, event_number)
        return []

    def on_free(self, obj: int) -> None:
        """The trace dropped its last reference: unreachable until collected."""
        self.unreachable.add(obj)
        self.counters[self.where[obj]] -= 1

    def collect(self, gen: int, event_number: int) -> list[int]:
        members = self.generations[gen]
        released = sorted(members & self.unreachable)
        survivors = members - self.unreachable
        for obj in released:
            self.unreachable.discard(obj)
            del self.where[obj]
        last = len(self.thresholds) - 1
        if gen < last:
            self.generations[gen] = set()
            self.generations[gen + 1] |= survivors
            for obj in survivors:
                self.where[obj] = gen + 1
            self.counters[gen + 1] += len(survivors)
        else:
            self.generations[gen] = survivors
        self.counters[gen] = 0
        self.rounds[gen] += 1
        self.schedule.append(GcRound(event_number, gen, len(released),
                                     len(survivors) if gen < last else 0))
        return released

    def result(self) -> GcResult:
        return GcResult(tuple(self.rounds), tuple(self.schedule),
                        tuple(len(g) for g in self.generations))


def gc_rounds(trace: AllocTrace, gc: GcConfig | None = None) -> GcResult:
    """Run only the GC model over the tracked events of ``trace``."""
    model = GenerationalGc(gc or GcConfig())
    for i, ev in enumerate(trace.events):
        if not ev.gc_tracked:
            continue
        if ev.op == "alloc":
            model.on_alloc(i, i + 1)
        else:
            model.on_free(ev.ref)
    return model.result()


# ---------------------------------------------------------------------------
# arenas + heap

@dataclass(frozen=True)
class MemoryEstimate:
    peak_bytes: int
    direct_heap_bytes: int  # largest direct-heap total seen
    arena_count_peak: int
    gc_rounds: tuple[int, ...]
    surviving_objects: tuple[int, ...]
    final_reserved_bytes: int = 0
    final_live_bytes: int = 0  # allocated and not yet freed by the trace
    schedule: tuple[GcRound, ...] = ()

    def to_dict(self) -> dict:
        return {
            "peak_bytes": self.peak_bytes,
            "direct_heap_bytes": self.direct_heap_bytes,
            "arena_count_peak": self.arena_count_peak,
            "gc_rounds": list(self.gc_rounds),
            "surviving_objects": list(self.surviving_objects),
            "final_reserved_bytes": self.final_reserved_bytes,
            "final_live_bytes": self.final_live_bytes,
            "schedule": [[r.event_number, r.generation] for r in self.schedule],
        }


@dataclass
class Timeline:
    event: list[int] = field(default_factory=list)
    reserved: list[int] = field(default_factory=list)
    live: list[int] = field(default_factory=list)


class _Arenas:
    def __init__(self, config: ArenaConfig):
        self.capacity = config.arena_bytes
        self.used: dict[int, int] = {}  # open arenas in creation order
        self._next_id = 0

    def place(self, size: int) -> int:
        for aid, used in self.used.items():
            if self.capacity - used >= size:
                self.used[aid] = used + size
                return aid
        aid = self._next_id
        self._next_id += 1
        self.used[aid] = size
        return aid

    def release(self, aid: int, size: int) -> None:
        left = self.used[aid] - size
        if left:
            self.used[aid] = left
        else:
            del self.used[aid]

    def __len__(self) -> int:
        return len(self.used)


def simulate(trace: AllocTrace, arena: ArenaConfig | None = None, gc: GcConfig | None = None,
             timeline: Timeline | None = None) -> MemoryEstimate:
    """Replay ``trace`` through the arena/heap/GC model."""
    arena = arena or ArenaConfig()
    model = GenerationalGc(gc or GcConfig())
    arenas = _Arenas(arena)
    placed: dict[int, tuple[int, int | None]] = {}  # obj → (size, arena id or None for heap)
    heap = live = 0
    peak = heap_peak = arena_peak = 0

    def release(obj: int) -> None:
        nonlocal heap
        size, aid = placed.pop(obj)
        if aid is None:
            heap -= size
        else:
            arenas.release(aid, size)

    for i, ev in enumerate(trace.events):
        if ev.op == "alloc":
            size = ev.size_bytes
            if size <= arena.small_threshold_bytes:
                placed[i] = (size, arenas.place(size))
            else:
                placed[i] = (size, None)
                heap += size
            live += size
            if ev.gc_tracked:
                # the new object is counted before any collection it triggers
                reserved = len(arenas) * arena.arena_bytes + heap
                peak = max(peak, reserved)
                heap_peak = max(heap_peak, heap)
                arena_peak = max(arena_peak, len(arenas))
                for obj in model.on_alloc(i, i + 1):
                    release(obj)
        else:
            live -= ev.size_bytes
            if ev.gc_tracked:
                model.on_free(ev.ref)
            else:
                release(ev.ref)
        reserved = len(arenas) * arena.arena_bytes + heap
        peak = max(peak, reserved)
        heap_peak = max(heap_peak, heap)
        arena_peak = max(arena_peak, len(arenas))
        if timeline is not None:
            timeline.event.append(i + 1)
            timeline.reserved.append(reserved)
            timeline.live.append(live)

    res = model.result()
    return MemoryEstimate(
        peak_bytes=peak,
        direct_heap_bytes=heap_peak,
        arena_count_peak=arena_peak,
        gc_rounds=res.rounds,
        surviving_objects=res.surviving,
        final_reserved_bytes=len(arenas) * arena.arena_bytes + heap,
        final_live_bytes=live,
        schedule=res.schedule,
    )


def estimate_report(trace: AllocTrace, arena: ArenaConfig, gc: GcConfig,
                    estimate: MemoryEstimate) -> dict:
    return {
        "config": {
            "arena_bytes": arena.arena_bytes,
            "small_threshold_bytes": arena.small_threshold_bytes,
            "gc_thresholds": list(gc.thresholds),
        },
        "events": len(trace),
        "estimate": estimate.to_dict(),
    }


def random_trace(rng, n_events: int, max_size: int = 2048, tracked_p: float = 0.5,
                 free_p: float = 0.4) -> AllocTrace:
    """Random valid trace (frees pick uniformly among live allocations)."""
    ops: list[tuple] = []
    live: list[int] = []
    for _ in range(n_events):
        if live and rng.random() < free_p:
            k = rng.randrange(len(live))
            live[k], live[-1] = live[-1], live[k]
            ops.append(("free", live.pop()))
        else:
            live.append(len(ops))
            ops.append(("alloc", rng.randint(1, max_size), rng.random() < tracked_p))
    return AllocTrace.build(ops)


"""Periodic resource samples of a jail and their summary.

A sample records, for the jail's job processes (helper processes of the
jail itself are left out):

* ``not_total``: number of threads, summed over live members
* ``main_cpu_id``: CPU the job's main process last ran on (-1 once it is gone)
* ``cpu_percent``: CPU time used over the last interval / wall time, where
  100 means one fully busy core
* ``rss_total_bytes``, ``process_count`` (zombies included), ``zombie_count``
"""
from __future__ import annotations

import csv
import io
import json
import math
import statistics
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Iterable, Protocol, Sequence

from jobjail.errors import JobjailError, PartialSnapshotError, ReportWriteError
from jobjail.limits import EnforcementEvent
from jobjail.proctable import ProcessInspector, ProcessTable

CSV_COLUMNS = ("t_ms", "not_total", "main_cpu_id", "cpu_percent", "rss_bytes",
               "process_count", "zombie_count", "accel_util")
DEFAULT_SAMPLE_INTERVAL = 0.5


class AcceleratorSampler(Protocol):
    def sample(self) -> float | None: ...


class MockAccelerator:
    """Scripted accelerator utilisation, one value per call.

    The last value repeats once the script runs out.
    """

    def __init__(self, values: Iterable[float]):
        self.values = [float(v) for v in values]
        self._pos = 0

    @classmethod
    def from_file(cls, path) -> "MockAccelerator":
        values = []
        for line in Path(path).read_text().splitlines():
            line = line.split("#", 1)[0].strip()
            if line:
                values.append(float(line.rpartition(";")[2]))
        return cls(values)

    def sample(self) -> float | None:
        if not self.values:
            return None
        value = self.values[min(self._pos, len(self.values) - 1)]
        self._pos += 1
        return value


@dataclass(frozen=True)
class Sample:
    t_ms: int
    not_total: int
    main_cpu_id: int
    cpu_percent: float
    rss_total_bytes: int
    process_count: int
    zombie_count: int
    accel_util: float | None = None
    degraded: bool = False

    def __post_init__(self):
        if self.cpu_percent < 0:
            raise ValueError("cpu_percent must be >= 0")
        if self.not_total < self.process_count - self.zombie_count:
            raise ValueError("not_total below live process count")

    @property
    def t(self) -> float:
        return self.t_ms / 1000.0


@dataclass
class SamplerState:
    """What the next sample needs from the previous one."""
    taken_at: float
    cpu_by_key: dict = field(default_factory=dict)


def _job_records(members: ProcessTable, handle):
    infra = set(getattr(handle, "infra_pids", ()) or ())
    return [r for r in members if r.pid not in infra]


def sample_table(members: ProcessTable, handle, prev: SamplerState | None, t0: float,
                 accel: AcceleratorSampler | None = None) -> tuple[Sample, SamplerState]:
    """Build one sample from a membership snapshot (no I/O)."""
    recs = _job_records(members, handle)
    live = [r for r in recs if r.alive]
    zombies = len(recs) - len(live)
    main = members.get(handle.job_pid)
    main_cpu = main.cpu_id if main is not None and main.alive else -1
    cpu_by_key = {r.key: r.cpu_time for r in recs}
    cpu_percent = 0.0
    if prev is not None:
        dt = members.taken_at - prev.taken_at
        if dt > 0:
            used = sum(max(cpu - prev.cpu_by_key.get(key, 0.0), 0.0) for key, cpu in cpu_by_key.items())
            cpu_percent = round(100.0 * used / dt, 2)
    accel_value = accel.sample() if accel is not None else None
    s = Sample(
        t_ms=max(int(round((members.taken_at - t0) * 1000)), 0),
        not_total=sum(r.thread_count for r in live),
        main_cpu_id=main_cpu,
        cpu_percent=cpu_percent,
        rss_total_bytes=sum(r.rss_bytes for r in live),
        process_count=len(recs),
        zombie_count=zombies,
        accel_util=None if accel_value is None else round(accel_value, 2),
        degraded=members.degraded,
    )
    return s, SamplerState(members.taken_at, cpu_by_key)


def sample(inspector: ProcessInspector, handle, prev: SamplerState | None = None,
           t0: float | None = None, accel: AcceleratorSampler | None = None) -> tuple[Sample, SamplerState]:
    """Read the inspector once and sample the jail behind ``handle``."""
    from jobjail.jail import select_members

    try:
        table = inspector.read_table()
    except PartialSnapshotError as exc:
        table = exc.table if exc.table is not None else ProcessTable.of([], time.monotonic(), degraded=True)
        table = ProcessTable(table.taken_at, table.records, True)
    members = select_members(table, handle)
    if t0 is None:
        t0 = members.taken_at if prev is None else prev.taken_at
    return sample_table(members, handle, prev, t0, accel)


class Sampler:
    """Stateful wrapper producing a series for one jail."""

    def __init__(self, inspector: ProcessInspector, handle, t0: float | None = None,
                 accel: AcceleratorSampler | None = None):
        self.inspector = inspector
        self.handle = handle
        self.t0 = t0
        self.accel = accel
        self.state: SamplerState | None = None
        self.series: list[Sample] = []

    def observe(self, members: ProcessTable) -> Sample:
        if self.t0 is None:
            self.t0 = members.taken_at
        s, self.state = sample_table(members, self.handle, self.state, self.t0, self.accel)
        self.series.append(s)
        return s

    def sample(self) -> Sample:
        if self.t0 is None:
            s, self.state = sample(self.inspector, self.handle, None, None, self.accel)
            self.t0 = self.state.taken_at
        else:
            s, self.state = sample(self.inspector, self.handle, self.state, self.t0, self.accel)
        self.series.append(s)
        return s


# ---------------------------------------------------------------------------
# summary

@dataclass(frozen=True)
class Report:
    runtime: float
    not_min: int
    not_max: int
    not_mode: int
    cpu_mean: float
    cpu_stdev: float
    peak_rss_bytes: int
    main_cpu_distinct: int
    main_cpu_dwell: dict
    enforcement_events: tuple = ()
    escapee_count: int = 0
    degraded_samples: int = 0
    accel_mean: float | None = None
    job_exit: int | None = None
    termination: dict | None = None

    def to_dict(self) -> dict:
        d = asdict(self)
        d["main_cpu_dwell"] = {str(k): v for k, v in sorted(self.main_cpu_dwell.items())}
        d["enforcement_events"] = [e.to_dict() if isinstance(e, EnforcementEvent) else e
                                   for e in self.enforcement_events]
        return d


def first_mode(values: Sequence[int]) -> int:
    """Most frequent value; ties go to the one seen first."""
    counts: dict[int, int] = {}
    for v in values:
        counts[v] = counts.get(v, 0) + 1
    best = max(counts.values())
    return next(v for v in values if counts[v] == best)


def summarize(series: Sequence[Sample], events: Iterable[EnforcementEvent] = (),
              runtime: float | None = None, escapee_count: int = 0,
              job_exit: int | None = None, termination: dict | None = None) -> Report:
    if not series:
        raise JobjailError("cannot summarize an empty series")
    nots = [s.not_total for s in series]
    # the first sample has no delta basis
    cpu = [s.cpu_percent for s in (series[1:] if len(series) > 1 else series)]
    dwell: dict[int, int] = {}
    for s in series:
        if s.main_cpu_id >= 0:
            dwell[s.main_cpu_id] = dwell.get(s.main_cpu_id, 0) + 1
    accel = [s.accel_util for s in series if s.accel_util is not None]
    return Report(
        runtime=round(series[-1].t if runtime is None else runtime, 3),
        not_min=min(nots),
        not_max=max(nots),
        not_mode=first_mode(nots),
        cpu_mean=round(statistics.fmean(cpu), 2),
        cpu_stdev=round(statistics.pstdev(cpu), 2),
        peak_rss_bytes=max(s.rss_total_bytes for s in series),
        main_cpu_distinct=len(dwell),
        main_cpu_dwell=dwell,
        enforcement_events=tuple(events),
        escapee_count=escapee_count,
        degraded_samples=sum(s.degraded for s in series),
        accel_mean=round(statistics.fmean(accel), 2) if accel else None,
        job_exit=job_exit,
        termination=termination,
    )


# ---------------------------------------------------------------------------
# export / import

def _fmt(x: float | None) -> str:
    return "" if x is None else f"{x:.2f}"


def series_to_csv(series: Sequence[Sample]) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(CSV_COLUMNS)
    for s in series:
        w.writerow([s.t_ms, s.not_total, s.main_cpu_id, _fmt(s.cpu_percent), s.rss_total_bytes,
                    s.process_count, s.zombie_count, _fmt(s.accel_util)])
    return buf.getvalue()


def series_from_csv(text: str) -> list[Sample]:
    rows = list(csv.reader(io.StringIO(text)))
    if not rows or tuple(rows[0]) != CSV_COLUMNS:
        raise ValueError(f"unexpected CSV header {rows[0] if rows else None}")
    out = []
    for row in rows[1:]:
        t_ms, not_total, cpu_id, cpu, rss, procs, zombies, accel = row
        out.append(Sample(int(t_ms), int(not_total), int(cpu_id), float(cpu), int(rss),
                          int(procs), int(zombies), float(accel) if accel else None))
    return out


def _sample_dict(s: Sample) -> dict:
    return {
        "t_ms": s.t_ms,
        "not_total": s.not_total,
        "main_cpu_id": s.main_cpu_id,
        "cpu_percent": s.cpu_percent,
        "rss_bytes": s.rss_total_bytes,
        "process_count": s.process_count,
        "zombie_count": s.zombie_count,
        "accel_util": s.accel_util,
        "degraded": s.degraded,
    }


def _sample_from_dict(d: dict) -> Sample:
    return Sample(d["t_ms"], d["not_total"], d["main_cpu_id"], d["cpu_percent"], d["rss_bytes"],
                  d["process_count"], d["zombie_count"], d.get("accel_util"), d.get("degraded", False))


def to_json(series: Sequence[Sample], report: Report | None, meta: dict) -> str:
    doc = {
        "meta": meta,
        "samples": [_sample_dict(s) for s in series],
        "report": report.to_dict() if report is not None else None,
    }
    return json.dumps(doc, indent=2) + "\n"


def load_json(path) -> tuple[dict, list[Sample], dict | None]:
    doc = json.loads(Path(path).read_text())
    return doc["meta"], [_sample_from_dict(d) for d in doc["samples"]], doc["report"]


def load_series(path) -> list[Sample]:
    path = Path(path)
    text = path.read_text()
    if path.suffix == ".csv" or text.startswith(CSV_COLUMNS[0]):
        return series_from_csv(text)
    return load_json(path)[1]


def companion_path(path, suffix: str) -> Path:
    path = Path(path)
    return path.with_name(path.stem + suffix)


def export(series: Sequence[Sample], report: Report | None, fmt: str, path,
           meta: dict | None = None) -> list[Path]:
    """Write the series (and report) to ``path``; returns the files written.

    ``json`` writes one document with ``meta``, ``samples`` and ``report``.
    ``csv`` writes the samples to ``path`` and the meta/report document to
    ``<stem>.report.json`` next to it.
    """
    meta = dict(meta or {})
    path = Path(path)
    try:
        if fmt == "json":
            path.write_text(to_json(series, report, meta))
            return [path]
        if fmt == "csv":
            path.write_text(series_to_csv(series))
            side = companion_path(path, ".report.json")
            side.write_text(json.dumps({"meta": meta, "report": report.to_dict() if report else None},
                                       indent=2) + "\n")
            return [path, side]
    except OSError as exc:
        raise ReportWriteError(f"cannot write report {path}: {exc}") from exc
    raise ValueError(f"unknown format {fmt!r}")


def cpu_sanity(series: Sequence[Sample]) -> float:
    """Mean cpu_percent with the first (basis-less) sample dropped."""
    values = [s.cpu_percent for s in series[1:]]
    return statistics.fmean(values) if values else math.nan

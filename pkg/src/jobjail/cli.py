"""Command line: ``jobjail run ... -- CMD`` and ``jobjail pymem ...``."""
from __future__ import annotations

import argparse
import json
import logging
import signal
import sys
import threading
from pathlib import Path

from jobjail import orchestrator, pymem
from jobjail.envctl import ThreadLimitSpec, merge_overlay, thread_env
from jobjail.errors import (BackendUnsupported, InvalidCpuSet, JobjailError, ReportWriteError,
                            SpawnError, TraceError, UnknownDescriptor, UsageError)
from jobjail.jail import IsolationBackend, default_backend
from jobjail.limits import DEFAULT_POLL_INTERVAL, LimitPolicy, MemBackend
from jobjail.orchestrator import JobSpec, TelemetryConfig
from jobjail.telemetry import DEFAULT_SAMPLE_INTERVAL
from jobjail.units import parse_cpuset, parse_duration, parse_size

log = logging.getLogger("jobjail")

EXIT_SPAWN = 127

BACKENDS = {
    "pg": IsolationBackend.PROCESS_GROUP,
    "process-group": IsolationBackend.PROCESS_GROUP,
    "subreaper": IsolationBackend.SUBREAPER,
    "pidns": IsolationBackend.PID_NAMESPACE,
    "pid-namespace": IsolationBackend.PID_NAMESPACE,
}
MEM_BACKENDS = {
    "cgroup": MemBackend.GROUP_CONTROLLER,
    "rlimit-data": MemBackend.DATA_SEGMENT,
    "poll": MemBackend.POLLING,
    "rlimit-rss": MemBackend.RESIDENT_SET_LEGACY,
}

# built-in defaults for `run`; the parser itself defaults to None so that
# flags > config file > these can be told apart
RUN_DEFAULTS = {
    "backend": None,
    "mem_limit": None,
    "mem_backend": "cgroup",
    "poll_interval": f"{DEFAULT_POLL_INTERVAL}s",
    "cpus": None,
    "omp_threads": None,
    "mkl_threads": None,
    "numexpr_threads": None,
    "mkl_sequential": False,
    "extra_thread_env": False,
    "grace": f"{orchestrator.DEFAULT_GRACE}s",
    "sample_interval": f"{DEFAULT_SAMPLE_INTERVAL}s",
    "report": None,
    "format": "json",
    "walltime": None,
    "escape_action": "kill",
    "env": [],
    "workdir": None,
    "no_plot": False,
    "accel_mock": None,
}


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(message)


def _int_ge1(text: str) -> int:
    try:
        value = int(text)
    except ValueError:
        raise argparse.ArgumentTypeError(f"not an integer: {text!r}") from None
    if value < 1:
        raise argparse.ArgumentTypeError(f"must be >= 1: {text!r}")
    return value


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="jobjail", description="Contain, limit and monitor a batch job.")
    parser.add_argument("-v", "--verbose", action="count", default=0)
    sub = parser.add_subparsers(dest="cmd", required=True, parser_class=_Parser)

    run = sub.add_parser("run", help="run a command inside a jail")
    run.add_argument("--config", type=Path, help="JSON file with option defaults")
    run.add_argument("--backend", choices=sorted(BACKENDS))
    run.add_argument("--mem-limit", metavar="SIZE")
    run.add_argument("--mem-backend", choices=sorted(MEM_BACKENDS))
    run.add_argument("--poll-interval", metavar="DUR")
    run.add_argument("--cpus", metavar="CPUSET")
    run.add_argument("--omp-threads", type=_int_ge1, metavar="N")
    run.add_argument("--mkl-threads", type=_int_ge1, metavar="N")
    run.add_argument("--numexpr-threads", type=_int_ge1, metavar="N")
    run.add_argument("--mkl-sequential", action="store_true", default=None)
    run.add_argument("--extra-thread-env", action="store_true", default=None,
                     help="also set OPENBLAS_NUM_THREADS and VECLIB_MAXIMUM_THREADS")
    run.add_argument("--grace", metavar="DUR")
    run.add_argument("--sample-interval", metavar="DUR")
    run.add_argument("--report", metavar="PATH")
    run.add_argument("--format", choices=("json", "csv"))
    run.add_argument("--walltime", metavar="DUR")
    run.add_argument("--escape-action", choices=("kill", "report"))
    run.add_argument("--env", action="append", metavar="K=V")
    run.add_argument("--workdir")
    run.add_argument("--no-plot", action="store_true", default=None)
    run.add_argument("--accel-mock", metavar="FILE")
    run.add_argument("command", nargs=argparse.REMAINDER)

    pm = sub.add_parser("pymem", help="interpreter memory model")
    pm_sub = pm.add_subparsers(dest="pymem_cmd", required=True, parser_class=_Parser)
    sim = pm_sub.add_parser("simulate", help="replay an allocation trace")
    sim.add_argument("--trace", required=True, type=Path)
    sim.add_argument("--arena-kb", type=_int_ge1, default=pymem.DEFAULT_ARENA_BYTES // 1024)
    sim.add_argument("--small-threshold", type=_int_ge1, default=pymem.DEFAULT_SMALL_THRESHOLD)
    sim.add_argument("--gc", default=",".join(map(str, pymem.DEFAULT_GC_THRESHOLDS)))
    sim.add_argument("--sizes", type=Path)
    sim.add_argument("--out", required=True, type=Path)
    sim.add_argument("--no-plot", action="store_true")
    size = pm_sub.add_parser("size", help="look up an object size")
    size.add_argument("value_class")
    size.add_argument("--sizes", type=Path)
    return parser


def _load_config(path: Path) -> dict:
    try:
        data = json.loads(path.read_text())
    except (OSError, json.JSONDecodeError) as exc:
        raise UsageError(f"cannot read config {path}: {exc}") from exc
    if not isinstance(data, dict):
        raise UsageError(f"config {path}: expected a JSON object")
    out = {}
    for key, value in data.items():
        dest = key.replace("-", "_")
        if dest not in RUN_DEFAULTS:
            raise UsageError(f"config {path}: unknown option {key!r}")
        if dest == "env" and isinstance(value, dict):
            value = [f"{k}={v}" for k, v in value.items()]
        out[dest] = value
    return out


def _resolve(ns: argparse.Namespace) -> dict:
    """Flags, then config file, then built-in defaults."""
    config = _load_config(ns.config) if ns.config else {}
    merged = {}
    for key, default in RUN_DEFAULTS.items():
        flag = getattr(ns, key)
        merged[key] = flag if flag is not None else config.get(key, default)
    merged["_explicit"] = {k for k in RUN_DEFAULTS if getattr(ns, k) is not None or k in config}
    return merged


def _env_pairs(items) -> dict[str, str]:
    out = {}
    for item in items or ():
        key, sep, value = str(item).partition("=")
        if not sep or not key:
            raise UsageError(f"--env expects K=V, got {item!r}")
        out[key] = value
    return out


def _opt(value, parse):
    return None if value is None else parse(str(value))


def spec_from_namespace(ns: argparse.Namespace) -> JobSpec:
    o = _resolve(ns)
    command = list(ns.command)
    if command and command[0] == "--":
        command = command[1:]
    if not command:
        raise UsageError("run: missing command after '--'")
    try:
        backend = BACKENDS[o["backend"]] if o["backend"] is not None else default_backend()
        mem_backend = MEM_BACKENDS[o["mem_backend"]]
    except KeyError as exc:
        raise UsageError(f"unknown backend {exc.args[0]!r}") from None
    try:
        threads = ThreadLimitSpec(o["mkl_threads"], o["numexpr_threads"], o["omp_threads"],
                                  bool(o["mkl_sequential"]), bool(o["extra_thread_env"]))
        limits = LimitPolicy(
            mem_limit_bytes=_opt(o["mem_limit"], parse_size),
            mem_backend=mem_backend,
            poll_interval=parse_duration(str(o["poll_interval"])),
            cpuset=_opt(o["cpus"], parse_cpuset),
            thread_env=threads,
        )
        report = Path(o["report"]) if o["report"] else None
        telemetry = TelemetryConfig(
            enabled=True,
            interval=parse_duration(str(o["sample_interval"])),
            output=report,
            format=o["format"],
            plot=not o["no_plot"],
            accel_mock=Path(o["accel_mock"]) if o["accel_mock"] else None,
        )
        return JobSpec(
            command=tuple(command),
            workdir=o["workdir"],
            env_overlay=merge_overlay(thread_env(threads), _env_pairs(o["env"])),
            backend=backend,
            limits=limits,
            grace=parse_duration(str(o["grace"])),
            telemetry=telemetry,
            report_path=report,
            walltime=_opt(o["walltime"], parse_duration),
            escape_action=o["escape_action"],
            mem_fallback="mem_backend" not in o["_explicit"],
        )
    except ValueError as exc:
        raise UsageError(str(exc)) from exc


def parse_args(argv: list[str]) -> JobSpec:
    """Parse a ``run`` command line into a JobSpec with defaults applied."""
    ns = build_parser().parse_args(argv)
    if ns.cmd != "run":
        raise UsageError("parse_args only handles the run subcommand")
    return spec_from_namespace(ns)


def _cmd_run(ns) -> int:
    spec = spec_from_namespace(ns)
    stop = threading.Event()

    def on_signal(signum, frame):
        log.warning("received %s, terminating the jail", signal.Signals(signum).name)
        stop.set()

    for sig in (signal.SIGTERM, signal.SIGINT, signal.SIGHUP):
        signal.signal(sig, on_signal)
    outcome = orchestrator.run(spec, stop_event=stop)
    r = outcome.report
    print(f"jobjail: jail {outcome.jail_id} ({outcome.backend.value}) job_exit={outcome.job_exit} "
          f"exit={outcome.exit_code} runtime={r.runtime:.2f}s not_mode={r.not_mode} "
          f"cpu={r.cpu_mean:.1f}%+-{r.cpu_stdev:.1f} peak_rss={r.peak_rss_bytes} "
          f"escapees={r.escapee_count} survivors={len(outcome.termination.survivors)}",
          file=sys.stderr)
    for event in outcome.enforcement_events:
        print(f"jobjail: memory {event.backend.value}: {event.action.value} "
              f"(observed {event.observed_bytes} / limit {event.limit_bytes})", file=sys.stderr)
    for note in outcome.notes:
        print(f"jobjail: note: {note}", file=sys.stderr)
    for path in outcome.files:
        print(path)
    return outcome.exit_code


def _cmd_pymem(ns) -> int:
    sizes = pymem.SizeTable.load(ns.sizes) if ns.sizes else pymem.SizeTable()
    if ns.pymem_cmd == "size":
        print(pymem.object_size(ns.value_class, sizes))
        return 0
    try:
        arena = pymem.ArenaConfig(ns.arena_kb * 1024, ns.small_threshold)
        gc = pymem.GcConfig.parse(ns.gc)
    except ValueError as exc:
        raise UsageError(str(exc)) from exc
    trace = pymem.AllocTrace.load(ns.trace, sizes)
    timeline = None if ns.no_plot else pymem.Timeline()
    estimate = pymem.simulate(trace, arena, gc, timeline)
    doc = pymem.estimate_report(trace, arena, gc, estimate)
    try:
        ns.out.write_text(json.dumps(doc, indent=2) + "\n")
        print(ns.out)
        if timeline is not None:
            from jobjail.plotting import render_memory_timeline

            print(render_memory_timeline(timeline.event, timeline.reserved, timeline.live,
                                         ns.out.with_suffix(".png"), arena.arena_bytes))
    except OSError as exc:
        raise ReportWriteError(f"cannot write {ns.out}: {exc}") from exc
    return 0


def main(argv: list[str] | None = None) -> int:
    argv = sys.argv[1:] if argv is None else argv
    try:
        ns = build_parser().parse_args(argv)
        logging.basicConfig(level=logging.WARNING - 10 * min(ns.verbose, 2),
                            format="jobjail: %(levelname)s: %(message)s")
        if ns.cmd == "run":
            return _cmd_run(ns)
        return _cmd_pymem(ns)
    except (UsageError, InvalidCpuSet, TraceError, UnknownDescriptor) as exc:
        print(f"jobjail: error: {exc}", file=sys.stderr)
        return orchestrator.EXIT_USAGE
    except BackendUnsupported as exc:
        print(f"jobjail: unsupported: {exc}", file=sys.stderr)
        return orchestrator.EXIT_UNSUPPORTED
    except SpawnError as exc:
        print(f"jobjail: spawn failed: {exc}", file=sys.stderr)
        return EXIT_SPAWN
    except ReportWriteError as exc:
        print(f"jobjail: {exc}", file=sys.stderr)
        return orchestrator.EXIT_REPORT_WRITE
    except JobjailError as exc:
        print(f"jobjail: error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())

"""Batch-job supervisor: containment, resource limits, telemetry, memory model."""
from jobjail.errors import (BackendUnsupported, JobjailError, SpawnError, UsageError)
from jobjail.jail import IsolationBackend, create_jail
from jobjail.limits import LimitPolicy, MemBackend
from jobjail.orchestrator import JobSpec, RunOutcome, TelemetryConfig, run

__version__ = "0.1.0"

__all__ = [
    "BackendUnsupported", "IsolationBackend", "JobSpec", "JobjailError", "LimitPolicy",
    "MemBackend", "RunOutcome", "SpawnError", "TelemetryConfig", "UsageError", "create_jail", "run",
]

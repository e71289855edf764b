"""Exception hierarchy shared by all jobjail modules."""


class JobjailError(Exception):
    """Base class for every error raised by jobjail."""


class UsageError(JobjailError):
    """Bad command line, config file or value syntax."""


class BackendUnsupported(JobjailError):
    """The requested isolation or limit backend cannot work on this host."""


class SpawnError(JobjailError):
    """The job could not be started inside the jail."""


class ReportWriteError(JobjailError):
    """Writing the telemetry report failed (after containment completed)."""


class PartialSnapshotError(JobjailError):
    """A process-table read failed part way; ``table`` holds what was read."""

    def __init__(self, message, table=None):
        super().__init__(message)
        self.table = table


class InvalidCpuSet(JobjailError):
    """A CPU id outside the host range was requested."""


class UnknownDescriptor(JobjailError):
    """Value class missing from a size table."""


class TraceError(JobjailError):
    """Malformed allocation trace."""

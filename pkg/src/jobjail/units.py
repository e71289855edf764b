"""Parsers for the SIZE, DUR and CPUSET command line value types."""
from __future__ import annotations

import re

from jobjail.errors import UsageError

_SIZE_RE = re.compile(r"^\s*(\d+(?:\.\d+)?)\s*([kmgt]?)i?b?\s*$", re.IGNORECASE)
_SIZE_SHIFT = {"": 0, "k": 10, "m": 20, "g": 30, "t": 40}

_DUR_RE = re.compile(r"^\s*(\d+(?:\.\d+)?)\s*(ms|s|m)?\s*$", re.IGNORECASE)
_DUR_SCALE = {"ms": 0.001, "s": 1.0, "m": 60.0, None: 1.0}


def parse_size(text: str) -> int:
    """Parse ``5G``/``512M``/``1024`` into bytes (suffixes are powers of 1024)."""
    m = _SIZE_RE.match(str(text))
    if not m:
        raise UsageError(f"unparsable size: {text!r}")
    value = float(m.group(1)) * (1 << _SIZE_SHIFT[m.group(2).lower()])
    if value != int(value):
        raise UsageError(f"size is not a whole number of bytes: {text!r}")
    return int(value)


def parse_duration(text: str) -> float:
    """Parse ``500ms``/``2s``/``1m``/``3`` into seconds."""
    m = _DUR_RE.match(str(text))
    if not m:
        raise UsageError(f"unparsable duration: {text!r}")
    unit = m.group(2).lower() if m.group(2) else None
    return float(m.group(1)) * _DUR_SCALE[unit]


def parse_cpuset(text: str) -> frozenset[int]:
    """Parse a comma/range CPU list such as ``0-3,8``."""
    cpus: set[int] = set()
    for part in str(text).split(","):
        part = part.strip()
        if not part:
            raise UsageError(f"empty element in cpuset {text!r}")
        lo, sep, hi = part.partition("-")
        try:
            start = int(lo)
            stop = int(hi) if sep else start
        except ValueError:
            raise UsageError(f"unparsable cpuset: {text!r}") from None
        if start < 0 or stop < start:
            raise UsageError(f"bad cpu range {part!r}")
        cpus.update(range(start, stop + 1))
    return frozenset(cpus)


def format_cpuset(cpus) -> str:
    """Inverse of :func:`parse_cpuset`, collapsing runs into ranges."""
    out = []
    ordered = sorted(cpus)
    i = 0
    while i < len(ordered):
        j = i
        while j + 1 < len(ordered) and ordered[j + 1] == ordered[j] + 1:
            j += 1
        out.append(str(ordered[i]) if i == j else f"{ordered[i]}-{ordered[j]}")
        i = j + 1
    return ",".join(out)

"""PASS/FAIL lines for the acceptance run, also collected into the terminal summary."""
import contextlib

RESULTS: list[str] = []


def record(label: str, ok: bool, detail: str = "") -> None:
    line = f"{'PASS' if ok else 'FAIL'} {label}" + (f" ({detail})" if detail else "")
    RESULTS.append(line)
    print(line, flush=True)


@contextlib.contextmanager
def criterion(label: str):
    """Record FAIL when the body raises, PASS when it finishes.

    The body may append a detail string to the yielded list.
    """
    notes: list[str] = []
    try:
        yield notes
    except BaseException as exc:
        record(label, False, "; ".join(notes + [f"{type(exc).__name__}: {exc}".strip()]))
        raise
    record(label, True, "; ".join(notes))

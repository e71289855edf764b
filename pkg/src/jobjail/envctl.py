"""Thread-limit environment overlay for numerical libraries."""
from __future__ import annotations

from dataclasses import dataclass
from typing import Mapping

MKL_THREADING_LAYER = "MKL_THREADING_LAYER"
MKL_NUM_THREADS = "MKL_NUM_THREADS"
NUMEXPR_NUM_THREADS = "NUMEXPR_NUM_THREADS"
OMP_NUM_THREADS = "OMP_NUM_THREADS"

THREAD_ENV_NAMES = (MKL_THREADING_LAYER, MKL_NUM_THREADS, NUMEXPR_NUM_THREADS, OMP_NUM_THREADS)

# opt-in aliases honoured by other BLAS builds
EXTRA_ALIASES = ("OPENBLAS_NUM_THREADS", "VECLIB_MAXIMUM_THREADS")


@dataclass(frozen=True)
class ThreadLimitSpec:
    mkl_threads: int | None = None
    numexpr_threads: int | None = None
    omp_threads: int | None = None
    mkl_sequential: bool = False
    extra_aliases: bool = False

    def __post_init__(self):
        for name in ("mkl_threads", "numexpr_threads", "omp_threads"):
            value = getattr(self, name)
            if value is not None and (not isinstance(value, int) or value < 1):
                raise ValueError(f"{name} must be an integer >= 1, got {value!r}")


def thread_env(spec: ThreadLimitSpec) -> dict[str, str]:
    """Environment variables limiting library thread pools.

    Only the variables for fields that are set are returned; with every
    field absent the result is empty.  The aliases in ``EXTRA_ALIASES``
    follow ``omp_threads`` and are only emitted when ``extra_aliases`` is on.
    """
    env: dict[str, str] = {}
    if spec.mkl_sequential:
        env[MKL_THREADING_LAYER] = "SEQUENTIAL"
    if spec.mkl_threads is not None:
        env[MKL_NUM_THREADS] = str(spec.mkl_threads)
    if spec.numexpr_threads is not None:
        env[NUMEXPR_NUM_THREADS] = str(spec.numexpr_threads)
    if spec.omp_threads is not None:
        env[OMP_NUM_THREADS] = str(spec.omp_threads)
        if spec.extra_aliases:
            for alias in EXTRA_ALIASES:
                env[alias] = str(spec.omp_threads)
    return env


def merge_overlay(thread_overlay: Mapping[str, str], user_overlay: Mapping[str, str]) -> dict[str, str]:
    """Last writer wins; explicit user variables override the thread overlay."""
    merged = dict(thread_overlay)
    merged.update(user_overlay)
    return merged


def job_environment(base: Mapping[str, str], overlay: Mapping[str, str]) -> dict[str, str]:
    env = dict(base)
    env.update(overlay)
    return env

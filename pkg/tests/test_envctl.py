import pytest
from hypothesis import given, strategies as st

from jobjail.envctl import (EXTRA_ALIASES, THREAD_ENV_NAMES, ThreadLimitSpec, job_environment,
                            merge_overlay, thread_env)


def test_full_thread_env():
    env = thread_env(ThreadLimitSpec(1, 1, 1, True))
    assert env == {
        "MKL_THREADING_LAYER": "SEQUENTIAL",
        "MKL_NUM_THREADS": "1",
        "NUMEXPR_NUM_THREADS": "1",
        "OMP_NUM_THREADS": "1",
    }


def test_empty_spec_gives_empty_env():
    assert thread_env(ThreadLimitSpec()) == {}


def test_omp_only():
    assert thread_env(ThreadLimitSpec(omp_threads=16)) == {"OMP_NUM_THREADS": "16"}


def test_aliases_are_opt_in():
    assert set(thread_env(ThreadLimitSpec(omp_threads=2))) == {"OMP_NUM_THREADS"}
    env = thread_env(ThreadLimitSpec(omp_threads=2, extra_aliases=True))
    assert {k: env[k] for k in EXTRA_ALIASES} == {k: "2" for k in EXTRA_ALIASES}


@pytest.mark.parametrize("bad", [0, -1, 1.5, "2"])
def test_rejects_bad_counts(bad):
    with pytest.raises(ValueError):
        ThreadLimitSpec(omp_threads=bad)


counts = st.none() | st.integers(1, 256)


@given(counts, counts, counts, st.booleans())
def test_keys_are_documented_and_deterministic(a, b, g, seq):
    spec = ThreadLimitSpec(a, b, g, seq)
    env = thread_env(spec)
    assert set(env) <= set(THREAD_ENV_NAMES)
    assert env == thread_env(spec)
    assert ("MKL_THREADING_LAYER" in env) == seq
    assert len(env) == sum(v is not None for v in (a, b, g)) + seq


@given(st.dictionaries(st.sampled_from(THREAD_ENV_NAMES + ("FOO",)), st.text(max_size=4)))
def test_user_overlay_wins(user):
    thread = thread_env(ThreadLimitSpec(2, 2, 2, True))
    merged = merge_overlay(thread, user)
    for key, value in user.items():
        assert merged[key] == value
    for key in set(thread) - set(user):
        assert merged[key] == thread[key]


def test_job_environment_is_inherited_plus_overlay():
    base = {"PATH": "/bin", "OMP_NUM_THREADS": "8"}
    assert job_environment(base, {"OMP_NUM_THREADS": "1"}) == {"PATH": "/bin", "OMP_NUM_THREADS": "1"}
    assert base["OMP_NUM_THREADS"] == "8"

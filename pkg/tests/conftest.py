import os
import sys

import pytest

sys.path.insert(0, os.path.dirname(__file__))

from jobjail import probes  # noqa: E402

LINUX = sys.platform.startswith("linux")


def pytest_collection_modifyitems(config, items):
    if LINUX:
        return
    skip = pytest.mark.skip(reason="needs Linux process facilities")
    for item in items:
        if "linux" in item.keywords:
            item.add_marker(skip)


@pytest.fixture(scope="session")
def probe_bin():
    if not LINUX:
        pytest.skip("probes need Linux")
    return probes.probe_binary()


@pytest.fixture
def sidechannel(tmp_path):
    path = tmp_path / "pids"
    path.touch()
    return path


@pytest.fixture
def probe_env(sidechannel):
    env = dict(os.environ)
    env[probes.SIDECHANNEL_ENV] = str(sidechannel)
    return env


def pytest_terminal_summary(terminalreporter):
    from verdicts import RESULTS

    if RESULTS:
        terminalreporter.section("acceptance criteria")
        for line in RESULTS:
            terminalreporter.write_line(line)

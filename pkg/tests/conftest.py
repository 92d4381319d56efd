import numpy as np
import pytest

_CRITERIA = pytest.StashKey[dict]()


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


def pytest_configure(config):
    config.stash[_CRITERIA] = {}


@pytest.fixture
def report(request):
    """report(n, ok, detail): record one acceptance line, then assert ``ok``."""
    lines = request.config.stash[_CRITERIA]

    def _report(n: int, ok: bool, detail: str) -> None:
        line = f"CRITERION {n:2d}: {'PASS' if ok else 'FAIL'} | {detail}"
        lines[n] = line
        print(line)
        assert ok, detail

    return _report


def pytest_terminal_summary(terminalreporter, config):
    lines = config.stash[_CRITERIA]
    if lines:
        terminalreporter.section("acceptance criteria")
        for n in sorted(lines):
            terminalreporter.write_line(lines[n])

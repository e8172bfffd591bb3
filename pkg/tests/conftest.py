import sys
from pathlib import Path

import hypothesis
import numpy as np
import pytest

sys.path.insert(0, str(Path(__file__).parent))

hypothesis.settings.register_profile("default", max_examples=60, deadline=None)
hypothesis.settings.register_profile("fast", max_examples=10, deadline=None)
hypothesis.settings.load_profile("default")

from crossdenoise.ingest import split, synth_generate  # noqa: E402


@pytest.fixture(scope="session")
def tiny_split():
    ds = synth_generate(50, 40, 4, 0.3, seed=3, density=0.1)
    return split(ds, seed=3)


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


_ACCEPTANCE = pytest.StashKey[list]()


def pytest_configure(config):
    config.stash[_ACCEPTANCE] = []


@pytest.fixture
def criterion(request):
    """Record one acceptance line: criterion(n, ok, detail). Fails the test when not ok."""
    lines = request.config.stash[_ACCEPTANCE]

    def record(n, ok, detail):
        line = f"{'PASS' if ok else 'FAIL'}  criterion {n:>2}: {detail}"
        print(line)
        lines.append(line)
        assert ok, line

    return record


def pytest_terminal_summary(terminalreporter, config):
    lines = config.stash.get(_ACCEPTANCE, [])
    if lines:
        terminalreporter.section("acceptance criteria")
        for line in sorted(lines, key=lambda s: int(s.split("criterion")[1].split(":")[0])):
            terminalreporter.write_line(line)

import numpy as np
import pytest

from spatwheal.synth import SynthConfig, generate_case

# 48 x 32 mm field at 0.5 mm/px keeps every prick site inside the frame
TINY = SynthConfig(height=96, width=64, mm_per_pixel=0.5)


@pytest.fixture(scope="session")
def tiny_config():
    return TINY


@pytest.fixture(scope="session")
def tiny_cases():
    return [generate_case(TINY, seed=100 + i, case_id=f"t{i:02d}",
                          site=TINY.sites[i % len(TINY.sites)]).to_case(TINY) for i in range(8)]


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


_LINES = pytest.StashKey[list]()


def pytest_configure(config):
    config.stash[_LINES] = []


@pytest.fixture
def criterion(request):
    """Record one acceptance line; the summary prints them all at the end."""
    def record(number, title, ok, detail):
        line = f"{'PASS' if ok else 'FAIL'}  criterion {number}: {title} ({detail})"
        request.config.stash[_LINES].append(line)
        print(line)
        return ok
    return record


def pytest_terminal_summary(terminalreporter, exitstatus, config):
    lines = config.stash.get(_LINES, [])
    if lines:
        terminalreporter.section("acceptance criteria")
        for line in sorted(lines, key=lambda s: int(s.split("criterion ")[1].split(":")[0])):
            terminalreporter.write_line(line)

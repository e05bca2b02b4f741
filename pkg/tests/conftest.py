import time
from contextlib import contextmanager

import pytest

from emrtdlab.lab import Lab, sample_profile

ACCEPTANCE = pytest.StashKey[dict]()


@pytest.fixture(scope="session")
def lab():
    """Random holder issued under a fresh lab PKI; shared read-only."""
    return Lab.create(seed=0)


@pytest.fixture(scope="session")
def sample_lab():
    """The fixed documentation holder (PIN 123456, CAN 654321)."""
    return Lab.create(seed="sample", profile=sample_profile())


@pytest.fixture
def criterion(request):
    """Context manager recording PASS/FAIL and wall time for one acceptance criterion."""
    results = request.config.stash.setdefault(ACCEPTANCE, {})

    @contextmanager
    def record(number, title):
        start = time.perf_counter()
        ok = False
        try:
            yield
            ok = True
        finally:
            results[number] = (title, ok, time.perf_counter() - start)

    return record


def pytest_terminal_summary(terminalreporter, exitstatus, config):
    results = config.stash.get(ACCEPTANCE, {})
    if not results:
        return
    terminalreporter.section("acceptance criteria")
    for number in sorted(results):
        title, ok, seconds = results[number]
        verdict = "PASS" if ok else "FAIL"
        terminalreporter.write_line(f"criterion {number:2d}: {verdict}  {title} ({seconds:.1f} s)")

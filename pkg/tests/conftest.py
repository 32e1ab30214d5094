import pytest

from ledcnet.config import toy_preset
from ledcnet.data import make_probe_set

ACCEPTANCE_LINES = []


@pytest.fixture(scope="session")
def probe_manifest(tmp_path_factory):
    return make_probe_set(tmp_path_factory.mktemp("probe"), n=8, size=64, seed=0)


@pytest.fixture
def toy_cfg():
    return toy_preset()


@pytest.fixture
def acceptance():
    """Record one PASS/FAIL line for an acceptance criterion, then assert it."""
    def record(number, title, ok, detail=""):
        ACCEPTANCE_LINES.append(
            f"[{'PASS' if ok else 'FAIL'}] criterion {number}: {title}"
            + (f" ({detail})" if detail else ""))
        print(ACCEPTANCE_LINES[-1])
        assert ok, f"criterion {number} failed: {detail}"
    return record


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE_LINES, key=lambda s: int(s.split()[2].rstrip(":"))):
            terminalreporter.write_line(line)

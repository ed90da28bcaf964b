import pytest

from gdrq.experiments import build_run
from gdrq.train import DatasetSpec, Schedule, generate_toy_dataset


@pytest.fixture(scope="session")
def tiny_data():
    return generate_toy_dataset(DatasetSpec(n_train=128, n_test=64, size=8, seed=3))


@pytest.fixture
def tiny_run(tiny_data):
    def make(**kw):
        kw.setdefault("widths", (4, 8, 8))
        kw.setdefault("schedule", Schedule(epochs=3, batch_size=32))
        return build_run(tiny_data, **kw)
    return make


def pytest_terminal_summary(terminalreporter):
    """Repeat the acceptance lines, which pytest captures for passing tests."""
    lines = []
    for outcome in ("passed", "failed"):
        for rep in terminalreporter.stats.get(outcome, []):
            if rep.when == "call" and "test_acceptance" in rep.nodeid:
                lines += [l for l in rep.capstdout.splitlines() if l.startswith("criterion ")]
    if lines:
        terminalreporter.section("acceptance")
        for l in sorted(lines, key=lambda s: int(s.split()[1].rstrip(":"))):
            terminalreporter.write_line(l)

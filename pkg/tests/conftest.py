import numpy as np
import pytest

from cgr.scene_synth import build_rank_table, generate_dataset


def pytest_configure(config):
    config.addinivalue_line("markers", "slow: long-running training checks")


@pytest.fixture(scope="session")
def table():
    return build_rank_table(0, 2, 2, 8)


@pytest.fixture(scope="session")
def small_data(table):
    return generate_dataset(11, 20, table)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


ACCEPTANCE: list[str] = []


def record(criterion: str, ok: bool, detail: str) -> bool:
    line = f"{'PASS' if ok else 'FAIL'} [{criterion}] {detail}"
    ACCEPTANCE.append(line)
    print(line)
    return ok


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE:
            terminalreporter.write_line(line)

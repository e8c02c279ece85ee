import numpy as np
import pytest

from wsnas.operators import SearchSpace, desk_operators
from wsnas.tasks import TaskSpec, gen_batch


@pytest.fixture
def small_space():
    return SearchSpace(3, tuple(desk_operators(8, 4)), 8, 12, 6)


@pytest.fixture
def small_task():
    return TaskSpec(vocab=12, seq_len=6, mask_rate=0.3)


@pytest.fixture
def small_batch(small_task):
    return gen_batch(small_task, np.random.default_rng(0), 4)


ACCEPTANCE_LINES: list[str] = []


@pytest.fixture(scope="session")
def acceptance_log():
    return ACCEPTANCE_LINES


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)

import numpy as np
import pytest

from onlinectc.ctc import log_softmax


def random_log_y(rng, T, K, scale=2.0):
    return log_softmax(rng.normal(scale=scale, size=(T, K)))


def random_target(rng, num_labels, max_len):
    n = int(rng.integers(0, max_len + 1))
    return [int(t) for t in rng.integers(1, num_labels + 1, size=n)]


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


# acceptance reporting: one line per criterion in the terminal summary
ACCEPTANCE: dict[str, tuple[bool, str]] = {}


@pytest.fixture
def acceptance():
    def record(criterion: str, ok: bool, detail: str) -> None:
        ACCEPTANCE[criterion] = (bool(ok), detail)
        print(f"{criterion} {'PASS' if ok else 'FAIL'}: {detail}")

    return record


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for criterion in sorted(ACCEPTANCE):
        ok, detail = ACCEPTANCE[criterion]
        terminalreporter.write_line(f"{criterion} {'PASS' if ok else 'FAIL'}: {detail}")

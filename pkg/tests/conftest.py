import sys
from pathlib import Path

import numpy as np
import pytest

sys.path.insert(0, str(Path(__file__).parent))

from synth import write_dataset  # noqa: E402


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture(scope="session")
def synthetic_dataset(tmp_path_factory):
    """10 patients, 2 channels, labels 0..3, spacing (1,1,4), mixed directions."""
    root = tmp_path_factory.mktemp("synthetic")
    return write_dataset(root, n_patients=10)


@pytest.fixture
def small_dataset(tmp_path):
    return write_dataset(tmp_path / "data", n_patients=4, shape=(28, 28, 10), seed=7)


# one PASS/FAIL line per acceptance criterion, repeated in the terminal summary
ACCEPTANCE_LINES: list[str] = []


class Criterion:
    def __init__(self, number: int, title: str):
        self.number = number
        self.title = title
        self.details: list[str] = []

    def note(self, text: str) -> None:
        self.details.append(text)

    def __enter__(self):
        return self

    def __exit__(self, exc_type, exc, tb):
        detail = "; ".join(self.details)
        if exc is None:
            line = f"PASS criterion {self.number}: {self.title} ({detail})"
        else:
            reason = str(exc).strip().splitlines()[0] if str(exc).strip() else exc_type.__name__
            line = f"FAIL criterion {self.number}: {self.title} ({detail}; {reason})"
        ACCEPTANCE_LINES.append(line)
        print(line)
        return False


@pytest.fixture
def criterion():
    return Criterion


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)

import numpy as np
import pytest

from ghostpose.config import from_dict


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture
def small_cfg():
    """A model small enough for fast forward/backward tests."""
    return from_dict(
        {
            "scene": {"image_size": 32},
            "model": {"d": 12, "heads": 2, "layers": 2, "encoder_widths": [4, 8, 8]},
            "ghosts": {"train_points": 30, "eval_points": 60},
            "train": {"n_demos": 3, "batch_size": 2, "steps": 3, "log_every": 0},
            "eval": {"episodes": 3},
        }
    )


# one line per acceptance criterion, printed after the run so it survives output capture
ACCEPTANCE_LINES: dict[int, str] = {}


@pytest.fixture
def criterion():
    def record(number: int, title: str, ok: bool, detail: str) -> None:
        line = f"criterion {number} {'PASS' if ok else 'FAIL'}: {title} ({detail})"
        ACCEPTANCE_LINES[number] = line
        print(line)

    return record


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for number in sorted(ACCEPTANCE_LINES):
            terminalreporter.write_line(ACCEPTANCE_LINES[number])

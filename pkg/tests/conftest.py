import pytest
import torch

from feedbackdet.config import model_preset
from feedbackdet.model import FeedbackDetector


@pytest.fixture
def tiny_cfg():
    return model_preset("tiny")


@pytest.fixture(scope="session")
def tiny_model():
    torch.manual_seed(0)
    return FeedbackDetector(model_preset("tiny")).eval()


ACCEPTANCE_LINES = []


def record_criterion(number, name, passed, detail):
    """Collect one line per acceptance criterion; printed in the terminal summary."""
    line = f"[{'PASS' if passed else 'FAIL'}] criterion {number:>2}: {name} -- {detail}"
    ACCEPTANCE_LINES.append(line)
    print(line)
    return passed


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)

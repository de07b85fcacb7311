from __future__ import annotations

import numpy as np
import pytest

from foctta.data import generate_source
from foctta.nn import CNNConfig, build_reference_cnn
from foctta.train import pretrain

# (criterion, passed, detail) lines recorded by test_acceptance.py
ACCEPTANCE_LINES: list[tuple[int, bool, str]] = []


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE_LINES:
        return
    terminalreporter.section("acceptance criteria")
    for num, ok, detail in sorted(ACCEPTANCE_LINES):
        terminalreporter.write_line(f"criterion {num:>2}: {'PASS' if ok else 'FAIL'}  {detail}")


@pytest.fixture(scope="session")
def small_source():
    return generate_source(300, 3, seed=5)


@pytest.fixture(scope="session")
def trained_small(small_source):
    """A briefly trained float32 CNN on three classes; clone before mutating."""
    model = build_reference_cnn(CNNConfig(num_classes=3, dtype="float32", seed=1))
    pretrain(model, small_source, epochs=2, seed=1)
    return model


@pytest.fixture
def rng():
    return np.random.default_rng(1234)

from __future__ import annotations

import numpy as np
import pytest
from hypothesis import settings

from gapl.config import TrainConfig
from gapl.data import GenSpec, generate, merge
from gapl.trainer import train

settings.register_profile("gapl", max_examples=60, deadline=None, derandomize=True)
settings.load_profile("gapl")

CANONICAL_SPEC = GenSpec(d=64, N=49, M=10, D=2, shots=16, seed=7)


@pytest.fixture(scope="session")
def canonical_data():
    return generate(CANONICAL_SPEC)


@pytest.fixture(scope="session")
def canonical_test(canonical_data):
    return merge([canonical_data.test[k] for k in sorted(canonical_data.test)])


@pytest.fixture(scope="session")
def canonical_run(canonical_data):
    return train(canonical_data.train, TrainConfig())


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


ACCEPTANCE = pytest.StashKey[list]()


@pytest.fixture
def criterion(request):
    """Record one PASS/FAIL line for an acceptance criterion, then assert it."""
    lines = request.config.stash.setdefault(ACCEPTANCE, [])

    def record(number: int, title: str, ok: bool, detail: str = "") -> None:
        line = f"{'PASS' if ok else 'FAIL'}  criterion {number}: {title}" + (f"  [{detail}]" if detail else "")
        lines.append((number, line))
        print(line)
        assert ok, line

    return record


def pytest_terminal_summary(terminalreporter, exitstatus, config):
    lines = config.stash.get(ACCEPTANCE, [])
    if lines:
        terminalreporter.section("acceptance criteria")
        for _, line in sorted(lines):
            terminalreporter.write_line(line)

from __future__ import annotations

import sys
from pathlib import Path

import numpy as np
import pytest

sys.path.insert(0, str(Path(__file__).parent))

from edgeasr.transducer import ToyModelSpec, Transducer, generate_toy_model  # noqa: E402

SMALL_SPEC = ToyModelSpec(n_layers=2, d_model=32, n_heads=4, conv_kernel=5, vocab_size=16, d_dec=32, d_joint=32)


@pytest.fixture(scope="session")
def small_container():
    return generate_toy_model(SMALL_SPEC, seed=7)


@pytest.fixture(scope="session")
def small_model(small_container):
    return Transducer(small_container)


@pytest.fixture(scope="session")
def toy_container():
    return generate_toy_model(seed=1)


@pytest.fixture(scope="session")
def toy_model(toy_container):
    return Transducer(toy_container)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


def pytest_terminal_summary(terminalreporter):
    results = sys.modules.get("test_acceptance")
    results = getattr(results, "RESULTS", None)
    if not results:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(results):
        ok, detail = results[n]
        terminalreporter.write_line(f"criterion {n:2d}: {'PASS' if ok else 'FAIL'}  {detail}")

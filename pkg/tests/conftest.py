import os
from pathlib import Path

import numpy as np
import pytest
from hypothesis import settings

settings.register_profile("default", max_examples=40, deadline=None)
settings.load_profile("default")

ROOT = Path(__file__).resolve().parents[1]
CACHE_DIR = ROOT / ".cache"

_REPORT = []


def record(name, ok, detail=""):
    """Store one acceptance line; printed in the terminal summary."""
    _REPORT.append((name, bool(ok), detail))
    return ok


def pytest_terminal_summary(terminalreporter):
    if not _REPORT:
        return
    terminalreporter.section("acceptance criteria")
    for name, ok, detail in _REPORT:
        terminalreporter.write_line(f"{'PASS' if ok else 'FAIL'}  {name}  {detail}")


@pytest.fixture
def rng():
    return np.random.default_rng(int(os.environ.get("PYTEST_SEED", "1234")))


@pytest.fixture(scope="session")
def cache_dir():
    return CACHE_DIR


def full_space_ops(n):
    """Dense sx_i and sz_i on the 2**n configuration space (bit i set = up)."""
    dim = 1 << n
    states = np.arange(dim)
    sx, sz = [], []
    for i in range(n):
        m = np.zeros((dim, dim))
        m[states ^ (1 << i), states] = 1.0
        sx.append(m)
        sz.append(np.diag(np.where((states >> i) & 1, 1.0, -1.0)))
    return sx, sz


def random_state(rng, dim):
    v = rng.normal(size=dim) + 1j * rng.normal(size=dim)
    return v / np.linalg.norm(v)

import numpy as np
import pytest

from mansu.attribution import attribute
from mansu.net import NetDims, generate_facts, train_base

SMALL = NetDims(vocab=32, width=8, hidden=12, depth=3)


@pytest.fixture(scope="session")
def data():
    return generate_facts(0, 20, 80, 64)


@pytest.fixture(scope="session")
def dims():
    return NetDims(vocab=64, width=32, hidden=64, depth=8)


@pytest.fixture(scope="session")
def base(dims, data):
    return train_base(dims, data, seed=0)


@pytest.fixture(scope="session")
def amap(base, data):
    return attribute(base, data)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


from pathlib import Path

CONFIG_DIR = Path(__file__).resolve().parents[1] / "configs"
ACCEPTANCE: list[tuple[str, str, float, str]] = []


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for status, name, dt, detail in ACCEPTANCE:
        terminalreporter.write_line(f"{status}  {name:<30} {dt:6.2f} s  {detail}")

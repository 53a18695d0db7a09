import numpy as np
import pytest

from gridnp.grid_model import Branch, Bus, Generator, NetworkCase, enumerate_n1, load_case
from gridnp.scenario import default_study, generate_dataset

# acceptance outcomes, printed once at the end of the run
ACCEPTANCE: list[tuple[str, bool, str]] = []


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for name, ok, detail in ACCEPTANCE:
        terminalreporter.write_line(f"{'PASS' if ok else 'FAIL'}  {name}: {detail}")


@pytest.fixture
def record():
    def _record(name: str, ok: bool, detail: str = ""):
        ACCEPTANCE.append((name, bool(ok), detail))
        print(f"{'PASS' if ok else 'FAIL'}  {name}: {detail}")
        return ok

    return _record


@pytest.fixture(scope="session")
def case9():
    return load_case("case9")


@pytest.fixture(scope="session")
def topos9(case9):
    return enumerate_n1(case9)


@pytest.fixture(scope="session")
def study9(case9):
    return default_study(case9)


@pytest.fixture(scope="session")
def small_ds(study9, topos9):
    """7 topologies x (120 train + 40 test) rows."""
    return generate_dataset(study9, topos9, 120, seed=11, n_test=40)


def two_bus(r=0.0, x=0.1, b=0.0, p_load=0.0, q_load=0.0, gs=0.0, bs=0.0) -> NetworkCase:
    buses = (
        Bus(1, "slack", v_setpoint=1.0),
        Bus(2, "pq", p_load=p_load, q_load=q_load, gs=gs, bs=bs),
    )
    return NetworkCase(100.0, buses, (Branch(1, 2, r, x, b),), (Generator(1, 0.0),), "two_bus")


def triangle() -> NetworkCase:
    buses = (Bus(1, "slack", v_setpoint=1.0), Bus(2, "pq", p_load=0.2, q_load=0.05),
             Bus(3, "pv", p_load=0.0, v_setpoint=1.01))
    branches = (Branch(1, 2, 0.01, 0.1, 0.02), Branch(2, 3, 0.02, 0.15, 0.0), Branch(1, 3, 0.0, 0.2, 0.0))
    return NetworkCase(100.0, buses, branches, (Generator(1, 0.0), Generator(3, 0.1)), "triangle")


@pytest.fixture
def rng():
    return np.random.default_rng(1234)

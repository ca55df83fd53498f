import numpy as np
import pytest

from riccati_mpc.experiments import build_example1, build_example2
from riccati_mpc.riccati import CostSpec, LtiModel, solve_care

ACCEPTANCE_LINES = []


def scalar(a=0.0, b=1.0, c=1.0, r=1.0, e=0.0):
    return LtiModel([[a]], [[b]]), CostSpec([[c]], [[r]], [[e]])


def random_instance(rng, n_max=6, m_max=2, scale=1.0):
    """Controllable/observable random continuous-time instance with E_T >= 0."""
    while True:
        n = int(rng.integers(1, n_max + 1))
        m = int(rng.integers(1, min(m_max, n) + 1))
        A = scale * rng.normal(size=(n, n))
        B = rng.normal(size=(n, m))
        C = rng.normal(size=(n, n))
        R = np.diag(rng.uniform(0.5, 2.0, m))
        E = rng.normal(size=(n, n))
        E = 0.2 * E @ E.T
        try:
            model = LtiModel(A, B)
            cost = CostSpec(C, R, E)
        except ValueError:
            continue
        return model, cost, rng.normal(size=n)


@pytest.fixture(scope="session")
def ex2():
    return build_example2()


@pytest.fixture(scope="session")
def ex2_sol(ex2):
    return solve_care(ex2.model, ex2.cost)


@pytest.fixture(scope="session")
def ex1():
    return build_example1()


@pytest.fixture(scope="session")
def ex1_sol(ex1):
    return solve_care(ex1.model, ex1.cost)


@pytest.fixture
def acceptance_line():
    def record(criterion, ok, detail):
        ACCEPTANCE_LINES.append(f"criterion {criterion}: {'PASS' if ok else 'FAIL'}  {detail}")
    return record


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE_LINES, key=lambda s: int(s.split()[1].rstrip(":"))):
            terminalreporter.write_line(line)

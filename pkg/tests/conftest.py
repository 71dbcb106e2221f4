import os

import numpy as np
import pytest

from stackelberg_po.model import Dims, TimeGrid, make_spec
from stackelberg_po.pipeline import solve_game

CONFIGS = os.path.join(os.path.dirname(__file__), os.pardir, "demos", "configs")


def config_path(name):
    return os.path.abspath(os.path.join(CONFIGS, name))


def scalar_game(steps=200, C2=0.0, **overrides):
    """Benchmark scalar instance: one follower, PD leader weights."""
    kw = dict(x0=[1.0], A=0.3, B1=[0.8], B2=0.7, alpha=0.2, C1=0.3, C2=C2,
              followers=[dict(Q=1.0, R=1.0, G=0.5, q=0.1, g=0.3)],
              leader=dict(Q=1.0, R=1.0, G=1.0))
    kw.update(overrides)
    return make_spec(Dims(1, 1, 1, 1, 1), TimeGrid(1.0, steps), **kw)


def two_follower_game(steps=100):
    rng = np.random.default_rng(4)
    n = 2
    A = np.array([[0.1, 0.4], [-0.3, 0.0]])
    return make_spec(
        Dims(n, 1, 2, 2, 1), TimeGrid(1.0, steps), x0=[1.0, -0.5], A=A,
        B1=[[[1.0], [0.0]], [[0.0], [1.0]]], B2=[[0.5], [0.5]], alpha=[0.1, 0.0],
        C1=0.2 * np.eye(2), C2=[[0.1], [0.0]], f2=[[0.3, 0.0]], K1=np.eye(2),
        followers=[dict(Q=np.eye(n), R=[[1.0]], G=0.5 * np.eye(n)),
                   dict(Q=np.diag([0.5, 1.0]), R=[[2.0]], G=np.eye(n), q=rng.normal(size=n))],
        leader=dict(Q=np.eye(n), R=[[1.0]], G=np.eye(n)))


@pytest.fixture(scope="session")
def scalar_spec():
    return scalar_game()


@pytest.fixture(scope="session")
def scalar_solution(scalar_spec):
    return solve_game(scalar_spec)


# one line per acceptance criterion, printed at the end of the run
ACCEPTANCE = []


@pytest.fixture
def criterion():
    def record(number, passed, detail):
        line = f"criterion {number}: {'PASS' if passed else 'FAIL'}  {detail}"
        ACCEPTANCE.append(line)
        print(line)
        return passed
    return record


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE, key=lambda s: int(s.split()[1].rstrip(":"))):
            terminalreporter.write_line(line)

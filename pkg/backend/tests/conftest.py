"""
Pytest configuration and shared fixtures for the solver tests.

Provides small hand-built problems (zero dynamics, the scalar delay equation
x' = -x(t-1), the LQ test problem), the shipped epidemic models and helpers
for writing run configurations into temporary directories.
"""
import json
from pathlib import Path

import numpy as np
import pytest

from core import ControlSet, History, ProblemDef, build_grid
from models import SirvParams, lq_test_problem, sirv_problem

CONFIGS_DIR = Path(__file__).resolve().parents[2] / "configs"


def make_problem(f, df_dx, df_du, n=1, m=1, delays=(), running_cost=None, dl_dx=None,
                 dl_du=None, bounds=(-1.0, 1.0), **extra) -> ProblemDef:
    """Problem with zero running cost unless callbacks are given"""
    slots = len(delays) + 1
    lower, upper = bounds
    return ProblemDef(
        n=n,
        m=m,
        delays=tuple(delays),
        f=f,
        df_dx=df_dx,
        df_du=df_du,
        running_cost=running_cost or (lambda t, X, u: 0.0),
        dl_dx=dl_dx or (lambda t, X, u: np.zeros((slots, n))),
        dl_du=dl_du or (lambda t, X, u: np.zeros(m)),
        control_set=ControlSet.box(np.full(m, lower), np.full(m, upper)),
        **extra,
    )


@pytest.fixture
def problem_factory():
    """Build ad-hoc problems inside tests"""
    return make_problem


@pytest.fixture
def zero_problem():
    """x' = 0 in one dimension"""
    return make_problem(
        f=lambda t, X, u: np.zeros(1),
        df_dx=lambda t, X, u: np.zeros((1, 1, 1)),
        df_du=lambda t, X, u: np.zeros((1, 1)),
    )


@pytest.fixture
def scalar_dde():
    """x'(t) = -x(t-1), exact value x(2) = -1/2 for unit history"""
    return make_problem(
        f=lambda t, X, u: -X[1],
        df_dx=lambda t, X, u: np.array([[[0.0]], [[-1.0]]]),
        df_du=lambda t, X, u: np.zeros((1, 1)),
        delays=(1.0,),
        bounds=(0.0, 0.0),
    )


@pytest.fixture
def dde_grid():
    return build_grid(0.0, 2.0, 2000, [1.0])


@pytest.fixture
def unit_history():
    return History.constant([1.0])


@pytest.fixture
def lq_problem():
    """x' = u, cost x^2 + u^2 on [0, 1], u in [-10, 10]"""
    return lq_test_problem(0.0, 1.0, 1.0, 1.0, T=1.0)


@pytest.fixture
def sirv_params():
    return SirvParams()


@pytest.fixture
def sirv(sirv_params):
    return sirv_problem(sirv_params)


@pytest.fixture
def sidarthe_params():
    """Illustrative coefficient set shipped with the repository"""
    with open(CONFIGS_DIR / "sidarthe_v_illustrative.json", encoding="utf-8") as file:
        return json.load(file)["model"]["parameters"]


@pytest.fixture
def configs_dir():
    return CONFIGS_DIR


@pytest.fixture
def write_config(tmp_path):
    """Write a run configuration dict to a JSON file and return its path"""
    def write(document, name="run.json"):
        path = tmp_path / name
        path.write_text(json.dumps(document), encoding="utf-8")
        return str(path)
    return write


@pytest.fixture
def lq_config(tmp_path):
    """Small LQ run configuration writing into tmp_path"""
    return {
        "model": {"name": "lq", "parameters": {"a": 0.0, "b": 1.0, "q": 1.0, "r": 1.0,
                                               "horizon": 1.0, "x0": 1.0}},
        "grid": {"t0": 0.0, "N": 200},
        "solver": {"C0_diag": 1.0},
        "output": {"directory": str(tmp_path / "out")},
    }


@pytest.fixture
def short_sirv_config(tmp_path):
    """SIRV with default rates on a 100-day horizon"""
    return {
        "model": {"name": "sirv", "parameters": {"horizon": 100.0}},
        "grid": {"t0": 0.0, "N": 1000},
        "output": {"directory": str(tmp_path / "sirv")},
    }


def pytest_configure(config):
    """Configure pytest markers"""
    config.addinivalue_line("markers", "unit: Unit tests for individual components")
    config.addinivalue_line("markers", "integration: Integration tests for solver workflows")
    config.addinivalue_line("markers", "cli: Command-line front end tests")
    config.addinivalue_line("markers", "slow: Tests that take longer to run")

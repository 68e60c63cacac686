import math
from pathlib import Path

import numpy as np
import pytest

from rsrvi.chain_model import ChainModel
from rsrvi.diffusion_bridge import GridSpec, build_chain, ou_model, solve_chain

FIXTURES = Path(__file__).resolve().parent.parent / "fixtures"

ACCEPTANCE_LINES: list[str] = []


def rank_one_model() -> ChainModel:
    """Two states, uniform transitions, k = (ln 2, ln 4).

    Q = [[1, 1], [2, 2]] has Perron pair (3, (1, 2)).
    """
    return ChainModel(np.full((2, 1, 2), 0.5), [[math.log(2)], [math.log(4)]],
                      strictly_positive=True)


@pytest.fixture
def rank_one():
    return rank_one_model()


@pytest.fixture
def fixtures_dir():
    return FIXTURES


@pytest.fixture(scope="session")
def ou_problem():
    """OU benchmark on [-6, 6], h = 0.03, dt = 0.9 x CFL."""
    return build_chain(ou_model(3 / 16, 6.0), GridSpec(0.03))


@pytest.fixture(scope="session")
def ou_solution(ou_problem):
    return solve_chain(ou_problem)


@pytest.fixture(scope="session")
def ou_coarse():
    return build_chain(ou_model(3 / 16, 6.0), GridSpec(0.1))


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)

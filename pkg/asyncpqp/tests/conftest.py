import numpy as np
import pytest
from pathlib import Path

from asyncpqp.harness import ExperimentConfig
from asyncpqp.problem import (
    Block,
    SeparableQpProblem,
    _spd_matrix,
    dual_curvature,
    generate_random_problem,
)


def pytest_addoption(parser):
    parser.addoption(
        "--runslow", action="store_true", default=False, help="run full-scale tests"
    )


def pytest_collection_modifyitems(config, items):
    if config.getoption("--runslow"):
        return
    skip_slow = pytest.mark.skip(reason="needs --runslow")
    for item in items:
        if "slow" in item.keywords:
            item.add_marker(skip_slow)


@pytest.fixture(scope="session")
def get_data_folder():
    return Path(__file__).resolve().parent / "data"


@pytest.fixture(scope="session")
def desk_config(get_data_folder):
    """Desk-scale experiment with the step size set to half the stable range."""
    config = ExperimentConfig.from_json(get_data_folder / "desk.json")
    G = dual_curvature(config.build_problem())
    return config.with_overrides(alpha=0.5 / np.linalg.eigvalsh(G).max())


@pytest.fixture(scope="session")
def scaled_problem():
    """Random instance whose common step size is ``fraction / lambda_max(G)``."""

    def _make(seed, N=4, n=4, m=3, fraction=1.0):
        problem = generate_random_problem(seed, N, n, m, alpha=1.0)
        G = dual_curvature(problem)
        return problem.with_alpha(fraction / np.linalg.eigvalsh(G).max())

    return _make


@pytest.fixture(scope="session")
def near_isotropic_problem():
    """Homogeneous instance where every A_i Q_i^{-1} A_i^T is close to a multiple of I.

    Any joint delay pattern with fewer stale than fresh workers then satisfies
    the gate condition.
    """

    def _make(seed, N=6, n=6, m=2):
        rng = np.random.Generator(np.random.Philox(seed))
        blocks = []
        for _ in range(N):
            rows, _ = np.linalg.qr(rng.standard_normal((n, m)))
            A = rng.uniform(0.9, 1.1) * rows.T
            Q = _spd_matrix(rng, n, 1.2)
            blocks.append(Block(Q / np.linalg.eigvalsh(Q).max(), A, np.zeros(n), 1.0))
        problem = SeparableQpProblem(blocks, np.zeros(m), seed=seed)
        G = dual_curvature(problem)
        return problem.with_alpha(0.5 / np.linalg.eigvalsh(G).max())

    return _make


@pytest.fixture(scope="session")
def decoupled_problem():
    """Nearly diagonal dual curvature with alpha * G_ll close to 0.12.

    rho(|I + sum Phi_i|) is then about 0.88.
    """

    def _make(seed, N=4, m=3):
        rng = np.random.Generator(np.random.Philox(seed))
        blocks = []
        for _ in range(N):
            scale = rng.uniform(0.5, 1.5)
            A = scale * np.eye(m) + 0.01 * rng.uniform(-1.0, 1.0, size=(m, m))
            Q = rng.uniform(1.0, 2.0) * np.eye(m)
            blocks.append(Block(Q, A, rng.uniform(-1.0, 1.0, size=m), 1.0))
        problem = SeparableQpProblem(blocks, rng.uniform(-1.0, 1.0, size=m), seed=seed)
        G = dual_curvature(problem)
        return problem.with_alpha(0.12 / np.diag(G).max())

    return _make

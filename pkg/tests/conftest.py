import numpy as np
import pytest

from etc_hinf import riccati


@pytest.fixture(scope="session")
def scalar_sys():
    return riccati.SystemModel.from_matrices([[1.0]], [[1.0]], [[1.0]], [[1.0]])


@pytest.fixture(scope="session")
def third_sys():
    a = [[0.0, 1.0, 0.0], [0.0, 0.0, 1.0], [-1.0, -2.0, -1.0]]
    return riccati.SystemModel.from_matrices(a, [[0.0], [0.0], [1.0]], np.eye(3), [[1.0]])


@pytest.fixture(scope="session")
def scalar_gammas(scalar_sys):
    return riccati.gamma_table(scalar_sys, 5)


@pytest.fixture(scope="session")
def third_gammas(third_sys):
    return riccati.gamma_table(third_sys, 5)


def random_system(rng, n, m):
    """Controllable/observable random plant (random draws are a.s. valid)."""
    while True:
        a = rng.normal(size=(n, n)) * 0.8
        b = rng.normal(size=(n, m))
        q = rng.normal(size=(n, n))
        q = q @ q.T + 0.3 * np.eye(n)
        r = rng.normal(size=(m, m))
        r = r @ r.T + 0.5 * np.eye(m)
        try:
            return riccati.SystemModel.from_matrices(a, b, q, r)
        except Exception:
            continue

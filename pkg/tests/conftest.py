import numpy as np
import pytest

from spatialcc.data import from_arrays, sampling_correction
from spatialcc.graph import AdjacencyGraph, grid_graph


@pytest.fixture(scope="session")
def two_node_graph():
    return AdjacencyGraph(2, np.array([[0, 1]]), ("a", "b"))


@pytest.fixture(scope="session")
def path3_graph():
    return AdjacencyGraph(3, np.array([[0, 1], [1, 2]]), ("a", "b", "c"))


@pytest.fixture(scope="session")
def lattice3():
    return grid_graph(3, 3)


@pytest.fixture(scope="session")
def lattice5():
    return grid_graph(5, 5)


def make_synthetic(n=50, lattice=3, n_large=3, p_extra=2, seed=42,
                   theta1=(0.9, 0.99, 0.7)):
    """Small synthetic case-control dataset on a lattice.

    Labels come from an arbitrary logistic draw; the point is exercising
    the density/gradient machinery, not matching any generative story.
    """
    rng = np.random.default_rng(seed)
    L = lattice * lattice
    columns = ["intercept"] + [f"x{k}" for k in range(1, p_extra + 1)]
    X = np.ones((n, p_extra + 1))
    X[:, 1] = rng.standard_normal(n)
    if p_extra >= 2:
        X[:, 2] = (rng.uniform(size=n) < 0.4).astype(float)
    small = rng.integers(0, L, size=n)
    large = rng.integers(0, n_large, size=n)
    mu = -1.0 + 0.8 * X[:, 1]
    y = (rng.uniform(size=n) < 1.0 / (1.0 + np.exp(-mu))).astype(np.int64)
    corrections = [sampling_correction(20 + 10 * j, 400, 0.01 * (j + 1))
                   for j in range(n_large)]
    log_offset = np.array([c.log_offset for c in corrections])
    th = np.asarray(theta1[:n_large], dtype=float)
    return from_arrays(
        y=y, X_raw=X, columns=columns, small_area_id=small,
        large_area_id=large, log_offset=log_offset, theta1=th,
        small_area_names=[f"a{i}" for i in range(L)],
        large_area_names=[f"J{j}" for j in range(n_large)],
    )


@pytest.fixture(scope="session")
def gradient_fixture():
    """The 50-observation, 9-small-area dataset used by the gradient suite."""
    return make_synthetic(n=50, lattice=3, n_large=3, p_extra=2, seed=42)

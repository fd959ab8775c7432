import numpy as np
import pytest

from sparsegp import RngState, standard_normal


@pytest.fixture
def rng():
    return RngState(1234)


def make_spd(rng: RngState, dim: int, scale: float = 1.0) -> np.ndarray:
    m = standard_normal(rng, (dim, dim))
    return scale * (m @ m.T + dim * np.eye(dim))


def random_lower(rng: RngState, dim: int) -> np.ndarray:
    l = np.tril(standard_normal(rng, (dim, dim)))
    np.fill_diagonal(l, np.abs(np.diag(l)) + 0.3)
    return l


def desk_truth(x):
    return np.sin(1.2 * x) + 0.4 * np.cos(2.9 * x)


def desk_regression(n: int = 30, seed: int = 7, noise: float = 0.15):
    """The 1-D regression set shipped under data/: smooth signal, mild noise."""
    rng = RngState(seed)
    x = np.sort(rng.generator.uniform(0.0, 6.0, size=n))[:, None]
    y = desk_truth(x[:, 0]) + noise * standard_normal(rng.derive(1), n)
    return x, y[:, None]

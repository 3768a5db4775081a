import numpy as np
import pytest

from nbl import stats, toymodel


def rng(seed: int) -> np.random.Generator:
    return np.random.Generator(np.random.PCG64(seed))


@pytest.fixture
def tiny_config() -> toymodel.ToyConfig:
    return toymodel.ToyConfig(
        layers=4, dim=32, heads=4, groups=2, d_ff=64, vocab=64, max_context=64, seed=11
    )


@pytest.fixture
def tiny_model(tiny_config) -> toymodel.ToyTransformer:
    return toymodel.init_random(tiny_config)


def random_covset(seed: int, h_in: int, h_out: int, n: int = 512) -> stats.CovarianceSet:
    """Covariances of a correlated pair Y = A X + noise, well conditioned."""
    g = rng(seed)
    a = g.standard_normal((h_out, h_in)) / np.sqrt(h_in)
    x = g.standard_normal((h_in, n))
    y = a @ x + 0.3 * g.standard_normal((h_out, n))
    return stats.covset_from_matrices(x, y)

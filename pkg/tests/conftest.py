import numpy as np
import pytest

from stasmil.data import generate_synthetic_cohort
from stasmil.graphs import bag_to_graphs
from stasmil.model import ModelConfig
from stasmil.tensorops import SeededRng


def shrink_bag(bag, feature_dim, n_small=10, n_large=6, n_cells=18):
    """Cut a synthetic bag down to the small test configuration."""
    bag.coords_small = bag.coords_small[:n_small]
    bag.features_small = bag.features_small[:n_small, :feature_dim]
    bag.coords_large = bag.coords_large[:n_large]
    bag.features_large = bag.features_large[:n_large, :feature_dim]
    bag.cells = bag.cells[:n_cells]
    return bag


def tiny_cohort(n=6, seed=7, feature_dim=12, **kw):
    bags = generate_synthetic_cohort(n, SeededRng(seed))
    return [shrink_bag(b, feature_dim, **kw) for b in bags]


@pytest.fixture
def small_cfg():
    return ModelConfig.small()


def small_full_feature_cfg():
    """Reduced architecture over the real 768-dim on-disk feature format."""
    return ModelConfig(hidden=16, pool_large=4, pool_small=8, pool_tme=8,
                       heads=2, dam_layers=2, expert_dim=8, head_hidden=8)


@pytest.fixture
def tiny_graphs(small_cfg):
    bags = tiny_cohort(3, seed=7, feature_dim=small_cfg.feature_dim)
    return [bag_to_graphs(b, k=3) for b in bags]


@pytest.fixture
def rng():
    return SeededRng(0)


def rand(shape, seed=0, scale=1.0):
    return SeededRng(seed).normal(shape, scale=scale)


def triple_loop_matmul(a, b):
    m, k = a.shape
    _, n = b.shape
    out = np.zeros((m, n))
    for i in range(m):
        for j in range(n):
            acc = 0.0
            for t in range(k):
                acc += a[i, t] * b[t, j]
            out[i, j] = acc
    return out

import numpy as np
import pytest

from synthetic import make_tree


@pytest.fixture
def rng():
    return np.random.default_rng(20240601)


@pytest.fixture(scope="session")
def toy_tree(tmp_path_factory):
    """Small PTB-shaped tree with learnable MI/healthy differences."""
    root = tmp_path_factory.mktemp("toyptb")
    make_tree(root, n_mi=6, n_healthy=6, seconds=12, seed=7)
    return root


@pytest.fixture(scope="session")
def train_tree(tmp_path_factory):
    """20 usable records: enough for two of each class in val and test."""
    root = tmp_path_factory.mktemp("trainptb")
    make_tree(root, n_mi=10, n_healthy=10, seconds=11, seed=3, extras=False)
    return root


@pytest.fixture(scope="session")
def pair_tree(tmp_path_factory):
    """One MI and one healthy record."""
    root = tmp_path_factory.mktemp("pairptb")
    make_tree(root, n_mi=1, n_healthy=1, seconds=11, seed=5, extras=False)
    return root

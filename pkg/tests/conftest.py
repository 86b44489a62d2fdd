"""
Shared fixtures for the test suite.
Run with: pytest tests -v
"""
import sys
from pathlib import Path

import numpy as np
import pytest

# Add project root to path
sys.path.append(str(Path(__file__).parent.parent))

from oscgnn.graph import build_graph, complete_graph, make_graph_task, make_sbm, make_splits, ring_graph
from oscgnn.utils.reproducibility import make_rng


@pytest.fixture
def rng():
    """Seeded generator; every test gets the same stream."""
    return np.random.default_rng(1234)


@pytest.fixture
def k2():
    return complete_graph(2)


@pytest.fixture
def ring6():
    return ring_graph(6)


@pytest.fixture
def random_graph12():
    """12-node random graph with a ring backbone so nobody is isolated."""
    gen = make_rng(7, "test-graph")
    iu, ju = np.triu_indices(12, k=1)
    hit = gen.random(iu.shape[0]) < 0.25
    edges = list(zip(iu[hit], ju[hit])) + [(i, (i + 1) % 12) for i in range(12)]
    return build_graph(edges, 12)


@pytest.fixture(scope="module")
def sbm_bundle():
    return make_sbm(seed=0)


@pytest.fixture(scope="module")
def sbm_masks(sbm_bundle):
    return make_splits(sbm_bundle, train_per_class=20, val_count=20, seed=0)


@pytest.fixture(scope="module")
def graph_class_bundle():
    return make_graph_task(num_graphs=40, task="graph-class", seed=0)
